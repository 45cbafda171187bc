//! Byte-level BPE shared by the forward and backward models.
//!
//! Ids `0..256` are the raw bytes, id 256 is the end-of-text marker, and every
//! merge rule that produces a new byte string appends one id after that.
//! Text is split into pieces before merging: each piece is a run of
//! whitespace followed by a run of non-whitespace (a word), so a word's first
//! token usually carries the space in front of it. Merges never cross piece
//! boundaries.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const BYTE_TOKENS: usize = 256;
pub const EOT_ID: u32 = 256;
pub const MIN_VOCAB_SIZE: usize = 257;
const EOT_TEXT: &[u8] = b"<|endoftext|>";

/// SHA-256 over the vocabulary's canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VocabHash(pub [u8; 32]);

impl VocabHash {
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push(char::from_digit((b >> 4) as u32, 16).unwrap());
            s.push(char::from_digit((b & 0xf) as u32, 16).unwrap());
        }
        s
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, pair) in bytes.chunks(2).enumerate() {
            let hi = (pair[0] as char).to_digit(16)?;
            let lo = (pair[1] as char).to_digit(16)?;
            out[i] = (hi * 16 + lo) as u8;
        }
        Some(VocabHash(out))
    }
}

impl fmt::Debug for VocabHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VocabHash({})", self.to_hex())
    }
}

impl fmt::Display for VocabHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    id_of: BTreeMap<Vec<u8>, u32>,
    rank_of: BTreeMap<(u32, u32), usize>,
}

/// Token ids for a text plus the index of the token that starts each word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub word_starts: Vec<usize>,
}

impl Encoding {
    pub fn n_words(&self) -> usize {
        self.word_starts.len()
    }

    /// Token range `[start, end)` covered by word `w`, up to the next word's start.
    pub fn word_span(&self, w: usize) -> (usize, usize) {
        let start = self.word_starts[w];
        let end = self.word_starts.get(w + 1).copied().unwrap_or(self.ids.len());
        (start, end)
    }
}

pub type PieceCache = BTreeMap<Vec<u8>, Vec<u32>>;

#[inline]
fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Splits `bytes` into `(piece_start, word_start, piece_end)` triples;
/// `word_start == piece_end` for a trailing all-whitespace piece.
fn pieces(bytes: &[u8]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let mut pos = 0;
    core::iter::from_fn(move || {
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        while pos < bytes.len() && is_space(bytes[pos]) {
            pos += 1;
        }
        let word = pos;
        while pos < bytes.len() && !is_space(bytes[pos]) {
            pos += 1;
        }
        Some((start, word, pos))
    })
}

/// Learns merge rules until the vocabulary holds `vocab_size` ids or no
/// adjacent pair is left to merge.
///
/// Pairs are ranked by descending frequency; ties go to the pair whose
/// `(left bytes, right bytes)` is lexicographically smallest, so the result
/// depends on nothing but the corpus.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(Error::VocabTooSmall(vocab_size));
    }
    let mut counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    let texts: Vec<S> = corpus.into_iter().collect();
    let mut total = 0usize;
    for t in &texts {
        let bytes = t.as_ref().as_bytes();
        total += bytes.len();
        for (s, _, e) in pieces(bytes) {
            *counts.entry(&bytes[s..e]).or_insert(0) += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut vocab = Vocab::bytes_only();
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .filter(|(w, _)| w.len() > 1)
        .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
        .collect();

    while vocab.tokens.len() < vocab_size {
        let mut pair_counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += c;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| vocab.pair_order(*pb, *pa))
        });
        let Some(((left, right), _)) = best else { break };
        let result = vocab.push_merge(left, right);
        for (syms, _) in words.iter_mut() {
            apply_merge(syms, left, right, result);
        }
        words.retain(|(s, _)| s.len() > 1);
    }
    Ok(vocab)
}

fn apply_merge(syms: &mut Vec<u32>, left: u32, right: u32, result: u32) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

impl Vocab {
    fn bytes_only() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..BYTE_TOKENS).map(|b| alloc::vec![b as u8]).collect();
        tokens.push(Vec::new());
        let id_of = tokens[..BYTE_TOKENS]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, merges: Vec::new(), id_of, rank_of: BTreeMap::new() }
    }

    /// Rebuilds a vocabulary by replaying merge rules given as byte strings.
    pub fn from_merges<I, B>(merges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (B, B)>,
        B: AsRef<[u8]>,
    {
        let mut v = Vocab::bytes_only();
        for (l, r) in merges {
            let left = v.id_of(l.as_ref()).ok_or(Error::InvalidConfig("merge operand not in vocabulary".into()))?;
            let right = v.id_of(r.as_ref()).ok_or(Error::InvalidConfig("merge operand not in vocabulary".into()))?;
            if v.rank_of.contains_key(&(left, right)) {
                return Err(Error::InvalidConfig("duplicate merge rule".into()));
            }
            v.push_merge(left, right);
        }
        Ok(v)
    }

    fn pair_order(&self, a: (u32, u32), b: (u32, u32)) -> Ordering {
        let ta = (&self.tokens[a.0 as usize], &self.tokens[a.1 as usize]);
        let tb = (&self.tokens[b.0 as usize], &self.tokens[b.1 as usize]);
        ta.cmp(&tb)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        // Two different pairs can spell the same string; they share one id.
        let result = match self.id_of.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.tokens.push(bytes.clone());
                self.id_of.insert(bytes, id);
                id
            }
        };
        self.rank_of.insert((left, right), self.merges.len());
        self.merges.push(Merge { left, right, result });
        result
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eot(&self) -> u32 {
        EOT_ID
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Merge rules as `(left, right)` byte strings, in merge order.
    pub fn merge_pairs(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.merges
            .iter()
            .map(|m| (self.tokens[m.left as usize].as_slice(), self.tokens[m.right as usize].as_slice()))
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.id_of.get(bytes).copied()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if id == EOT_ID {
            return Some(EOT_TEXT);
        }
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn digest(&self) -> VocabHash {
        let mut h = Sha256::new();
        h.update(b"bpe-vocab");
        h.update((self.size() as u64).to_le_bytes());
        h.update((EOT_ID as u64).to_le_bytes());
        for (l, r) in self.merge_pairs() {
            h.update((l.len() as u64).to_le_bytes());
            h.update(l);
            h.update((r.len() as u64).to_le_bytes());
            h.update(r);
        }
        VocabHash(h.finalize().into())
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = piece.iter().map(|&b| b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.rank_of.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let m = self.merges[rank];
            apply_merge(&mut syms, m.left, m.right, m.result);
        }
        out.extend_from_slice(&syms);
    }

    pub fn encode(&self, text: &str) -> Encoding {
        self.encode_bytes_cached(text.as_bytes(), None)
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Encoding {
        self.encode_bytes_cached(bytes, None)
    }

    /// Same as [`Vocab::encode`], memoizing piece encodings in `cache`.
    pub fn encode_cached(&self, text: &str, cache: &mut PieceCache) -> Encoding {
        self.encode_bytes_cached(text.as_bytes(), Some(cache))
    }

    fn encode_bytes_cached(&self, bytes: &[u8], mut cache: Option<&mut PieceCache>) -> Encoding {
        let mut enc = Encoding::default();
        let mut buf = Vec::new();
        for (s, w, e) in pieces(bytes) {
            let piece = &bytes[s..e];
            let first = enc.ids.len();
            match cache.as_deref_mut() {
                Some(c) => {
                    if let Some(ids) = c.get(piece) {
                        enc.ids.extend_from_slice(ids);
                    } else {
                        buf.clear();
                        self.encode_piece(piece, &mut buf);
                        c.insert(piece.to_vec(), buf.clone());
                        enc.ids.extend_from_slice(&buf);
                    }
                }
                None => self.encode_piece(piece, &mut enc.ids),
            }
            if w < e {
                // Index of the token holding the word's first byte.
                let target = w - s;
                let mut offset = 0;
                for (k, &id) in enc.ids[first..].iter().enumerate() {
                    offset += self.tokens[id as usize].len();
                    if offset > target {
                        enc.word_starts.push(first + k);
                        break;
                    }
                }
            }
        }
        enc
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id).ok_or(Error::UnknownId(id))?);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| Error::InvalidUtf8)
    }
}
