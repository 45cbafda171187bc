//! Document stores, fixed-length LM segments and CoNLL-style labeled data.

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::{rng_from_seed, shuffle};
use crate::tokenizer::{Encoding, PieceCache, Vocab};
use crate::{Direction, Error, Result};

/// Cleaned documents in a seeded shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentStore {
    pub docs: Vec<String>,
    pub order_seed: u64,
}

fn is_heading(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 2 && t.starts_with('=') && t.ends_with('=')
}

/// Splits `text` on blank lines and drops heading lines like `= Title =`.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
            continue;
        }
        if is_heading(line) {
            continue;
        }
        cur.push(line);
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

impl DocumentStore {
    /// Builds a store from the contents of one or more corpus files and
    /// shuffles it at the document level.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], seed: u64) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::NoInput);
        }
        let mut docs: Vec<String> = texts.iter().flat_map(|t| split_documents(t.as_ref())).collect();
        shuffle(&mut docs, &mut rng_from_seed(seed));
        Ok(DocumentStore { docs, order_seed: seed })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// The full token stream: documents in store order with one end-of-text
    /// id between consecutive documents.
    pub fn token_stream(&self, vocab: &Vocab) -> Vec<u32> {
        let mut cache = PieceCache::new();
        let mut out = Vec::new();
        for (i, d) in self.docs.iter().enumerate() {
            if i > 0 {
                out.push(vocab.eot());
            }
            out.extend(vocab.encode_cached(d, &mut cache).ids);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSegment {
    pub ids: Vec<u32>,
    pub direction: Direction,
}

impl TokenSegment {
    pub fn forward(ids: Vec<u32>) -> Self {
        TokenSegment { ids, direction: Direction::Forward }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Flips a forward segment into the backward training view.
pub fn reverse_segment(seg: &TokenSegment) -> Result<TokenSegment> {
    if seg.direction == Direction::Backward {
        return Err(Error::DoubleReversal);
    }
    let mut ids = seg.ids.clone();
    ids.reverse();
    Ok(TokenSegment { ids, direction: Direction::Backward })
}

/// Consecutive non-overlapping windows of `len` ids; a short tail is dropped.
#[derive(Debug, Clone)]
pub struct SegmentStream {
    stream: Vec<u32>,
    len: usize,
    pos: usize,
}

impl SegmentStream {
    pub fn from_ids(stream: Vec<u32>, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::InvalidConfig("segment length must be at least 2".to_owned()));
        }
        Ok(SegmentStream { stream, len, pos: 0 })
    }

    pub fn total_ids(&self) -> usize {
        self.stream.len()
    }

    pub fn segment_len(&self) -> usize {
        self.len
    }

    pub fn n_segments(&self) -> usize {
        self.stream.len() / self.len
    }

    pub fn discarded(&self) -> usize {
        self.stream.len() % self.len
    }
}

impl Iterator for SegmentStream {
    type Item = TokenSegment;

    fn next(&mut self) -> Option<TokenSegment> {
        if self.pos + self.len > self.stream.len() {
            return None;
        }
        let ids = self.stream[self.pos..self.pos + self.len].to_vec();
        self.pos += self.len;
        Some(TokenSegment::forward(ids))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.stream.len() - self.pos) / self.len;
        (n, Some(n))
    }
}

impl ExactSizeIterator for SegmentStream {}

pub fn segment_stream(store: &DocumentStore, vocab: &Vocab, len: usize) -> Result<SegmentStream> {
    SegmentStream::from_ids(store.token_stream(vocab), len)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
    pub encoding: Encoding,
}

impl LabeledSentence {
    pub fn new(words: Vec<String>, tags: Vec<String>, vocab: &Vocab) -> Result<Self> {
        if words.len() != tags.len() {
            return Err(Error::LengthMismatch(words.len(), tags.len()));
        }
        let encoding = vocab.encode(&words.join(" "));
        if encoding.n_words() != words.len() {
            return Err(Error::InvalidConfig("word contains whitespace".to_owned()));
        }
        Ok(LabeledSentence { words, tags, encoding })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Rewrites IOB1 tags as IOB2: an `I-X` that does not continue an `X` span
/// becomes `B-X`. Tags without a `B-`/`I-` prefix pass through unchanged.
pub fn iob1_to_iob2(tags: &mut [String]) {
    let mut prev: Option<String> = None;
    for tag in tags.iter_mut() {
        let cur_type = tag.strip_prefix("I-").or_else(|| tag.strip_prefix("B-")).map(|s| s.to_owned());
        if let Some(t) = tag.strip_prefix("I-") {
            if prev.as_deref() != Some(t) {
                *tag = alloc::format!("B-{t}");
            }
        }
        prev = cur_type;
    }
}

/// Parses whitespace-column CoNLL text. Column 0 is the word; `tag_column`
/// picks the label (CoNLL-2003: 1 = POS, 2 = chunk, 3 = NER).
pub fn parse_conll(text: &str, vocab: &Vocab, tag_column: usize) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut n_cols: Option<usize> = None;

    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<String>| -> Result<()> {
        if !words.is_empty() {
            iob1_to_iob2(tags);
            out.push(LabeledSentence::new(core::mem::take(words), core::mem::take(tags), vocab)?);
        }
        Ok(())
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut words, &mut tags)?;
            continue;
        }
        match n_cols {
            None => n_cols = Some(cols.len()),
            Some(n) if n != cols.len() => {
                return Err(Error::Conll {
                    line: lineno,
                    msg: alloc::format!("expected {n} columns, found {}", cols.len()),
                })
            }
            _ => {}
        }
        if cols[0] == "-DOCSTART-" {
            flush(&mut words, &mut tags)?;
            continue;
        }
        let tag = cols.get(tag_column).ok_or_else(|| Error::Conll {
            line: lineno,
            msg: alloc::format!("no column {tag_column}"),
        })?;
        words.push(cols[0].to_owned());
        tags.push((*tag).to_owned());
    }
    flush(&mut words, &mut tags)?;
    Ok(out)
}
