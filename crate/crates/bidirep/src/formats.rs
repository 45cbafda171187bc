//! On-disk encodings: vocabulary, checkpoint, representation dump, probe and
//! segment cache. Every reader is the exact inverse of its writer.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bidirep_core::fusion::{Provenance, RepMatrix};
use bidirep_core::model::{ModelConfig, Parameters};
use bidirep_core::probe::ProbeParams;
use bidirep_core::tensor::{Matrix, Tensor};
use bidirep_core::tokenizer::{Vocab, VocabHash};
use bidirep_core::train::ModelCheckpoint;
use bidirep_core::Direction;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Vocabulary

pub fn encode_vocab(vocab: &Vocab) -> String {
    let mut out = format!("BPEVOCAB v1 {}\nEOT {}\n", vocab.size(), vocab.eot());
    for (l, r) in vocab.merge_pairs() {
        out.push_str(&B64.encode(l));
        out.push(' ');
        out.push_str(&B64.encode(r));
        out.push('\n');
    }
    out
}

pub fn decode_vocab(text: &str) -> Result<Vocab> {
    let bad = |m: &str| Error::format(format!("bad vocab file: {m}"));
    let mut lines = text.lines();
    let size: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("BPEVOCAB v1 "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("header"))?;
    let eot: u32 =
        lines.next().and_then(|l| l.strip_prefix("EOT ")).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("EOT line"))?;
    let mut merges = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (l, r) = line.split_once(' ').ok_or_else(|| bad("merge line"))?;
        let l = B64.decode(l).map_err(|_| bad("base64"))?;
        let r = B64.decode(r).map_err(|_| bad("base64"))?;
        merges.push((l, r));
    }
    let vocab = Vocab::from_merges(merges)?;
    if vocab.size() != size || vocab.eot() != eot {
        return Err(bad("size does not match merges"));
    }
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// Tensor blocks shared by checkpoints and probes

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, t.shape.len() as u64);
    for &d in &t.shape {
        put_u64(out, d as u64);
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self) -> Error {
        Error::format(format!("corrupt {}", self.what))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| self.corrupt())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&v| v <= self.buf.len()).ok_or_else(|| self.corrupt())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let n = self.len()?;
        serde_json::from_slice(self.take(n)?).map_err(|_| self.corrupt())
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.len()?;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt())?;
        let rank = self.len()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.corrupt())?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.corrupt())?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::from_vec(&shape, data)))
    }

    /// Reads named tensors into `slots` in order, checking names and shapes.
    fn tensors_into(&mut self, names: &[String], slots: Vec<&mut Tensor<f32>>) -> Result<()> {
        for (name, slot) in names.iter().zip(slots) {
            let (n, t) = self.tensor()?;
            if &n != name || t.shape != slot.shape {
                return Err(self.corrupt());
            }
            *slot = t;
        }
        if !self.done() {
            return Err(self.corrupt());
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Checkpoint

const CKPT_MAGIC: &[u8] = b"BLMCKPT v1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    direction: Direction,
    step: u64,
    vocab_hash: String,
    tensors_sha256: String,
    config_digest: String,
}

/// Everything a checkpoint file carries besides the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub tensors_sha256: String,
    pub config_digest: String,
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint, config_digest: &str) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, t) in ckpt.params.names().iter().zip(ckpt.params.tensors()) {
        put_tensor(&mut body, name, t);
    }
    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        direction: ckpt.direction(),
        step: ckpt.step,
        vocab_hash: ckpt.vocab_hash.to_hex(),
        tensors_sha256: sha256_hex(&body),
        config_digest: config_digest.to_owned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = CKPT_MAGIC.to_vec();
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ModelCheckpoint, CheckpointMeta)> {
    let rest = buf.strip_prefix(CKPT_MAGIC).ok_or_else(|| Error::format("not a checkpoint (bad header)"))?;
    let mut cur = Cursor { buf: rest, pos: 0, what: "checkpoint" };
    let header: CheckpointHeader = cur.json()?;
    if header.direction != header.config.direction {
        return Err(cur.corrupt());
    }
    header.config.validate()?;
    let vocab_hash = VocabHash::from_hex(&header.vocab_hash).ok_or_else(|| cur.corrupt())?;
    if sha256_hex(&rest[cur.pos..]) != header.tensors_sha256 {
        return Err(cur.corrupt());
    }
    let mut params = Parameters::<f32>::zeros(&header.config);
    let names = params.names();
    cur.tensors_into(&names, params.tensors_mut())?;
    Ok((
        ModelCheckpoint { config: header.config, params, vocab_hash, step: header.step },
        CheckpointMeta { tensors_sha256: header.tensors_sha256, config_digest: header.config_digest },
    ))
}

// ---------------------------------------------------------------------------
// Representation dump

pub fn encode_reps(m: &Matrix<f32>) -> Vec<u8> {
    let mut out = format!("REPS v1 {} {}\n", m.rows, m.cols).into_bytes();
    out.reserve(m.data.len() * 4);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_reps(buf: &[u8]) -> Result<Matrix<f32>> {
    let bad = || Error::format("bad representation dump header");
    let nl = buf.iter().position(|&b| b == b'\n').ok_or_else(bad)?;
    let header = std::str::from_utf8(&buf[..nl]).map_err(|_| bad())?;
    let mut parts = header.strip_prefix("REPS v1 ").ok_or_else(bad)?.split(' ');
    let rows: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let cols: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    let body = &buf[nl + 1..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(Error::format("representation dump size does not match its header"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// A dump read from disk, treated as externally produced forward states.
pub fn external_reps(buf: &[u8], vocab_hash: Option<VocabHash>) -> Result<RepMatrix> {
    Ok(RepMatrix::external(decode_reps(buf)?, vocab_hash)?)
}

pub fn rep_matrix(values: Matrix<f32>, provenance: Provenance, vocab_hash: Option<VocabHash>) -> RepMatrix {
    RepMatrix { values, provenance, vocab_hash }
}

// ---------------------------------------------------------------------------
// Probe

const PROBE_MAGIC: &[u8] = b"PROBE v1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHeader {
    pub d: usize,
    pub c: usize,
    pub label_set: Vec<String>,
    pub dropout: f64,
    /// Setting whose representations the probe was trained on.
    #[serde(default)]
    pub setting: Option<String>,
    #[serde(default)]
    pub vocab_hash: Option<String>,
    #[serde(default)]
    pub config_digest: String,
}

const PROBE_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

pub fn encode_probe(pp: &ProbeParams<f32>, setting: Option<&str>, vocab_hash: Option<VocabHash>, config_digest: &str) -> Vec<u8> {
    let header = ProbeHeader {
        d: pp.dim(),
        c: pp.n_classes(),
        label_set: pp.label_set.clone(),
        dropout: pp.dropout_rate,
        setting: setting.map(str::to_owned),
        vocab_hash: vocab_hash.map(|h| h.to_hex()),
        config_digest: config_digest.to_owned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = PROBE_MAGIC.to_vec();
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    for (name, t) in PROBE_NAMES.iter().zip(pp.tensors()) {
        put_tensor(&mut out, name, t);
    }
    out
}

pub fn decode_probe(buf: &[u8]) -> Result<(ProbeParams<f32>, ProbeHeader)> {
    let rest = buf.strip_prefix(PROBE_MAGIC).ok_or_else(|| Error::format("not a probe file (bad header)"))?;
    let mut cur = Cursor { buf: rest, pos: 0, what: "probe file" };
    let header: ProbeHeader = cur.json()?;
    let mut pp = ProbeParams::<f32>::zeros(header.d, header.label_set.clone(), header.dropout)?;
    if pp.n_classes() != header.c {
        return Err(cur.corrupt());
    }
    let names: Vec<String> = PROBE_NAMES.iter().map(|s| s.to_string()).collect();
    cur.tensors_into(&names, pp.tensors_mut().into_iter().collect())?;
    Ok((pp, header))
}

// ---------------------------------------------------------------------------
// Segment cache

pub fn encode_segments(len: usize, ids: &[u32]) -> Vec<u8> {
    let count = ids.len().checked_div(len).unwrap_or(0);
    let mut out = format!("SEGS v1 {len} {count}\n").into_bytes();
    for id in &ids[..count * len] {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

/// Returns the segment length and the flat id stream.
pub fn decode_segments(buf: &[u8]) -> Result<(usize, Vec<u32>)> {
    let bad = || Error::format("bad segment cache");
    let nl = buf.iter().position(|&b| b == b'\n').ok_or_else(bad)?;
    let header = std::str::from_utf8(&buf[..nl]).map_err(|_| bad())?;
    let (l, c) = header.strip_prefix("SEGS v1 ").and_then(|h| h.split_once(' ')).ok_or_else(bad)?;
    let (len, count): (usize, usize) = (l.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
    let body = &buf[nl + 1..];
    if len.checked_mul(count).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(bad());
    }
    Ok((len, body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()))
}
