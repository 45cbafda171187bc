//! Per-token representation extraction and forward/backward fusion.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{final_norm, forward_hidden};
use crate::tensor::Matrix;
use crate::tokenizer::{Encoding, VocabHash};
use crate::train::ModelCheckpoint;
use crate::{Direction, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Forward,
    BackwardAligned,
    Fused,
    External,
}

/// `rows x dim` token (or word) representations.
#[derive(Debug, Clone, PartialEq)]
pub struct RepMatrix {
    pub values: Matrix<f32>,
    pub provenance: Provenance,
    /// Vocabulary of the model that produced the rows, when known.
    pub vocab_hash: Option<VocabHash>,
}

impl RepMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.values.row(i)
    }

    /// Wraps representations obtained outside this process (black-box forward LM).
    pub fn external(values: Matrix<f32>, vocab_hash: Option<VocabHash>) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(RepMatrix { values, provenance: Provenance::External, vocab_hash })
    }
}

fn expect_direction(ckpt: &ModelCheckpoint, want: Direction) -> Result<()> {
    if ckpt.direction() != want {
        return Err(Error::DirectionMismatch { expected: want, found: ckpt.direction() });
    }
    Ok(())
}

fn final_states(ckpt: &ModelCheckpoint, ids: &[u32]) -> Result<Matrix<f32>> {
    let hidden = forward_hidden(&ckpt.config, &ckpt.params, ids, false, 0)?;
    let out = final_norm(&ckpt.params, &hidden)?;
    if !out.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(out)
}

/// Final-layer (post layer norm) states of a forward model; row `i` sees `ids[..=i]`.
pub fn extract_forward(ckpt: &ModelCheckpoint, ids: &[u32]) -> Result<RepMatrix> {
    expect_direction(ckpt, Direction::Forward)?;
    Ok(RepMatrix {
        values: final_states(ckpt, ids)?,
        provenance: Provenance::Forward,
        vocab_hash: Some(ckpt.vocab_hash),
    })
}

/// Runs a backward model over `reverse(ids)` and puts row `n-1-i` of its
/// output back at row `i`, so row `i` sees `ids[i..]`.
pub fn extract_backward(ckpt: &ModelCheckpoint, ids: &[u32]) -> Result<RepMatrix> {
    expect_direction(ckpt, Direction::Backward)?;
    let mut rev = ids.to_vec();
    rev.reverse();
    let states = final_states(ckpt, &rev)?;
    Ok(RepMatrix {
        values: reverse_rows(&states),
        provenance: Provenance::BackwardAligned,
        vocab_hash: Some(ckpt.vocab_hash),
    })
}

/// Position in the reversed sequence that holds original token `i`.
pub fn reversed_index(n: usize, i: usize) -> usize {
    n - 1 - i
}

pub fn reverse_rows(m: &Matrix<f32>) -> Matrix<f32> {
    let mut data = Vec::with_capacity(m.data.len());
    for i in (0..m.rows).rev() {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(m.rows, m.cols, data)
}

/// Row-wise `[forward | backward]`.
pub fn concat_reps(f: &RepMatrix, b: &RepMatrix) -> Result<RepMatrix> {
    if !matches!(f.provenance, Provenance::Forward | Provenance::External) {
        return Err(Error::ShapeMismatch("left block must be forward or external representations".into()));
    }
    if b.provenance != Provenance::BackwardAligned {
        return Err(Error::ShapeMismatch("right block must be realigned backward representations".into()));
    }
    if f.rows() != b.rows() {
        return Err(Error::ShapeMismatch(alloc::format!("{} forward rows vs {} backward rows", f.rows(), b.rows())));
    }
    if let (Some(hf), Some(hb)) = (f.vocab_hash, b.vocab_hash) {
        if hf != hb {
            return Err(Error::VocabularyNotShared);
        }
    }
    let (df, db) = (f.dim(), b.dim());
    let mut data = Vec::with_capacity(f.rows() * (df + db));
    for i in 0..f.rows() {
        data.extend_from_slice(f.row(i));
        data.extend_from_slice(b.row(i));
    }
    Ok(RepMatrix {
        values: Matrix::from_vec(f.rows(), df + db, data),
        provenance: Provenance::Fused,
        vocab_hash: b.vocab_hash.or(f.vocab_hash),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Row of the word's first subword.
    #[default]
    First,
    /// Mean over the word's subwords.
    Mean,
}

/// One row per word of `enc`.
pub fn word_pool(reps: &RepMatrix, enc: &Encoding, pooling: Pooling) -> Result<RepMatrix> {
    if reps.rows() != enc.ids.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} rows for {} tokens", reps.rows(), enc.ids.len())));
    }
    let dim = reps.dim();
    let mut data = Vec::with_capacity(enc.n_words() * dim);
    for w in 0..enc.n_words() {
        let (start, end) = enc.word_span(w);
        if start >= reps.rows() || end > reps.rows() || end <= start {
            return Err(Error::OffsetOutOfRange { offset: start, rows: reps.rows() });
        }
        match pooling {
            Pooling::First => data.extend_from_slice(reps.row(start)),
            Pooling::Mean => {
                let mut acc = alloc::vec![0f32; dim];
                for r in start..end {
                    acc.iter_mut().zip(reps.row(r)).for_each(|(a, v)| *a += v);
                }
                let inv = 1.0 / (end - start) as f32;
                data.extend(acc.into_iter().map(|a| a * inv));
            }
        }
    }
    Ok(RepMatrix {
        values: Matrix::from_vec(enc.n_words(), dim, data),
        provenance: reps.provenance,
        vocab_hash: reps.vocab_hash,
    })
}

/// Which representation blocks a probe sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ForwardOnly,
    BackwardOnly,
    Concat,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::ForwardOnly => "forward_only",
            Setting::BackwardOnly => "backward_only",
            Setting::Concat => "concat",
        }
    }
}

impl core::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward_only" | "forward" => Ok(Setting::ForwardOnly),
            "backward_only" | "backward" => Ok(Setting::BackwardOnly),
            "concat" => Ok(Setting::Concat),
            other => Err(Error::InvalidConfig(alloc::format!("unknown setting `{other}`"))),
        }
    }
}

/// Word-level representations of one sentence under `setting`. The forward
/// block comes from `forward` unless `external_forward` token rows are given.
pub fn sentence_reps(
    setting: Setting,
    forward: Option<&ModelCheckpoint>,
    backward: Option<&ModelCheckpoint>,
    external_forward: Option<&RepMatrix>,
    enc: &Encoding,
    pooling: Pooling,
) -> Result<RepMatrix> {
    let missing = |what: &str| Error::InvalidConfig(alloc::format!("setting needs a {what} model"));
    let fwd = |enc: &Encoding| -> Result<RepMatrix> {
        match (external_forward, forward) {
            (Some(ext), _) => Ok(ext.clone()),
            (None, Some(ck)) => extract_forward(ck, &enc.ids),
            (None, None) => Err(missing("forward")),
        }
    };
    let bwd = |enc: &Encoding| -> Result<RepMatrix> { extract_backward(backward.ok_or_else(|| missing("backward"))?, &enc.ids) };
    let tokens = match setting {
        Setting::ForwardOnly => fwd(enc)?,
        Setting::BackwardOnly => bwd(enc)?,
        Setting::Concat => concat_reps(&fwd(enc)?, &bwd(enc)?)?,
    };
    word_pool(&tokens, enc, pooling)
}
