use alloc::string::String;

use crate::Direction;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab too small: {0} < 257")]
    VocabTooSmall(usize),
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("no input")]
    NoInput,
    #[error("double reversal")]
    DoubleReversal,
    #[error("line {line}: {msg}")]
    Conll { line: usize, msg: String },
    #[error("sequence too long: {len} > {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("divergence: non-finite loss at step {step}")]
    Divergence { step: u64 },
    #[error("direction mismatch: expected {expected}, found {found}")]
    DirectionMismatch { expected: Direction, found: Direction },
    #[error("vocabulary not shared")]
    VocabularyNotShared,
    #[error("non-finite representation")]
    NonFinite,
    #[error("offset {offset} out of range for {rows} rows")]
    OffsetOutOfRange { offset: usize, rows: usize },
    #[error("label `{0}` not in label set")]
    UnknownLabel(String),
    #[error("label sets differ")]
    LabelSetMismatch,
    #[error("not enough eligible sentences for {label}: need {needed}, found {found}")]
    InsufficientShots { label: String, needed: usize, found: usize },
    #[error("need at least 3 trials, got {0}")]
    TooFewTrials(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
