//! Bidirectional token representations from a pair of causal language models.
//!
//! A forward causal LM sees only the prefix of a sentence; a small backward
//! LM trained on token-reversed segments sees only the suffix. Concatenating
//! the two per-token states, after realigning the backward states to the
//! original order, gives every token access to both sides of its context.
//! This crate holds the algorithmic pieces: a byte-level BPE tokenizer, a
//! decoder-only transformer with hand-written backpropagation, AdamW,
//! representation fusion, the two-layer classification probe, span-level
//! evaluation and the K-shot protocol.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, IO and the command line live in the `bidirep` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod fusion;
pub mod model;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

/// Which way a causal model reads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

impl core::fmt::Display for Direction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::InvalidConfig(alloc::format!("unknown direction `{other}`"))),
        }
    }
}
