//! Visual-language caption decoder.
//!
//! Fused causal features become a fixed number of prefix tokens; an
//! autoregressive transformer decodes the caption behind them under a causal
//! mask. A learned relationship matrix between text queries and prefix
//! positions carries an L1 sparsity penalty so that explanations concentrate
//! on few feature positions. The training objective combines a signal
//! regression term, smoothed cross-entropy with a KL regularizer, and that
//! sparsity term.

mod model;
mod vocab;

use thiserror::Error;

use crate::numerics::TensorError;

pub use model::{DecodeMode, LossReport, LossWeights, Vlt, VltConfig};
pub use vocab::{detokenize, tokenize, TokenSeq, Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum VltError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyVocab,
    #[error("vocabulary file is corrupt at line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
    #[error("text of {words} tokens does not fit a context of {max}")]
    TextTooLong { words: usize, max: usize },
    #[error("invalid decoder configuration: {0}")]
    BadConfig(String),
    #[error("prefix features {got:?} do not match {channels} channels x {positions} positions")]
    BadPrefix { got: Vec<usize>, channels: usize, positions: usize },
    #[error("decoder batch is empty")]
    EmptyBatch,
    #[error("sequences in a batch must share one length")]
    RaggedBatch,
    #[error("logits {got:?} do not match batch {batch} x {steps} prediction steps")]
    LogitShape { got: Vec<usize>, batch: usize, steps: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("signal prediction {pred:?} does not match ground truth {truth:?}")]
    SignalShape { pred: Vec<usize>, truth: Vec<usize> },
    #[error("beam width must be at least 1")]
    BadBeamWidth,
}
