//! A self-contained laboratory for parameter-efficient fine-tuning of
//! encoder-decoder transformers at desk scale.
//!
//! The crate provides a dense-tensor autodiff engine, a compact
//! encoder-decoder transformer with a named parameter registry, injectable
//! fine-tuning methods (adapter bottlenecks, low-rank updates on attention
//! or feed-forward weights, and their combination), an Adam trainer with
//! early stopping, synthetic sequence tasks with BLEU / exact-match / F1
//! metrics, and an experiment harness that sweeps method × rank × seed
//! grids into CSV results.
//!
//! With the default `parallel` feature, batch gradients, split evaluation,
//! finite-difference checks and sweep cells run data-parallel via rayon;
//! without it every path falls back to an equivalent sequential
//! implementation producing identical results.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod peft;
pub mod plot;
pub mod rng;
pub mod sweep;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ParamRegistry, BOS_ID, EOS_ID, PAD_ID, SEP_ID, VOCAB_START};
pub use peft::{MethodName, PeftMethod};
pub use tasks::{MetricKind, Split, TaskKind, TaskSpec};
pub use tensor::{Scalar, Tensor};

/// Token identifier used across tasks, models and metrics.
pub type TokenId = u32;
