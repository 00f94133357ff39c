//! A desk-scale machine-unlearning laboratory.
//!
//! Everything runs on a tiny from-scratch decoder-only language model with
//! exact f64 gradients, so the parameter-space geometry of unlearning is
//! directly measurable:
//!
//! - [`numcore`] — dense tensors with tape-based reverse-mode autodiff.
//! - [`lm`] — the model: conditional log-probabilities, per-example
//!   gradients, greedy decoding, and a canonical flat parameter layout so
//!   checkpoints subtract and extrapolate as vectors.
//! - [`corpus`] — deterministic synthetic persons dataset with paired
//!   target/related QA knowledge, tokenizer, and scenario splits.
//! - [`unlearner`] — fine-tuning plus the gradient-ascent family of
//!   unlearning objectives (GA, gradient difference, KL anchoring, NPO).
//! - [`uipe`] — update-vector computation, linear parameter extrapolation,
//!   checkpoint selection, and amplify-coefficient sweeps.
//! - [`probe`] — per-example gradient cosine similarity and the projection
//!   decomposition of the update vector.
//! - [`metrics`] — ROUGE-L scoring, split evaluation, and report files.
//! - [`cli`] — experiment configs, binary checkpoint files, and the
//!   orchestration used by the `unlearn-lab` binary and the examples.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod numcore;
pub mod probe;
pub mod uipe;
pub mod unlearner;

pub use error::{LabError, Result};
