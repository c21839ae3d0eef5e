//! Toolkit for measuring and mitigating position bias in fine-tuned text
//! generators.
//!
//! The pipeline has four stages:
//!
//! 1. [`bias_split`] grounds responses to document utterances and separates a
//!    corpus into biased and non-biased partitions (relative-position, lead and
//!    lexical bias).
//! 2. [`lowbias_infer`] renders prompts and collects unsupervised responses,
//!    with per-token log-probabilities, from a pluggable generation backend.
//! 3. [`msa_align`] prunes those responses (non-compliant, dull, incoherent and
//!    unreliable identification) and masks the gold class for NLI.
//! 4. [`objective`] combines the task loss and the alignment loss with a
//!    trade-off weight `alpha`.
//!
//! [`toy_model`] provides a small trainable next-token model and a synthetic
//! position-biased corpus generator so the whole loop can be exercised on a
//! laptop, and [`pipeline`] / [`report`] orchestrate runs and write CSV/SVG
//! artifacts.

pub mod bias_split;
pub mod corpus;
pub mod error;
pub mod lowbias_infer;
pub mod metrics;
pub mod msa_align;
pub mod objective;
mod par;
pub mod pipeline;
pub mod report;
pub mod text;
pub mod toy_model;

pub use error::{Error, Result};
