//! Desk-scale meta-controller pre-training.
//!
//! A meta controller (small MLM encoder) corrupts sentences and proposes
//! `k`-way candidate sets with a "none of the above" reject option; a
//! generator learns to pick the original token. ELECTRA and its
//! sample/complex diagnostic variants, a RoBERTa-style MLM baseline, an exact
//! entropy oracle, probe fine-tuning and a reproducible run harness are
//! included so each piece can be checked in isolation.

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod probe;
pub mod trainer;

pub use error::{Error, Result};
