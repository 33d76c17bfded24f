//! Multi-domain graph pre-training with structure tokens and dual-prompt
//! few-shot adaptation.
//!
//! The pipeline has three stages, each with a CLI subcommand:
//!
//! 1. **Pre-train** ([`pretrain`]): a shared message-passing encoder is
//!    trained contrastively over several source graph domains at once. Each
//!    domain contributes dimension-aligned features ([`align`]), a learnable
//!    feature token, and per-layer structure tokens that modulate neighbor
//!    aggregation ([`encoder`]).
//! 2. **Adapt** ([`adapt`]): the frozen checkpoint is specialized to an
//!    unseen target domain for an m-shot task by tuning only prompts — a
//!    holistic per-layer prompt, a specific prompt mixed from the frozen
//!    source structure tokens, and a feature adapter — against a prototype
//!    classification loss.
//! 3. **Benchmark** ([`taskbench`]): episodic evaluation with paired
//!    ablation variants and sensitivity sweeps, emitting deterministic
//!    result tables.
//!
//! Supporting layers: [`graphstore`] (datasets and statistics), [`tensor`]
//! (reverse-mode autodiff on dense 64-bit matrices), [`seeding`]
//! (schedule-independent RNG streams), [`error`].

pub mod adapt;
pub mod align;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod graphstore;
pub mod pretrain;
pub mod seeding;
pub mod taskbench;
pub mod tensor;

pub use error::{Error, Result};
