//! Engine for optimizing persona-profile prompts so that a black-box chat
//! LLM expresses a chosen Big-Five trait as strongly and consistently as
//! possible.
//!
//! The crate is organized around the lifecycle of an optimization run:
//!
//! - [`domain`] — shared vocabulary: traits, prompts, question and Likert
//!   items, scores, run configuration.
//! - [`backend`] — a uniform chat-completion interface over live HTTP
//!   endpoints and a deterministic scripted mock, with caching and retry.
//! - [`dataset`] — item-bank ingestion, paraphrase-twin augmentation, and
//!   seeded train/test splits.
//! - [`scoring`] — administers items to a target model under a candidate
//!   prompt and computes personality, consistency, and paraphrase-sensitive
//!   scores, plus Likert questionnaire statistics.
//! - [`optimizer`] — the trajectory-search loop: meta-prompt construction,
//!   candidate sampling, mini-batch scoring, and best-prompt selection.
//! - [`evaluation`] — condition-based evaluation (baselines, optimized
//!   profiles, naive probes) and cross-model transfer matrices.
//! - [`trajectory`] — training curves, checkpoint export, and degree
//!   control over a completed run.
//!
//! Everything random flows from a single root seed through [`seeds`], so
//! runs against the mock backend are bit-reproducible.

pub mod backend;
pub mod dataset;
pub mod domain;
pub mod evaluation;
pub mod jsonl;
pub mod optimizer;
pub mod scoring;
pub mod seeds;
pub mod trajectory;
