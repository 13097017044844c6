//! Toolkit for porting persona-grounded dialogue models across languages.
//!
//! Three portability strategies are supported end to end:
//!
//! * **test-on-source**: a source-language model wrapped with inbound and
//!   outbound machine translation at inference time;
//! * **train-on-target**: a model fine-tuned on an automatically translated
//!   corpus;
//! * **cross-lingual adapters**: per-language adapters plus a shared task
//!   adapter trained on the source language, then re-tuned on a few
//!   target-language dialogues after switching language adapters.
//!
//! The crate also carries the automatic metrics (perplexity, Hits@k, BLEU)
//! and the Fleiss-κ agreement computation used for human evaluation.

pub mod adapters;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod model;
pub mod strategy;
pub mod training;
