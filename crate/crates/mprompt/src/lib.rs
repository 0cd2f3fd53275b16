//! Multi-level prompt tuning for generative question answering.
//!
//! A frozen miniature encoder-decoder transformer answers questions while
//! three levels of trainable soft prompts steer it:
//!
//! * **task-specific** prefixes, one per attention class, reparametrized
//!   through small MLPs and prepended to attention keys and values;
//! * **domain-specific** prompt matrices, one per unsupervised context
//!   cluster, kept mutually independent by a CKA penalty;
//! * a **context-specific** prompt made input-dependent by a frozen prompt
//!   generator whose decoder consumes the prompt matrices directly.
//!
//! The crate ships the full pipeline: synthetic corpus generation, backbone
//! pretraining, context clustering, prompt tuning with AdamW and a warmup
//! schedule, beam-search decoding, QA metrics, ablations and sweeps. See the
//! `examples/` directory for one runnable walkthrough per capability and
//! `src/bin/mprompt.rs` for the command-line entry point.

pub mod checkpoint;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod data;
pub mod independence;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::{Error, Result};
