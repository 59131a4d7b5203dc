//! End-to-end dense-retrieval pipeline for clinical notes.
//!
//! The crate covers the full loop: note cleaning and chunking ([`corpus`]), a small
//! biomedical knowledge graph ([`kg`]), dictionary mention matching ([`matcher`]),
//! two-stage positive-pair generation ([`pairgen`]), a trainable mean-pooling text
//! encoder ([`encoder`]), Multi-Similarity-Loss contrastive training ([`trainer`]),
//! an IR evaluation harness ([`evalkit`]), a synthetic benchmark generator
//! ([`benchmark`]), and file-to-file orchestration ([`pipeline`]).
//!
//! Every random decision flows from explicit `u64` seeds through ChaCha8 streams, so
//! a pipeline run is reproducible byte-for-byte.

pub mod benchmark;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod hashing;
pub mod kg;
pub mod matcher;
pub mod pairgen;
pub mod pipeline;
pub mod trainer;

mod textutil;

pub use error::{Error, Result};
