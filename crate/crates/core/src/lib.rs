//! Desk-scale sequence transduction toolkit.
//!
//! A small but complete RNN-T stack: exact log-domain trellis losses
//! (marginal and fixed-alignment) with analytic gradients, a trainable
//! micro-transducer with streaming and non-streaming encoders, time-
//! synchronous greedy/beam decoding, a rich-transcript grammar with
//! speaker/punctuation/capitalization tokens, a word-confidence pipeline,
//! entity span tagging over the same trellis, and the full evaluation
//! metric suite (WER, WDER, SER, NCE/ECE/AUCs, slot F1).
//!
//! Everything runs in f64 on the CPU and is deterministic given a seed.

pub mod confidence;
pub mod decoder;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tagger;
pub mod textio;
pub mod trellis;

pub use trellis::{AlignmentPath, LogitLattice, LossResult, Move};
