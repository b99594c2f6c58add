//! Experiment harness: synthetic corpus, system assembly, training, decoding
//! and the SNR sweep.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod pipeline;
pub mod system;
pub mod text;
pub mod train;
