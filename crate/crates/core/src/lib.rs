//! Query-conditioned video summarization: ingestion, labels, interventions,
//! query encoders, visual-textual fusion, the conditional model, feature
//! extraction, training and evaluation.

pub mod cli;
pub mod container;
pub mod error;
pub mod conditional;
pub mod dataset;
pub mod eval;
pub mod extract;
pub mod fusion;
pub mod ingest;
pub mod intervene;
pub mod labels;
pub mod model;
pub mod nn;
pub mod qencode;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
