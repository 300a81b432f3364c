//! Document recapture detection toolkit.
//!
//! Pipeline: a self-supervised disentangler splits a document patch into a
//! genuine-looking reconstruction plus an additive forensic trace (coarse
//! blur-content C and full-resolution texture T); a synthesis network
//! retargets recaptured traces onto new content to make pseudo-recaptured
//! training data; a frozen-backbone transformer classifier consumes RGB and
//! the trace maps as extra modalities through small residual adapters.
//! Evaluation scores patches, aggregates per image (mean score + majority
//! vote), and reports AUC/EER.

pub mod checkpoint;
pub mod cli;
pub mod classifier;
pub mod config;
pub mod data;
pub mod disentangler;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod objectives;
pub mod synthesizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
