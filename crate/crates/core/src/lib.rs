//! Cohabitation-aware two-pass semi-supervised tree species classification.
//!
//! The crate covers the full desk-scale pipeline: raster and label I/O
//! ([`geodata`]), treetop candidate detection on a canopy height model
//! ([`treetop`]), species cohabitation priors sourced from an LLM or CSV
//! ([`cohabitation`]), distance-decayed pseudo-label fusion
//! ([`pseudolabel`]), a dual-stream fully connected classifier trained
//! from scratch ([`dsnn`]), evaluation metrics ([`metrics`]), synthetic
//! scene generation with known ground truth ([`synth`]), and the two-pass
//! experiment driver ([`pipeline`]).

pub mod cohabitation;
pub mod dsnn;
pub mod error;
pub mod geodata;
pub mod metrics;
pub mod pipeline;
pub mod pseudolabel;
pub mod synth;
pub mod treetop;

pub use error::{Error, Result};
