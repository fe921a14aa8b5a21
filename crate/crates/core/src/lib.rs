//! Spoofing-aware speaker verification (SASV) research harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the training precision.

pub mod backend;
pub mod bundle;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub mod harness;

/// Precision used by the command-line pipeline.
pub type Real = f32;
pub type Asv = encoders::AsvEncoder<Real>;
pub type Cm = encoders::CmEncoder<Real>;
pub type SasvBackend = backend::Backend<Real>;
pub type Bundle = bundle::ModelBundle<Real>;
pub type UtteranceCorpus = synth::Corpus<Real>;
pub type Scores = Vec<eval::ScoreRecord<Real>>;
