//! Clinical similarity between longitudinal patient event records.
//!
//! The pipeline runs in stages: ingest or synthesize event records
//! ([`ehr`], [`synth`]), learn a vector per event code with a
//! frequency-adaptive context window ([`embedding`]), turn each record
//! into a temporal matrix ([`represent`]), score patient pairs either
//! unsupervised ([`similarity`]) or with a trained convolutional
//! matcher ([`matcher`]), and evaluate the induced grouping against
//! known cohorts ([`cluster`]).
//!
//! All numeric code is generic over the scalar type through
//! [`num::Scalar`]; [`Real`] is the default instantiation.

pub mod cluster;
pub mod ehr;
pub mod embedding;
pub mod error;
pub mod matcher;
pub mod num;
pub mod represent;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
pub use num::Scalar;

/// Default scalar for the whole pipeline.
pub type Real = f64;
