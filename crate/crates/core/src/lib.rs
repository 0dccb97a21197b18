//! Satellite-image county mortality modelling: tile geometry and fetching,
//! cohort construction, covariate regression, a convolutional rate model,
//! embedding clustering, attribution and a synthetic test corpus.

pub mod cohort;
pub mod covariates;
pub mod embeddings;
pub mod error;
pub mod fetch;
pub mod geo;
pub mod image;
pub mod interpret;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
