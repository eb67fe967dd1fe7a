//! Item response theory toolkit for scale calibration and latent-ability
//! scoring.
//!
//! Pipeline shape: ingest graded annotations into a response matrix
//! ([`response`], [`agreement`]), study its factor structure
//! ([`tetrachoric`], [`factor`]), fit logistic IRT models by marginal
//! maximum likelihood ([`em`]), prune misbehaving items ([`diagnostics`],
//! [`calibrate`]), and score new respondents or systems on the calibrated
//! scale ([`scoring`]). [`simulate`] generates synthetic data from known
//! parameters for recovery and calibration checks.

pub mod agreement;
pub mod calibrate;
pub mod criteria;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod factor;
pub mod model;
pub mod response;
pub mod rng;
pub mod scoring;
pub mod simulate;
pub mod stats;
pub mod tetrachoric;

pub use error::{Error, Result};
pub use model::{icc_probability, ItemParameters, ModelKind, QuadratureGrid};
pub use response::{dichotomize, load_annotations, AnnotationRecord, GoldKey, ResponseMatrix};
