//! Estimating per-neighbourhood population statistics (visit counts, average
//! visit duration, average travel distance) from location samples whose
//! coverage differs between neighbourhoods.
//!
//! The crate provides oblivious and inverse-probability-weighted estimators,
//! a feature-based neural estimator trained on their output, a synthetic
//! laboratory with planted sampling bias, and the evaluation harness.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar for common uses.

pub mod acceptance;
pub mod dataset;
pub mod estimators;
pub mod eval;
pub mod features;
pub mod geo;
pub mod ingest;
pub mod learner;
pub mod num;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use dataset::{Attribute, Dataset, StayPoint, UserSequence};
pub use geo::{CellId, CityGrid, GeoPoint, LocalPoint};
pub use num::Real;

pub type EstimateTable64 = estimators::EstimateTable<f64>;
pub type EstimateTable32 = estimators::EstimateTable<f32>;
pub type TruthTable64 = estimators::TruthTable<f64>;
pub type FeatureMatrix64 = features::FeatureMatrix<f64>;
pub type Mlp64 = learner::Mlp<f64>;
pub type Mlp32 = learner::Mlp<f32>;
