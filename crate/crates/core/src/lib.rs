//! Treatment effect estimation for observational survey data: propensity and
//! outcome models, IPW and AIPW estimators, honest causal trees and causal
//! forests with their heterogeneity diagnostics.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod causal_forest;
pub mod causal_tree;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod linear_models;
pub mod matrix;
pub mod regression_forest;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod tree;

pub use causal_forest::CausalForest;
pub use causal_tree::CausalTree;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use estimators::{EstimateReport, NuisanceEstimates};
pub use matrix::Matrix;
pub use regression_forest::RegressionForest;
pub use scalar::Real;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type EstimateReport64 = EstimateReport<f64>;
pub type EstimateReport32 = EstimateReport<f32>;
pub type NuisanceEstimates64 = NuisanceEstimates<f64>;
pub type NuisanceEstimates32 = NuisanceEstimates<f32>;
pub type RegressionForest64 = RegressionForest<f64>;
pub type RegressionForest32 = RegressionForest<f32>;
pub type CausalTree64 = CausalTree<f64>;
pub type CausalTree32 = CausalTree<f32>;
pub type CausalForest64 = CausalForest<f64>;
pub type CausalForest32 = CausalForest<f32>;
