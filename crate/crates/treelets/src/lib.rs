//! Adaptive multi-scale orthonormal bases for unordered variables.
//!
//! The core construction repeatedly finds the most similar pair of working
//! variables and rotates the pair to decorrelate it, accumulating the local
//! sum on one slot and freezing the local difference on the other. The
//! resulting sequence of pairwise rotations defines, at every height, an
//! orthonormal basis adapted to the correlation structure of the data.
//!
//! Modules:
//!
//! * [`matrix`]: data containers, covariance/correlation, Jacobi rotations;
//! * [`engine`]: the greedy bottom-up fitter and the fitted model;
//! * [`select`]: energy scores and cross-validated height selection;
//! * [`boot`]: bootstrap stability analysis of fitted loadings;
//! * [`models`]: synthetic covariance models and closed-form oracles;
//! * [`supervised`]: regression and classification on derived features;
//! * [`seeding`]: deterministic random streams shared by all of the above.

pub mod boot;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod models;
pub mod seeding;
pub mod select;
pub mod supervised;

pub use boot::{BootstrapConfig, ConfidenceSummary, LoadingBand};
pub use engine::{
    AngleMode, BasisFunction, Coefficients, EngineConfig, FitTrace, Height, RotationRecord,
    TreeletModel,
};
pub use error::{Error, Result};
pub use matrix::{DataMatrix, SimilarityConfig, SymMatrix};
pub use models::{BlockModelSpec, MixtureModelSpec};
pub use select::{BestBasisResult, EnergyReport};
pub use supervised::{GaussianClassifier, LabeledData, PlsModel, Target, TwoWayOutcome};
