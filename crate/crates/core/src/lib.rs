//! Task-driven dictionary learning with structured sparsity priors for
//! hyperspectral pixel classification.
//!
//! Pixels are sparse-coded over a learned dictionary under one of three
//! priors (ℓ1, joint row sparsity over a spatial window, or ℓ1 with a graph
//! Laplacian coupling), and a linear classifier reads the center pixel's
//! code. The dictionary is trained against the classification loss by
//! differentiating each solver's optimality conditions.

pub mod classification;
pub mod error;
pub mod fixed_point;
pub mod gradcheck;
pub mod hsi_io;
pub mod learning;
pub mod linalg;
pub mod sparse_recovery;

pub use classification::{
    classify_map, evaluate, ClassMap, ConfusionMatrix, Evaluation, LaplacianSpec, MapOptions, Metrics, WindowSpec,
};
pub use error::{Error, Result};
pub use hsi_io::{GroundTruth, HsiCube, SceneSpec, SyntheticScene};
pub use learning::{Classifier, Model, OdlConfig, TrainConfig, TrainOutcome, TrainRecord, TrainingSample};
pub use sparse_recovery::{Dictionary, Patch, Prior, PriorKind, Solution, SolverConfig, SparseCode};
