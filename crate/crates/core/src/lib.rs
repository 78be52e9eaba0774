//! Image distances from optimal transport: a finite-difference Newton solver
//! for the Monge-Ampère equation, an exact network-simplex baseline, classical
//! image metrics and the k-NN experiment built on top of them.
//!
//! Numerical types are generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix `f64`, which everything in the test suite uses.

pub mod dataset;
pub mod error;
pub mod fdiff;
pub mod grid;
pub mod interp;
pub mod kantorovich;
pub mod knn;
pub mod linsolve;
pub mod ma_solver;
pub mod method;
pub mod metrics;
pub mod scalar;
pub mod transport;

pub use dataset::{build_partitions, load_idx, ExperimentSpec, LabeledImage, Partitions};
pub use error::{Error, IdxError, Result};
pub use grid::{density_from_image, DensityField, GridSpec, RawImage};
pub use interp::{fit_spline, SplineSurface};
pub use kantorovich::{image_distance, solve_lp, GroundCost, MassConvention, TransportPlan};
pub use knn::{
    classify, complexity_benchmark, run_experiment, run_experiment_with, BenchConfig, BenchResult,
    DistanceFunction, ExperimentResult,
};
pub use linsolve::{SolverKind, SolverOptions};
pub use ma_solver::{newton_solve, NewtonConfig, PotentialField, SolveDiagnostics};
pub use method::DistanceMethod;
pub use metrics::{euclidean, pearson_dissimilarity, tangent_distance, TangentConfig};
pub use scalar::Real;
pub use transport::{pde_distance, pde_distance_with, transport_map, CostKind, DistanceResult, PdeDistanceConfig};

pub type RawImage64 = RawImage<f64>;
pub type DensityField64 = DensityField<f64>;
pub type PotentialField64 = PotentialField<f64>;
pub type LabeledImage64 = LabeledImage<f64>;
pub type TransportPlan64 = TransportPlan<f64>;
