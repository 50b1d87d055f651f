//! SE(3) pose-graph optimization: cost models, a sparse nonlinear
//! least-squares solver, initializers and hierarchical partitioned
//! initialization.

pub mod costs;
pub mod error;
pub mod g2o;
pub mod generator;
pub mod graph;
pub mod harness;
pub mod hipe;
pub mod init;
pub mod metrics;
pub mod se3;
pub mod solver;
pub mod sparse;

pub use costs::{CostKind, CostModel, EdgeResidual, RobustKernel};
pub use error::{Error, Result};
pub use generator::{generate_sphere, GeneratorSpec};
pub use graph::{Edge, Information, PoseGraph, PoseVariable, VariableId};
pub use hipe::{hipe_init, HipeParams, HipeReport, LocalInit};
pub use init::{initialize, InitKind};
pub use metrics::{absolute_trajectory_error, normalized_chi2, Ate};
pub use se3::Pose;
pub use solver::{optimize, optimize_free, OptimizeReport, SolverConfig};
