//! Drift estimation for homogenized Langevin dynamics from discrete
//! observations of a two-scale diffusion.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod estimate;
pub mod filterbank;
pub mod harness;
pub mod homogenize;
pub mod io;
pub mod potentials;
pub mod simulate;
pub mod spectral;

pub use potentials::{FastKind, FastPotential, ModelError, MultiscaleModel, Polynomial, SlowKind, SlowPotential};
pub use estimate::{BetaFamily, EstimatorResult, ScoreContext, ScoreSettings, SolverOptions};
pub use harness::{ExperimentConfig, ExperimentResult, RunOptions};
pub use homogenize::{HomogenizationResult, HomogenizedModel};
pub use simulate::{ObservationSet, ParticleModel, SimSpec, Trajectory};
pub use spectral::{EigenBasis, Mesh, SpectralBasis};
