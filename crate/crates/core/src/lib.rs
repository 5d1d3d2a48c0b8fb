//! Multiscale solver and verification toolkit for kinetic cell-migration
//! models in fibrous tissue.
//!
//! The crate simulates a kinetic transport equation on position x velocity
//! phase space (velocity in the unit ball, relaxation towards the local
//! fiber-orientation distribution, flux-limited taxis forcing), integrates
//! its parabolic and hyperbolic macroscopic limit equations including
//! first-order corrections, and verifies the upscaling numerically: closure
//! identities, moment formulas, mass/positivity guarantees, weak-formulation
//! residuals, and epsilon-sweep convergence studies.

// Index loops over the leading `n` components of fixed-size buffers read
// more clearly than iterator chains here; negated comparisons are
// NaN-rejecting guards.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closure;
pub mod environment;
pub mod error;
pub mod fiber;
pub mod fields;
pub mod grid;
pub mod harness;
pub mod kinetic;
pub mod linalg;
pub mod macroscale;
pub mod meso;
pub mod quad;
pub mod weak;

pub use environment::{Environment, ScalingParams, SignalField, TensorField};
pub use error::{Error, Result};
pub use fiber::{FiberDistribution, FiberKind, FiberMoments};
pub use grid::{DirectionGrid, PhaseGrid, RadialGrid, XGrid};
pub use harness::config::ExperimentConfig;
pub use kinetic::{InitProfile, KineticSolver, KineticState};
pub use macroscale::{MacroKind, MacroModel, MacroState, MacroTrajectory};
