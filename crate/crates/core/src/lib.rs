//! Adaptive tracking MPC driven by persistently exciting periodic references.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod config;
pub mod error;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod refgen;
pub mod rls;

pub use error::{Error, GenerationStage, Result};
pub use model::{BasisMap, Linearization, Monomial, ParametricModel, Regressor};
pub use closed_loop::{run, sweep, PeMonitor, RunOutcome, RunSummary, SimTrace, SweepSpec, TraceRow};
pub use config::{ExperimentConfig, ExperimentFile, ReferenceBuild, ReferenceMode};
pub use mpc::{HessianCheck, MpcConfig, MpcSolution};
pub use refgen::{PeCertificate, ReachabilityReport, ReferenceTrajectory};
pub use rls::{RlsConfig, RlsState};
