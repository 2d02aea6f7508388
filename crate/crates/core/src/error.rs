use std::fmt;

use nalgebra::DVector;

use crate::refgen::{PeCertificate, ReachabilityReport};

/// Stages of the constructive reference generation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStage {
    OutputReachability,
    InputExcitation,
    Shooting,
    Certification,
}

impl fmt::Display for GenerationStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GenerationStage::OutputReachability => "output-reachability",
            GenerationStage::InputExcitation => "input-excitation",
            GenerationStage::Shooting => "shooting",
            GenerationStage::Certification => "certification",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("state Jacobian has an eigenvalue at one (smallest singular value of A - I is {sigma_min:e})")]
    EigenvalueOneAtEquilibrium { sigma_min: f64 },

    #[error("no equilibrium found after {iterations} Newton iterations (residual {residual:e})")]
    NoEquilibriumFound { iterations: usize, residual: f64 },

    #[error("periodicity Jacobian I - dPhi/dx0 is singular (smallest singular value {sigma_min:e})")]
    PeriodicityJacobianSingular { sigma_min: f64 },

    #[error("periodic shooting diverged after {} iterations (last residual {:e})", history.len(), history.last().copied().unwrap_or(f64::NAN))]
    ShootingDiverged { history: Vec<f64> },

    #[error("excitation window must be positive, got {0}")]
    WindowTooShort(i64),

    #[error("no state row is output reachable")]
    NotOutputReachable { report: ReachabilityReport },

    #[error("trajectory is not persistently exciting (alpha = {:e}, threshold = {:e})", certificate.alpha, certificate.threshold)]
    CertificationFailed { certificate: PeCertificate },

    #[error("reference generation failed at the {stage} stage: {source}")]
    Generation {
        stage: GenerationStage,
        #[source]
        source: Box<Error>,
    },

    #[error("penalty iterations stalled with constraint violation {violation:e}")]
    PenaltyStalled { violation: f64 },

    #[error("rollout produced a non-finite state at prediction step {step}")]
    RolloutDiverged { step: usize },

    #[error("MPC solver did not converge in {iterations} iterations (gradient norm {grad_norm:e})")]
    ConvergenceFailure {
        iterations: usize,
        grad_norm: f64,
        best: DVector<f64>,
    },

    #[error("RLS innovation matrix D is ill conditioned (eigenvalues {min:e} .. {max:e})")]
    IllConditionedUpdate { min: f64, max: f64 },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("reference trajectory is not certified persistently exciting")]
    UncertifiedReference,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stage named by a generation failure, if any.
    pub fn stage(&self) -> Option<GenerationStage> {
        match self {
            Error::Generation { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dimension { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
