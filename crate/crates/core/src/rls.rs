//! Multi-output recursive least squares with constant forgetting.
//!
//! One update consumes the pair `(φ_k, x̃_{k+1})` with `x̃ = x⁺ - f_0(x, u)`:
//!
//! ```text
//! D  = λT + φᵀPφ
//! θ̂⁺ = θ̂ + PφD⁻¹(x̃ - φᵀθ̂)
//! P⁺ = λ⁻¹(I - PφD⁻¹φᵀ)P
//! ```
//!
//! After `k` updates `θ̂` minimises
//! `λᵏ|θ̂₀ - θ|²_{P₀⁻¹} + Σᵢ λ^{k-i} |x̃ᵢ - φᵢ₋₁ᵀθ|²_{T⁻¹}` and `P⁻¹` is the
//! corresponding information matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::model::Regressor;

#[derive(Debug, Clone, PartialEq)]
pub struct RlsConfig {
    pub lambda: f64,
    pub t: DMatrix<f64>,
    pub p_init: DMatrix<f64>,
    pub theta_hat_0: DVector<f64>,
}

impl RlsConfig {
    /// `P_init = 10·I`, `T = I`.
    pub fn new(lambda: f64, theta_hat_0: DVector<f64>, n: usize) -> Self {
        let s = theta_hat_0.len();
        Self {
            lambda,
            t: DMatrix::identity(n, n),
            p_init: DMatrix::identity(s, s) * 10.0,
            theta_hat_0,
        }
    }

    pub fn validate(&self, n: usize, s: usize) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config(format!(
                "forgetting factor must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        check_dim("theta_hat_0", s, self.theta_hat_0.len())?;
        if self.t.shape() != (n, n) {
            return Err(Error::config(format!("T must be {n}x{n}")));
        }
        if self.p_init.shape() != (s, s) {
            return Err(Error::config(format!("P_init must be {s}x{s}")));
        }
        for (name, m) in [("T", &self.t), ("P_init", &self.p_init)] {
            if !linalg::is_symmetric(m, 1e-12) || !linalg::is_positive_definite(m) {
                return Err(Error::config(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub theta_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub lambda: f64,
    pub t: DMatrix<f64>,
    /// Number of updates consumed.
    pub k: usize,
}

impl RlsState {
    pub fn new(config: &RlsConfig) -> Result<Self> {
        config.validate(config.t.nrows(), config.theta_hat_0.len())?;
        Ok(Self {
            theta_hat: config.theta_hat_0.clone(),
            p: linalg::symmetrize(&config.p_init),
            lambda: config.lambda,
            t: config.t.clone(),
            k: 0,
        })
    }

    fn check(&self, phi: &Regressor, x_next: &DVector<f64>, f0_val: &DVector<f64>) -> Result<()> {
        let (n, s) = phi.values().shape();
        check_dim("regressor parameter count", self.theta_hat.len(), s)?;
        check_dim("regressor state count", self.t.nrows(), n)?;
        check_dim("next state", n, x_next.len())?;
        check_dim("f0 value", n, f0_val.len())
    }

    /// `x̃ - φᵀθ̂` before the update.
    pub fn predict_error(
        &self,
        phi: &Regressor,
        x_next: &DVector<f64>,
        f0_val: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check(phi, x_next, f0_val)?;
        Ok(x_next - f0_val - phi.apply(&self.theta_hat))
    }

    /// One recursion step; `self` is unchanged.
    pub fn update(
        &self,
        phi: &Regressor,
        x_next: &DVector<f64>,
        f0_val: &DVector<f64>,
    ) -> Result<RlsState> {
        let innovation = self.predict_error(phi, x_next, f0_val)?;
        let phi_s = phi.phi();
        let p_phi = &self.p * &phi_s;
        let d = linalg::symmetrize(&(&self.t * self.lambda + phi_s.transpose() * &p_phi));
        let (min, max) = linalg::sym_eig_bounds(&d);
        if !(min > f64::EPSILON * max) {
            return Err(Error::IllConditionedUpdate { min, max });
        }
        let chol = d
            .cholesky()
            .ok_or(Error::IllConditionedUpdate { min, max })?;
        // Gain K = PφD⁻¹, computed as (D⁻¹φᵀP)ᵀ.
        let gain = chol.solve(&p_phi.transpose()).transpose();
        let theta_hat = &self.theta_hat + &gain * innovation;
        let s = self.theta_hat.len();
        let p = (DMatrix::identity(s, s) - &gain * phi_s.transpose()) * &self.p / self.lambda;
        Ok(RlsState {
            theta_hat,
            p: linalg::symmetrize(&p),
            lambda: self.lambda,
            t: self.t.clone(),
            k: self.k + 1,
        })
    }

    /// `P⁻¹`.
    pub fn information(&self) -> DMatrix<f64> {
        let s = self.p.nrows();
        match self.p.clone().cholesky() {
            Some(c) => linalg::symmetrize(&c.solve(&DMatrix::identity(s, s))),
            None => self
                .p
                .clone()
                .try_inverse()
                .unwrap_or_else(|| DMatrix::from_element(s, s, f64::NAN)),
        }
    }

    /// `λ_min(P⁻¹) = 1 / λ_max(P)`.
    pub fn info_min_eig(&self) -> f64 {
        1.0 / linalg::sym_eig_bounds(&self.p).1
    }

    /// `W = θ̃ᵀP⁻¹θ̃` with `θ̃ = θ̂ - θ`.
    pub fn lyapunov(&self, theta: &DVector<f64>) -> f64 {
        let err = &self.theta_hat - theta;
        match self.p.clone().cholesky() {
            Some(c) => err.dot(&c.solve(&err)),
            None => f64::NAN,
        }
    }

    pub fn error_norm(&self, theta: &DVector<f64>) -> f64 {
        (&self.theta_hat - theta).norm()
    }
}
