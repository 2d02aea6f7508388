//! Finite-horizon reference-tracking MPC by single shooting.
//!
//! The cost `J_N = Σ_{i<N} |x_{i|k} - x_r(k+i)|²_Q + |u_{i|k} - u_r(k+i)|²_R`
//! is a sum of squares, so it is minimised with Levenberg-Marquardt on the
//! stacked residual `[U_Q(x_i - x_r); U_R(u_i - u_r)]` where `UᵀU` is the
//! weight. Residual Jacobians come from forward sensitivities
//! `S_{i+1} = A_i S_i + B_i E_i`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::model::ParametricModel;
use crate::refgen::ReferenceTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianCheck {
    /// Every closed-loop step.
    #[default]
    Strict,
    /// Every `M` steps.
    Fast,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub horizon: usize,
    /// Stop when `|∇J_N| <= gn_tol · (1 + J_N)`.
    pub gn_tol: f64,
    pub max_iter: usize,
    /// Initial Levenberg-Marquardt damping; zero makes the first step pure Gauss-Newton.
    pub lm_damping: f64,
    pub hessian_check: HessianCheck,
}

impl MpcConfig {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize) -> Self {
        Self {
            q,
            r,
            horizon,
            gn_tol: 1e-9,
            max_iter: 50,
            lm_damping: 0.0,
            hessian_check: HessianCheck::Strict,
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.q.nrows() != n || self.q.ncols() != n {
            return Err(Error::config(format!("Q must be {n}x{n}")));
        }
        if self.r.nrows() != m || self.r.ncols() != m {
            return Err(Error::config(format!("R must be {m}x{m}")));
        }
        for (name, w) in [("Q", &self.q), ("R", &self.r)] {
            if !linalg::is_symmetric(w, 1e-12) || !linalg::is_positive_definite(w) {
                return Err(Error::config(format!("{name} must be symmetric positive definite")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.gn_tol > 0.0) || self.max_iter == 0 || !(self.lm_damping >= 0.0) {
            return Err(Error::config(
                "need gn_tol > 0, max_iter >= 1 and lm_damping >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub lambda_min: f64,
    pub pd: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub u_star: Vec<DVector<f64>>,
    pub value: f64,
    /// `x_{0|k} .. x_{N|k}`.
    pub predicted_states: Vec<DVector<f64>>,
    /// Accepted steps.
    pub iterations: usize,
    pub grad_norm: f64,
    /// `J_N` before the first step and after every accepted step.
    pub cost_history: Vec<f64>,
    pub hessian: Option<HessianReport>,
}

impl MpcSolution {
    pub fn first_input(&self) -> &DVector<f64> {
        &self.u_star[0]
    }
}

/// Rolls `u_seq` forward from `x_k` under `theta` without disturbance.
pub fn rollout(
    model: &ParametricModel,
    theta: &DVector<f64>,
    x_k: &DVector<f64>,
    u_seq: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut states = Vec::with_capacity(u_seq.len() + 1);
    states.push(x_k.clone());
    for (i, u) in u_seq.iter().enumerate() {
        let next = model.nominal(&states[i], u, theta)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { step: i + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// `J_N` and the predicted states for a candidate input sequence.
pub fn evaluate_cost(
    model: &ParametricModel,
    theta: &DVector<f64>,
    x_k: &DVector<f64>,
    u_seq: &[DVector<f64>],
    reference: &ReferenceTrajectory,
    k: usize,
    config: &MpcConfig,
) -> Result<(f64, Vec<DVector<f64>>)> {
    let states = rollout(model, theta, x_k, u_seq)?;
    let mut cost = 0.0;
    for (i, u) in u_seq.iter().enumerate() {
        let dx = &states[i] - reference.state_at(k + i);
        let du = u - reference.input_at(k + i);
        cost += dx.dot(&(&config.q * &dx)) + du.dot(&(&config.r * &du));
    }
    if !cost.is_finite() {
        return Err(Error::RolloutDiverged { step: u_seq.len() });
    }
    Ok((cost, states))
}

/// Reference inputs `u_r(k), …, u_r(k+N-1)`.
pub fn reference_inputs(reference: &ReferenceTrajectory, k: usize, horizon: usize) -> Vec<DVector<f64>> {
    (0..horizon).map(|i| reference.input_at(k + i).clone()).collect()
}

/// Previous solution shifted by one with the last element duplicated.
pub fn shift_warm_start(previous: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut shifted: Vec<_> = previous.iter().skip(1).cloned().collect();
    if let Some(last) = previous.last() {
        shifted.push(last.clone());
    }
    shifted
}

struct Residual {
    cost: f64,
    r: DVector<f64>,
    jac: DMatrix<f64>,
    states: Vec<DVector<f64>>,
}

struct Problem<'a> {
    model: &'a ParametricModel,
    theta: &'a DVector<f64>,
    x_k: &'a DVector<f64>,
    reference: &'a ReferenceTrajectory,
    k: usize,
    config: &'a MpcConfig,
    u_q: DMatrix<f64>,
    u_r: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn new(
        model: &'a ParametricModel,
        theta: &'a DVector<f64>,
        x_k: &'a DVector<f64>,
        reference: &'a ReferenceTrajectory,
        k: usize,
        config: &'a MpcConfig,
    ) -> Result<Self> {
        let n = model.state_dim();
        let m = model.input_dim();
        config.validate(n, m)?;
        check_dim("current state", n, x_k.len())?;
        check_dim("theta", model.param_dim(), theta.len())?;
        check_dim("reference state", n, reference.state_at(0).len())?;
        check_dim("reference input", m, reference.input_at(0).len())?;
        let u_q = linalg::sqrt_factor(&config.q).ok_or_else(|| Error::config("Q is not PD"))?;
        let u_r = linalg::sqrt_factor(&config.r).ok_or_else(|| Error::config("R is not PD"))?;
        Ok(Self {
            model,
            theta,
            x_k,
            reference,
            k,
            config,
            u_q,
            u_r,
        })
    }

    fn split(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.model.input_dim();
        (0..self.config.horizon)
            .map(|i| z.rows(i * m, m).into_owned())
            .collect()
    }

    fn stack(&self, u_seq: &[DVector<f64>]) -> DVector<f64> {
        let m = self.model.input_dim();
        let mut z = DVector::zeros(m * self.config.horizon);
        for (i, u) in u_seq.iter().enumerate() {
            z.rows_mut(i * m, m).copy_from(u);
        }
        z
    }

    fn cost(&self, z: &DVector<f64>) -> Result<f64> {
        let u_seq = self.split(z);
        evaluate_cost(self.model, self.theta, self.x_k, &u_seq, self.reference, self.k, self.config)
            .map(|(c, _)| c)
    }

    fn residual(&self, z: &DVector<f64>) -> Result<Residual> {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let horizon = self.config.horizon;
        let dim = m * horizon;
        let u_seq = self.split(z);
        let mut r = DVector::zeros((n + m) * horizon);
        let mut jac = DMatrix::zeros((n + m) * horizon, dim);
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(self.x_k.clone());
        let mut sens = DMatrix::<f64>::zeros(n, dim);
        for (i, u) in u_seq.iter().enumerate() {
            let row = i * (n + m);
            let x = &states[i];
            let dx = x - self.reference.state_at(self.k + i);
            let du = u - self.reference.input_at(self.k + i);
            r.rows_mut(row, n).copy_from(&(&self.u_q * dx));
            r.rows_mut(row + n, m).copy_from(&(&self.u_r * du));
            jac.view_mut((row, 0), (n, dim)).copy_from(&(&self.u_q * &sens));
            jac.view_mut((row + n, i * m), (m, m)).copy_from(&self.u_r);

            let (a, b) = self.model.jacobians(x, u, self.theta)?;
            sens = &a * sens;
            let mut block = sens.columns_mut(i * m, m);
            block += b;
            let next = self.model.nominal(x, u, self.theta)?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::RolloutDiverged { step: i + 1 });
            }
            states.push(next);
        }
        let cost = r.norm_squared();
        if !cost.is_finite() {
            return Err(Error::RolloutDiverged { step: horizon });
        }
        Ok(Residual {
            cost,
            r,
            jac,
            states,
        })
    }
}

/// Minimises `J_N` from `warm_start` by Levenberg-Marquardt.
pub fn solve(
    model: &ParametricModel,
    theta: &DVector<f64>,
    x_k: &DVector<f64>,
    reference: &ReferenceTrajectory,
    k: usize,
    config: &MpcConfig,
    warm_start: &[DVector<f64>],
) -> Result<MpcSolution> {
    let problem = Problem::new(model, theta, x_k, reference, k, config)?;
    check_dim("warm start length", config.horizon, warm_start.len())?;
    for u in warm_start {
        check_dim("warm start input", model.input_dim(), u.len())?;
    }
    let dim = model.input_dim() * config.horizon;
    let mut z = problem.stack(warm_start);
    let mut cur = problem.residual(&z)?;
    let mut grad = cur.jac.transpose() * &cur.r * 2.0;
    let mut mu = config.lm_damping;
    let mut iterations = 0;
    let mut cost_history = vec![cur.cost];
    let mut attempts = 0;

    loop {
        let grad_norm = grad.norm();
        if grad_norm <= config.gn_tol * (1.0 + cur.cost) {
            break;
        }
        if iterations >= config.max_iter || attempts >= 10 * config.max_iter {
            if grad_norm <= 1e-6 * (1.0 + cur.cost) {
                debug!("mpc: iteration cap reached at the numerical floor, |grad| = {grad_norm:e}");
                break;
            }
            return Err(Error::ConvergenceFailure {
                iterations,
                grad_norm,
                best: z,
            });
        }
        attempts += 1;
        let jtj = cur.jac.transpose() * &cur.jac;
        let floor = 1e-8 * jtj.diagonal().amax().max(f64::MIN_POSITIVE);
        if mu > 1e12 * jtj.diagonal().amax().max(1.0) {
            // Steps are too small to change J_N in floating point.
            if grad_norm <= 1e-6 * (1.0 + cur.cost) {
                debug!("mpc: accepting numerical floor with |grad| = {grad_norm:e}");
                break;
            }
            return Err(Error::ConvergenceFailure {
                iterations,
                grad_norm,
                best: z,
            });
        }
        let lhs = &jtj + DMatrix::identity(dim, dim) * mu;
        let rhs = -(cur.jac.transpose() * &cur.r);
        let Some(step) = lhs.cholesky().map(|c| c.solve(&rhs)) else {
            mu = (3.0 * mu).max(floor);
            continue;
        };
        let trial_z = &z + step;
        match problem.residual(&trial_z) {
            Ok(trial) if trial.cost <= cur.cost => {
                z = trial_z;
                cur = trial;
                grad = cur.jac.transpose() * &cur.r * 2.0;
                mu /= 3.0;
                iterations += 1;
                cost_history.push(cur.cost);
            }
            _ => mu = (3.0 * mu).max(floor),
        }
    }

    Ok(MpcSolution {
        u_star: problem.split(&z),
        value: cur.cost,
        predicted_states: cur.states,
        iterations,
        grad_norm: grad.norm(),
        cost_history,
        hessian: None,
    })
}

/// `∇J_N` at `u_seq` by forward sensitivities.
pub fn cost_gradient(
    model: &ParametricModel,
    theta: &DVector<f64>,
    x_k: &DVector<f64>,
    u_seq: &[DVector<f64>],
    reference: &ReferenceTrajectory,
    k: usize,
    config: &MpcConfig,
) -> Result<DVector<f64>> {
    let problem = Problem::new(model, theta, x_k, reference, k, config)?;
    let res = problem.residual(&problem.stack(u_seq))?;
    Ok(res.jac.transpose() * res.r * 2.0)
}

/// Central finite-difference Hessian of `J_N` in the stacked input sequence, symmetrised.
pub fn finite_difference_hessian(
    model: &ParametricModel,
    theta: &DVector<f64>,
    x_k: &DVector<f64>,
    u_seq: &[DVector<f64>],
    reference: &ReferenceTrajectory,
    k: usize,
    config: &MpcConfig,
) -> Result<DMatrix<f64>> {
    let problem = Problem::new(model, theta, x_k, reference, k, config)?;
    let z = problem.stack(u_seq);
    let dim = z.len();
    let h = 1e-4;
    let mut hess = DMatrix::zeros(dim, dim);
    let shifted = |i: usize, si: f64, j: usize, sj: f64| -> Result<f64> {
        let mut p = z.clone();
        p[i] += si * h;
        p[j] += sj * h;
        problem.cost(&p)
    };
    for i in 0..dim {
        for j in i..dim {
            let value = (shifted(i, 1.0, j, 1.0)? - shifted(i, 1.0, j, -1.0)?
                - shifted(i, -1.0, j, 1.0)?
                + shifted(i, -1.0, j, -1.0)?)
                / (4.0 * h * h);
            hess[(i, j)] = value;
            hess[(j, i)] = value;
        }
    }
    Ok(linalg::symmetrize(&hess))
}

/// Positive definiteness of the finite-difference Hessian at the solution.
pub fn check_hessian_pd(
    model: &ParametricModel,
    theta: &DVector<f64>,
    x_k: &DVector<f64>,
    solution: &MpcSolution,
    reference: &ReferenceTrajectory,
    k: usize,
    config: &MpcConfig,
) -> Result<HessianReport> {
    let hess = finite_difference_hessian(model, theta, x_k, &solution.u_star, reference, k, config)?;
    let (lambda_min, _) = linalg::sym_eig_bounds(&hess);
    Ok(HessianReport {
        lambda_min,
        pd: lambda_min > 0.0,
    })
}
