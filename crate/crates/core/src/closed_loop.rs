//! Closed-loop simulation: MPC with the current estimate, bounded uniform
//! disturbance, RLS update, and a rolling excitation monitor.
//!
//! The controller uses `θ̂₀` for `k < M` and the running estimate afterwards.
//! The estimator sees data from `k = 0`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentFile};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::Regressor;
use crate::mpc::{self, HessianCheck, HessianReport};
use crate::refgen::pe_passes;
use crate::rls::RlsState;

/// Identifier of the disturbance generator, recorded with every run.
pub const RNG_ALGORITHM: &str = "rand_chacha::ChaCha8Rng seed_from_u64; w = w_bar*(2r-1), r = Rng::random::<f64>()";

/// Sliding window of regressor Gramians.
#[derive(Debug, Clone)]
pub struct PeMonitor {
    window: usize,
    relative_threshold: f64,
    buffer: VecDeque<DMatrix<f64>>,
    sum: DMatrix<f64>,
    since_refresh: usize,
    step: usize,
    first_full: Option<usize>,
    last_failure: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowReading {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub is_pe: bool,
}

impl PeMonitor {
    pub fn new(window: usize, param_dim: usize, relative_threshold: f64) -> Self {
        Self {
            window: window.max(1),
            relative_threshold,
            buffer: VecDeque::with_capacity(window),
            sum: DMatrix::zeros(param_dim, param_dim),
            since_refresh: 0,
            step: 0,
            first_full: None,
            last_failure: None,
        }
    }

    /// Pushes `φ_k`; returns the window bounds once `M` regressors are buffered.
    pub fn update(&mut self, phi: &Regressor) -> Option<WindowReading> {
        let gram = phi.gram();
        self.sum += &gram;
        self.buffer.push_back(gram);
        if self.buffer.len() > self.window {
            let old = self.buffer.pop_front().expect("non-empty");
            self.sum -= old;
        }
        self.since_refresh += 1;
        if self.since_refresh >= self.window {
            self.sum = self.recomputed_sum();
            self.since_refresh = 0;
        }
        let step = self.step;
        self.step += 1;
        if self.buffer.len() < self.window {
            return None;
        }
        let (lambda_min, lambda_max) = linalg::sym_eig_bounds(&self.sum);
        let is_pe = pe_passes(lambda_min, lambda_max, self.relative_threshold);
        self.first_full.get_or_insert(step);
        if !is_pe {
            self.last_failure = Some(step);
        }
        Some(WindowReading {
            lambda_min,
            lambda_max,
            is_pe,
        })
    }

    pub fn window_sum(&self) -> &DMatrix<f64> {
        &self.sum
    }

    /// Sum of the buffered Gramians, from scratch.
    pub fn recomputed_sum(&self) -> DMatrix<f64> {
        let dim = self.sum.nrows();
        self.buffer
            .iter()
            .fold(DMatrix::zeros(dim, dim), |acc, g| acc + g)
    }

    /// First step after which every window so far has passed.
    pub fn k_pe(&self) -> Option<usize> {
        let first = self.first_full?;
        match self.last_failure {
            None => Some(first),
            Some(f) if f + 1 < self.step => Some(f + 1),
            Some(_) => None,
        }
    }
}

/// One row per closed-loop step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub x_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub tracking_error: f64,
    /// Estimate available at step `k`, before this step's update.
    pub theta_hat: Vec<f64>,
    pub theta_ctrl: Vec<f64>,
    pub theta_error: f64,
    pub lyapunov: f64,
    pub value: f64,
    pub mpc_iterations: usize,
    pub mpc_grad_norm: f64,
    pub hessian_lambda_min: Option<f64>,
    pub innovation_norm: f64,
    pub window_lambda_min: Option<f64>,
    pub info_lambda_min: f64,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub rows: Vec<TraceRow>,
    pub final_theta_hat: Vec<f64>,
    pub final_theta_error: f64,
    pub k_pe: Option<usize>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl SimTrace {
    pub fn csv_header(n: usize, m: usize, s: usize) -> String {
        let mut cols = vec!["k".to_string()];
        let indexed = |name: &'static str, len: usize| (0..len).map(move |i| format!("{name}[{i}]"));
        cols.extend(indexed("x", n));
        cols.extend(indexed("u", m));
        cols.extend(indexed("x_r", n));
        cols.extend(indexed("u_r", m));
        cols.push("tracking_error".into());
        cols.extend(indexed("theta_hat", s));
        cols.extend(indexed("theta_ctrl", s));
        for c in [
            "theta_error",
            "lyapunov",
            "value",
            "mpc_iterations",
            "mpc_grad_norm",
            "hessian_lambda_min",
            "innovation_norm",
            "window_lambda_min",
            "info_lambda_min",
        ] {
            cols.push(c.into());
        }
        cols.extend(indexed("w", n));
        cols.join(",")
    }

    /// Header plus one row per step, floats with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.n, self.m, self.s);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for row in &self.rows {
            let mut cells = vec![row.k.to_string()];
            for v in [&row.x, &row.u, &row.x_r, &row.u_r] {
                cells.extend(v.iter().copied().map(fmt_f64));
            }
            cells.push(fmt_f64(row.tracking_error));
            cells.extend(row.theta_hat.iter().copied().map(fmt_f64));
            cells.extend(row.theta_ctrl.iter().copied().map(fmt_f64));
            cells.push(fmt_f64(row.theta_error));
            cells.push(fmt_f64(row.lyapunov));
            cells.push(fmt_f64(row.value));
            cells.push(row.mpc_iterations.to_string());
            cells.push(fmt_f64(row.mpc_grad_norm));
            cells.push(opt(row.hessian_lambda_min));
            cells.push(fmt_f64(row.innovation_norm));
            cells.push(opt(row.window_lambda_min));
            cells.push(fmt_f64(row.info_lambda_min));
            cells.extend(row.w.iter().copied().map(fmt_f64));
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Mean `|θ̃|` over the last `count` rows (all rows when fewer).
    pub fn mean_theta_error_tail(&self, count: usize) -> f64 {
        mean_tail(self.rows.iter().map(|r| r.theta_error), count)
    }

    pub fn mean_tracking_error_tail(&self, count: usize) -> f64 {
        mean_tail(self.rows.iter().map(|r| r.tracking_error), count)
    }

    /// Smallest window `λ_min` at or after step `from`.
    pub fn worst_window_lambda_min(&self, from: usize) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.k >= from)
            .filter_map(|r| r.window_lambda_min)
            .reduce(f64::min)
    }
}

fn mean_tail(values: impl DoubleEndedIterator<Item = f64> + ExactSizeIterator, count: usize) -> f64 {
    let take = count.min(values.len());
    if take == 0 {
        return f64::NAN;
    }
    values.rev().take(take).sum::<f64>() / take as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_completed: usize,
    pub aborted: Option<String>,
    pub seed: u64,
    pub rng: String,
    pub w_bar: f64,
    /// `|θ̂₀ - θ|`.
    pub c_theta: f64,
    /// `|x₀ - x_r(0)|`.
    pub c_x: f64,
    pub reference_alpha: Option<f64>,
    pub final_theta_error: f64,
    /// Mean `|θ̃|` over the last 100 steps.
    pub steady_state_theta_error: f64,
    /// Mean tracking error over the last `M` steps.
    pub mean_tracking_error_last_window: f64,
    pub mean_tracking_error_last_50: f64,
    pub k_pe: Option<usize>,
    pub worst_window_lambda_min: Option<f64>,
    pub min_hessian_lambda_min: Option<f64>,
}

/// Result of a run: the (possibly partial) trace and the reason for stopping early.
#[derive(Debug)]
pub struct RunOutcome {
    pub trace: SimTrace,
    pub abort: Option<Error>,
}

impl RunOutcome {
    pub fn summary(&self, config: &ExperimentConfig) -> RunSummary {
        let trace = &self.trace;
        let window = config.monitor_window;
        RunSummary {
            steps_completed: trace.rows.len(),
            aborted: self.abort.as_ref().map(|e| e.to_string()),
            seed: config.seed,
            rng: RNG_ALGORITHM.to_string(),
            w_bar: config.model.w_bar(),
            c_theta: (&config.rls.theta_hat_0 - config.model.theta_true()).norm(),
            c_x: (&config.x0 - config.reference.state_at(0)).norm(),
            reference_alpha: config.reference.certificate.as_ref().map(|c| c.alpha),
            final_theta_error: trace.final_theta_error,
            steady_state_theta_error: trace.mean_theta_error_tail(100),
            mean_tracking_error_last_window: trace.mean_tracking_error_tail(window),
            mean_tracking_error_last_50: trace.mean_tracking_error_tail(50),
            k_pe: trace.k_pe,
            worst_window_lambda_min: trace.worst_window_lambda_min(trace.k_pe.unwrap_or(0)),
            min_hessian_lambda_min: trace
                .rows
                .iter()
                .filter_map(|r| r.hessian_lambda_min)
                .reduce(f64::min),
        }
    }

    pub fn into_result(self) -> Result<SimTrace> {
        match self.abort {
            None => Ok(self.trace),
            Some(e) => Err(e),
        }
    }
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Runs the closed loop for `config.steps` steps.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let model = &config.model;
    let (n, m, s) = (model.state_dim(), model.input_dim(), model.param_dim());
    let reference = &config.reference;
    if config.monitor_window != reference.period() {
        return Err(Error::config(format!(
            "monitor window {} must equal the reference period {}",
            config.monitor_window,
            reference.period()
        )));
    }
    if !reference.is_certified() && !config.allow_uncertified {
        return Err(Error::UncertifiedReference);
    }
    config.mpc.validate(n, m)?;
    config.rls.validate(n, s)?;
    if config.x0.len() != n {
        return Err(Error::config("x0 has the wrong dimension"));
    }

    let theta_true = model.theta_true();
    let w_bar = model.w_bar();
    let period = config.monitor_window;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rls = RlsState::new(&config.rls)?;
    let mut monitor = PeMonitor::new(period, s, config.pe_threshold);
    let mut x = config.x0.clone();
    let mut warm = mpc::reference_inputs(reference, 0, config.mpc.horizon);
    let mut rows = Vec::with_capacity(config.steps);
    let mut abort = None;

    for k in 0..config.steps {
        let theta_ctrl = if k < period {
            config.rls.theta_hat_0.clone()
        } else {
            rls.theta_hat.clone()
        };
        let solution = match mpc::solve(model, &theta_ctrl, &x, reference, k, &config.mpc, &warm) {
            Ok(sol) => sol,
            Err(e) => {
                warn!("closed loop aborted at step {k}: {e}");
                abort = Some(e);
                break;
            }
        };
        let check_now = match config.mpc.hessian_check {
            HessianCheck::Strict => true,
            HessianCheck::Fast => k % period == 0,
            HessianCheck::Off => false,
        };
        let hessian: Option<HessianReport> = if check_now {
            let report = mpc::check_hessian_pd(model, &theta_ctrl, &x, &solution, reference, k, &config.mpc)?;
            if !report.pd {
                warn!("step {k}: MPC Hessian is not positive definite (lambda_min = {:e})", report.lambda_min);
            }
            Some(report)
        } else {
            None
        };
        let u = solution.first_input().clone();
        let w = DVector::from_fn(n, |_, _| w_bar * (2.0 * rng.random::<f64>() - 1.0));
        let x_next = model.step(&x, &u, theta_true, &w)?;
        if !x_next.iter().all(|v| v.is_finite()) {
            abort = Some(Error::NonFiniteState { step: k + 1 });
            break;
        }
        let phi = model.regressor(&x, &u)?;
        let f0 = model.f0(&x, &u)?;
        let innovation = rls.predict_error(&phi, &x_next, &f0)?;
        let reading = monitor.update(&phi);

        rows.push(TraceRow {
            k,
            x: to_vec(&x),
            u: to_vec(&u),
            x_r: to_vec(reference.state_at(k)),
            u_r: to_vec(reference.input_at(k)),
            tracking_error: (&x - reference.state_at(k)).norm(),
            theta_hat: to_vec(&rls.theta_hat),
            theta_ctrl: to_vec(&theta_ctrl),
            theta_error: rls.error_norm(theta_true),
            lyapunov: rls.lyapunov(theta_true),
            value: solution.value,
            mpc_iterations: solution.iterations,
            mpc_grad_norm: solution.grad_norm,
            hessian_lambda_min: hessian.map(|h| h.lambda_min),
            innovation_norm: innovation.norm(),
            window_lambda_min: reading.map(|r| r.lambda_min),
            info_lambda_min: rls.info_min_eig(),
            w: to_vec(&w),
        });

        if !config.fixed_theta {
            match rls.update(&phi, &x_next, &f0) {
                Ok(next) => rls = next,
                Err(e @ Error::IllConditionedUpdate { .. }) => warn!("step {k}: skipping sample: {e}"),
                Err(e) => return Err(e),
            }
        }
        warm = mpc::shift_warm_start(&solution.u_star);
        x = x_next;
    }

    let final_theta_error = rls.error_norm(theta_true);
    info!(
        "closed loop finished {} steps, |theta error| = {final_theta_error:e}",
        rows.len()
    );
    Ok(RunOutcome {
        trace: SimTrace {
            n,
            m,
            s,
            rows,
            final_theta_hat: to_vec(&rls.theta_hat),
            final_theta_error,
            k_pe: monitor.k_pe(),
        },
        abort,
    })
}

/// A grid axis of a sweep: a dotted config path and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub grid: Vec<SweepAxis>,
    /// Seeds per grid point; seeds are `base_seed, base_seed + 1, …`.
    #[serde(default = "one")]
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if spec.seeds == 0 {
            return Err(Error::config("seeds must be at least 1"));
        }
        Ok(spec)
    }

    /// Override lists for every grid point and seed, in row-major grid order.
    pub fn expand(&self, default_seed: u64) -> Vec<Vec<(String, serde_json::Value)>> {
        let mut points: Vec<Vec<(String, serde_json::Value)>> = vec![Vec::new()];
        for axis in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((axis.path.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        let base = self.base_seed.unwrap_or(default_seed);
        points
            .into_iter()
            .flat_map(|p| {
                (0..self.seeds as u64).map(move |i| {
                    let mut q = p.clone();
                    q.push(("sim.seed".to_string(), serde_json::json!(base + i)));
                    q
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub overrides: Vec<(String, serde_json::Value)>,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

/// Runs every override list in parallel; rows come back in input order.
///
/// Failures are recorded per row and do not stop the sweep.
pub fn sweep(
    file: &ExperimentFile,
    base_dir: &Path,
    runs: &[Vec<(String, serde_json::Value)>],
) -> Vec<SweepRow> {
    runs.par_iter()
        .enumerate()
        .map(|(index, overrides)| {
            let attempt = || -> Result<RunSummary> {
                let mut f = file.clone();
                for (path, value) in overrides {
                    f = f.with_override(path, value)?;
                }
                let config = f.experiment(base_dir)?;
                let outcome = run(&config)?;
                Ok(outcome.summary(&config))
            };
            match attempt() {
                Ok(summary) => SweepRow {
                    index,
                    overrides: overrides.clone(),
                    error: summary.aborted.clone(),
                    summary: Some(summary),
                },
                Err(e) => SweepRow {
                    index,
                    overrides: overrides.clone(),
                    summary: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Median of the finite values, `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of the finite values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
