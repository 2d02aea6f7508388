//! Experiment files: a TOML document with sections `model`, `reference`,
//! `mpc`, `rls`, `sim` and `output`.
//!
//! Matrices are row-major lists of rows. Basis maps are lists of rows, each
//! row a list of `{ coeff, x_powers, u_powers }` monomials. Unknown keys are
//! rejected and every field is validated before any numerics run.

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BasisMap, Monomial, ParametricModel};
use crate::mpc::{HessianCheck, MpcConfig};
use crate::refgen::{
    self, Equilibrium, ExcitationShape, GenerationOptions, InputExcitation, OptimizationOptions,
    ReachabilityReport, ReferenceTrajectory, DEFAULT_PE_RELATIVE_THRESHOLD,
};
use crate::rls::RlsConfig;

pub type Matrix = Vec<Vec<f64>>;
pub type BasisRows = Vec<Vec<Monomial>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub model: ModelSection,
    pub reference: ReferenceSection,
    pub mpc: MpcSection,
    pub rls: RlsSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub state_dim: usize,
    pub input_dim: usize,
    pub theta_true: Vec<f64>,
    #[serde(default)]
    pub w_bar: f64,
    /// Parameter-free part of the dynamics; all zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0: Option<BasisRows>,
    /// One entry per parameter.
    pub basis: Vec<BasisRows>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Excite around a steady tuple and shoot for a periodic orbit.
    Generate,
    /// Penalised search with excitation bounds.
    Optimize,
    /// Read a reference JSON file.
    Load,
    /// Hold the steady tuple; never exciting at a zero-regressor point.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub mode: ReferenceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    /// PE window length; must equal the period when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady_input: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ExcitationShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pe_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub q: Matrix,
    pub r: Matrix,
    pub horizon: usize,
    #[serde(default = "default_gn_tol")]
    pub gn_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub lm_damping: f64,
    #[serde(default)]
    pub hessian_check: HessianCheck,
}

fn default_gn_tol() -> f64 {
    1e-9
}

fn default_max_iter() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlsSection {
    pub lambda: f64,
    pub theta_hat_0: Vec<f64>,
    /// Identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Matrix>,
    /// `10·I` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_init: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Defaults to the first reference state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fixed_theta: bool,
    #[serde(default)]
    pub allow_uncertified: bool,
}

fn default_steps() -> usize {
    300
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            x0: None,
            steps: default_steps(),
            seed: 0,
            fixed_theta: false,
            allow_uncertified: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

/// A reference together with the reports produced while building it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBuild {
    pub mode: ReferenceMode,
    pub trajectory: ReferenceTrajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reachability: Option<ReachabilityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_excitation: Option<InputExcitation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimal_cost: Option<f64>,
}

/// Everything the closed loop needs, fully resolved and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ParametricModel,
    pub reference: ReferenceTrajectory,
    pub mpc: MpcConfig,
    pub rls: RlsConfig,
    pub x0: DVector<f64>,
    pub steps: usize,
    pub seed: u64,
    pub monitor_window: usize,
    pub pe_threshold: f64,
    pub fixed_theta: bool,
    pub allow_uncertified: bool,
}

fn matrix(name: &str, rows: &Matrix, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(format!("{name} must be a {nrows}x{ncols} matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(format!("{name} has non-finite entries")));
    }
    Ok(linalg::from_rows(rows))
}

fn spd(name: &str, rows: &Matrix, dim: usize) -> Result<DMatrix<f64>> {
    let m = matrix(name, rows, dim, dim)?;
    if !linalg::is_symmetric(&m, 1e-12) || !linalg::is_positive_definite(&m) {
        return Err(Error::config(format!("{name} must be symmetric positive definite")));
    }
    Ok(m)
}

fn vector(name: &str, values: &[f64], len: usize) -> Result<DVector<f64>> {
    if values.len() != len {
        return Err(Error::config(format!(
            "{name} must have {len} entries, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(format!("{name} has non-finite entries")));
    }
    Ok(DVector::from_row_slice(values))
}

fn require<'a, T>(value: &'a Option<T>, name: &str, mode: ReferenceMode) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::config(format!("reference.{name} is required for mode {mode:?}")))
}

impl ExperimentFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Schema checks that need no numerics beyond matrix definiteness.
    pub fn validate(&self) -> Result<()> {
        let model = self.build_model()?;
        let (n, m, s) = (model.state_dim(), model.input_dim(), model.param_dim());
        self.build_mpc()?.validate(n, m)?;
        self.build_rls()?.validate(n, s)?;
        let r = &self.reference;
        let period = r.period;
        if let (Some(w), Some(p)) = (r.window, period) {
            if w != p {
                return Err(Error::config(format!(
                    "excitation window {w} must equal the reference period {p}"
                )));
            }
        }
        if let Some(t) = r.pe_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("reference.pe_threshold must be positive"));
            }
        }
        match r.mode {
            ReferenceMode::Generate => {
                let p = *require(&period, "period", r.mode)?;
                if p < n {
                    return Err(Error::config(format!(
                        "reference.period {p} is shorter than the state dimension {n}"
                    )));
                }
                vector("reference.steady_state", require(&r.steady_state, "steady_state", r.mode)?, n)?;
                vector("reference.steady_input", require(&r.steady_input, "steady_input", r.mode)?, m)?;
                let a = *require(&r.amplitude, "amplitude", r.mode)?;
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::config("reference.amplitude must be finite and nonnegative"));
                }
            }
            ReferenceMode::Optimize => {
                let p = *require(&period, "period", r.mode)?;
                if p == 0 {
                    return Err(Error::config("reference.period must be at least 1"));
                }
                let alpha = *require(&r.alpha, "alpha", r.mode)?;
                let beta = *require(&r.beta, "beta", r.mode)?;
                if !(alpha >= 0.0 && beta >= alpha && beta.is_finite()) {
                    return Err(Error::config("need 0 <= reference.alpha <= reference.beta"));
                }
                spd("reference.q", require(&r.q, "q", r.mode)?, n)?;
                spd("reference.r", require(&r.r, "r", r.mode)?, m)?;
            }
            ReferenceMode::Load => {
                require(&r.path, "path", r.mode)?;
            }
            ReferenceMode::Constant => {
                let p = *require(&period, "period", r.mode)?;
                if p == 0 {
                    return Err(Error::config("reference.period must be at least 1"));
                }
                vector("reference.steady_state", require(&r.steady_state, "steady_state", r.mode)?, n)?;
                vector("reference.steady_input", require(&r.steady_input, "steady_input", r.mode)?, m)?;
            }
        }
        if let Some(x0) = &self.sim.x0 {
            vector("sim.x0", x0, n)?;
        }
        if self.sim.steps == 0 {
            return Err(Error::config("sim.steps must be at least 1"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ParametricModel> {
        let md = &self.model;
        let f0 = match &md.f0 {
            Some(rows) => BasisMap::new(rows.clone()),
            None => BasisMap::zero(md.state_dim),
        };
        let mut basis = vec![f0];
        basis.extend(md.basis.iter().cloned().map(BasisMap::new));
        if md.theta_true.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("model.theta_true has non-finite entries"));
        }
        ParametricModel::new(
            md.state_dim,
            md.input_dim,
            basis,
            DVector::from_row_slice(&md.theta_true),
            md.w_bar,
        )
        .map_err(|e| match e {
            Error::Dimension { what, expected, got } => Error::config(format!(
                "{what} must have {expected} entries, got {got}"
            )),
            other => other,
        })
    }

    pub fn build_mpc(&self) -> Result<MpcConfig> {
        let s = &self.mpc;
        let n = self.model.state_dim;
        let m = self.model.input_dim;
        Ok(MpcConfig {
            q: spd("mpc.q", &s.q, n)?,
            r: spd("mpc.r", &s.r, m)?,
            horizon: s.horizon,
            gn_tol: s.gn_tol,
            max_iter: s.max_iter,
            lm_damping: s.lm_damping,
            hessian_check: s.hessian_check,
        })
    }

    pub fn build_rls(&self) -> Result<RlsConfig> {
        let s = &self.rls;
        let n = self.model.state_dim;
        let p = self.model.basis.len();
        let mut cfg = RlsConfig::new(s.lambda, vector("rls.theta_hat_0", &s.theta_hat_0, p)?, n);
        if let Some(t) = &s.t {
            cfg.t = spd("rls.t", t, n)?;
        }
        if let Some(p_init) = &s.p_init {
            cfg.p_init = spd("rls.p_init", p_init, p)?;
        }
        Ok(cfg)
    }

    pub fn pe_threshold(&self) -> f64 {
        self.reference
            .pe_threshold
            .unwrap_or(DEFAULT_PE_RELATIVE_THRESHOLD)
    }

    /// Steady tuple for generate/constant modes: Newton from the configured
    /// guess, falling back to the configured tuple itself when `A - I` is
    /// singular there but the tuple is an exact fixed point.
    pub fn equilibrium(&self, model: &ParametricModel) -> Result<Equilibrium> {
        let r = &self.reference;
        let x_guess = vector("reference.steady_state", require(&r.steady_state, "steady_state", r.mode)?, model.state_dim())?;
        let u_s = vector("reference.steady_input", require(&r.steady_input, "steady_input", r.mode)?, model.input_dim())?;
        let theta = model.theta_true();
        match refgen::find_equilibrium(model, theta, &u_s, &x_guess) {
            Ok(eq) => Ok(eq),
            Err(e @ Error::EigenvalueOneAtEquilibrium { .. }) => {
                warn!("{e}; using the configured steady tuple");
                Equilibrium::verified(model, theta, x_guess, u_s).map_err(|_| e)
            }
            Err(e) => Err(e),
        }
    }

    /// Builds the reference for the configured mode using the true parameter.
    ///
    /// `base_dir` resolves a relative `reference.path`.
    pub fn build_reference(&self, base_dir: &Path) -> Result<ReferenceBuild> {
        let model = self.build_model()?;
        let theta = model.theta_true().clone();
        let r = &self.reference;
        let threshold = self.pe_threshold();
        match r.mode {
            ReferenceMode::Generate => {
                let eq = self.equilibrium(&model)?;
                let options = GenerationOptions {
                    period: r.period.unwrap_or_default(),
                    amplitude: r.amplitude.unwrap_or_default(),
                    shape: r.shape.unwrap_or(ExcitationShape::Sinusoid),
                    relative_threshold: threshold,
                };
                let generated = refgen::generate_pe_reference(&model, &theta, &eq, &options)?;
                Ok(ReferenceBuild {
                    mode: r.mode,
                    trajectory: generated.trajectory,
                    equilibrium_residual: Some(eq.residual),
                    reachability: Some(generated.reachability),
                    input_excitation: Some(generated.input_excitation),
                    optimal_cost: None,
                })
            }
            ReferenceMode::Optimize => {
                let n = model.state_dim();
                let m = model.input_dim();
                let q = spd("reference.q", require(&r.q, "q", r.mode)?, n)?;
                let rr = spd("reference.r", require(&r.r, "r", r.mode)?, m)?;
                let mut options = OptimizationOptions::new(
                    r.period.unwrap_or_default(),
                    r.alpha.unwrap_or_default(),
                    r.beta.unwrap_or_default(),
                );
                options.relative_threshold = threshold;
                let opt = refgen::optimize_pe_reference(&model, &theta, &q, &rr, &options)?;
                Ok(ReferenceBuild {
                    mode: r.mode,
                    trajectory: opt.trajectory,
                    equilibrium_residual: None,
                    reachability: None,
                    input_excitation: None,
                    optimal_cost: Some(opt.cost),
                })
            }
            ReferenceMode::Load => {
                let path = require(&r.path, "path", r.mode)?;
                let path = if path.is_relative() {
                    base_dir.join(path)
                } else {
                    path.clone()
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
                let loaded: ReferenceBuild = match serde_json::from_str(&text) {
                    Ok(build) => build,
                    Err(_) => ReferenceBuild {
                        mode: r.mode,
                        trajectory: serde_json::from_str(&text)
                            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
                        equilibrium_residual: None,
                        reachability: None,
                        input_excitation: None,
                        optimal_cost: None,
                    },
                };
                let traj = loaded.trajectory;
                if let Some(p) = r.period {
                    if p != traj.period() {
                        return Err(Error::config(format!(
                            "loaded reference has period {}, config says {p}",
                            traj.period()
                        )));
                    }
                }
                if traj.state_at(0).len() != model.state_dim() || traj.input_at(0).len() != model.input_dim() {
                    return Err(Error::config("loaded reference has the wrong dimensions"));
                }
                // Recompute residual and certificate rather than trusting the file.
                let fresh = ReferenceTrajectory::new(
                    &model,
                    &theta,
                    traj.states().to_vec(),
                    traj.inputs().to_vec(),
                )?;
                let cert = refgen::certify_pe(&model, &fresh, threshold)?;
                Ok(ReferenceBuild {
                    mode: r.mode,
                    trajectory: fresh.with_certificate(cert),
                    equilibrium_residual: None,
                    reachability: None,
                    input_excitation: None,
                    optimal_cost: None,
                })
            }
            ReferenceMode::Constant => {
                let eq = self.equilibrium(&model)?;
                let traj = ReferenceTrajectory::constant(
                    &model,
                    &theta,
                    &eq.x_s,
                    &eq.u_s,
                    r.period.unwrap_or(1),
                )?;
                let cert = refgen::certify_pe(&model, &traj, threshold)?;
                Ok(ReferenceBuild {
                    mode: r.mode,
                    trajectory: traj.with_certificate(cert),
                    equilibrium_residual: Some(eq.residual),
                    reachability: None,
                    input_excitation: None,
                    optimal_cost: None,
                })
            }
        }
    }

    /// Resolves the closed-loop configuration around an already built reference.
    pub fn experiment_with(&self, reference: ReferenceTrajectory) -> Result<ExperimentConfig> {
        let model = self.build_model()?;
        let x0 = match &self.sim.x0 {
            Some(x0) => vector("sim.x0", x0, model.state_dim())?,
            None => reference.state_at(0).clone(),
        };
        Ok(ExperimentConfig {
            mpc: self.build_mpc()?,
            rls: self.build_rls()?,
            monitor_window: reference.period(),
            pe_threshold: self.pe_threshold(),
            model,
            reference,
            x0,
            steps: self.sim.steps,
            seed: self.sim.seed,
            fixed_theta: self.sim.fixed_theta,
            allow_uncertified: self.sim.allow_uncertified,
        })
    }

    pub fn experiment(&self, base_dir: &Path) -> Result<ExperimentConfig> {
        self.experiment_with(self.build_reference(base_dir)?.trajectory)
    }

    /// Sets a dotted `path` (e.g. `model.w_bar`) to a JSON value and revalidates.
    pub fn with_override(&self, path: &str, value: &serde_json::Value) -> Result<Self> {
        let mut doc = serde_json::to_value(self).map_err(|e| Error::config(e.to_string()))?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = match slot {
                serde_json::Value::Object(map) => map.entry(key.to_string()).or_insert(serde_json::Value::Null),
                serde_json::Value::Array(items) => {
                    let idx: usize = key
                        .parse()
                        .map_err(|_| Error::config(format!("override path {path}: {key} is not an index")))?;
                    items
                        .get_mut(idx)
                        .ok_or_else(|| Error::config(format!("override path {path}: index {idx} out of range")))?
                }
                _ => return Err(Error::config(format!("override path {path} does not name a field"))),
            };
        }
        *slot = value.clone();
        let file: Self = serde_json::from_value(doc)
            .map_err(|e| Error::config(format!("override {path}: {e}")))?;
        file.validate()?;
        Ok(file)
    }
}
