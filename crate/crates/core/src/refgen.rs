//! Construction and certification of persistently exciting periodic references.
//!
//! The constructive route picks a steady tuple `(x_s, u_s)` and perturbs the
//! input with a period-`M` excitation sequence. It then solves the
//! periodicity condition `x(M) = x(0)` for the initial state by Newton
//! shooting. The result is certified by evaluating the nonlinear regressor
//! along the orbit. When the linearisation at the steady tuple is not output
//! reachable, [`optimize_pe_reference`] searches for a periodic orbit
//! directly, with the excitation bounds imposed as penalties.

use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, GenerationStage, Result};
use crate::linalg;
use crate::model::{Linearization, ParametricModel};

/// Residual tolerance for a steady tuple.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;
/// Feasibility tolerance for a shooting solution.
pub const SHOOTING_TOL: f64 = 1e-9;
/// Default scale-aware PE threshold: pass iff `alpha >= 1e-8 · max(1, beta)`.
pub const DEFAULT_PE_RELATIVE_THRESHOLD: f64 = 1e-8;

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    /// `|f(x_s, u_s) - x_s|`.
    pub residual: f64,
}

impl Equilibrium {
    /// Accepts a user-supplied steady tuple after checking its residual,
    /// without requiring `A - I` to be invertible.
    pub fn verified(
        model: &ParametricModel,
        theta: &DVector<f64>,
        x_s: DVector<f64>,
        u_s: DVector<f64>,
    ) -> Result<Self> {
        let residual = (model.nominal(&x_s, &u_s, theta)? - &x_s).norm();
        if residual > EQUILIBRIUM_TOL {
            return Err(Error::NoEquilibriumFound {
                iterations: 0,
                residual,
            });
        }
        Ok(Self { x_s, u_s, residual })
    }
}

/// Damped Newton on `f(x, u_s) - x = 0` starting from `x_guess`.
pub fn find_equilibrium(
    model: &ParametricModel,
    theta: &DVector<f64>,
    u_s: &DVector<f64>,
    x_guess: &DVector<f64>,
) -> Result<Equilibrium> {
    let n = model.state_dim();
    check_dim("state guess", n, x_guess.len())?;
    let residual_at = |x: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(model.nominal(x, u_s, theta)? - x)
    };
    let mut x = x_guess.clone();
    let mut g = residual_at(&x)?;
    for iteration in 0..NEWTON_MAX_ITER {
        let (a, _) = model.jacobians(&x, u_s, theta)?;
        let jac = a - DMatrix::identity(n, n);
        let sigma_min = linalg::min_singular_value(&jac);
        if sigma_min <= 1e-10 * jac.amax().max(1.0) {
            return Err(Error::EigenvalueOneAtEquilibrium { sigma_min });
        }
        if g.norm() <= EQUILIBRIUM_TOL * 1e-2 {
            break;
        }
        let step = jac
            .lu()
            .solve(&(-&g))
            .ok_or(Error::EigenvalueOneAtEquilibrium { sigma_min })?;
        let (next_x, next_g) = damped_update(&x, &step, g.norm(), &residual_at)?;
        if next_g.norm() >= g.norm() && g.norm() <= EQUILIBRIUM_TOL {
            break;
        }
        debug!("equilibrium newton {iteration}: |g| = {:e}", next_g.norm());
        x = next_x;
        g = next_g;
    }
    let residual = g.norm();
    if residual.is_finite() && residual <= EQUILIBRIUM_TOL {
        Ok(Equilibrium {
            x_s: x,
            u_s: u_s.clone(),
            residual,
        })
    } else {
        Err(Error::NoEquilibriumFound {
            iterations: NEWTON_MAX_ITER,
            residual,
        })
    }
}

/// Halves the Newton step until the residual norm decreases.
///
/// Returns the last trial when no halving helps; callers decide whether the
/// residual is already at its floor.
fn damped_update(
    x: &DVector<f64>,
    step: &DVector<f64>,
    current: f64,
    residual_at: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut scale = 1.0;
    let mut trial = x + step;
    let mut g = residual_at(&trial)?;
    for _ in 0..NEWTON_MAX_HALVINGS {
        if g.iter().all(|v| v.is_finite()) && g.norm() < current {
            return Ok((trial, g));
        }
        scale *= 0.5;
        trial = x + step * scale;
        g = residual_at(&trial)?;
    }
    Ok((trial, g))
}

/// A period-`M` state/input pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ReferenceRecord", try_from = "ReferenceRecord")]
pub struct ReferenceTrajectory {
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    /// `max_k |f(x_r(k), u_r(k)) - x_r(k+1 mod M)|`.
    pub feasibility_residual: f64,
    pub certificate: Option<PeCertificate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceRecord {
    period: usize,
    x_r: Vec<Vec<f64>>,
    u_r: Vec<Vec<f64>>,
    feasibility_residual: f64,
    #[serde(default)]
    certificate: Option<PeCertificate>,
}

impl From<ReferenceTrajectory> for ReferenceRecord {
    fn from(t: ReferenceTrajectory) -> Self {
        Self {
            period: t.period(),
            x_r: t.states.iter().map(|v| v.iter().copied().collect()).collect(),
            u_r: t.inputs.iter().map(|v| v.iter().copied().collect()).collect(),
            feasibility_residual: t.feasibility_residual,
            certificate: t.certificate,
        }
    }
}

impl TryFrom<ReferenceRecord> for ReferenceTrajectory {
    type Error = String;

    fn try_from(r: ReferenceRecord) -> std::result::Result<Self, String> {
        if r.period == 0 || r.x_r.len() != r.period || r.u_r.len() != r.period {
            return Err(format!(
                "reference has period {} but {} states and {} inputs",
                r.period,
                r.x_r.len(),
                r.u_r.len()
            ));
        }
        Ok(Self {
            states: r.x_r.into_iter().map(DVector::from_vec).collect(),
            inputs: r.u_r.into_iter().map(DVector::from_vec).collect(),
            feasibility_residual: r.feasibility_residual,
            certificate: r.certificate,
        })
    }
}

impl ReferenceTrajectory {
    /// Builds a trajectory from explicit samples, computing the feasibility residual.
    pub fn new(
        model: &ParametricModel,
        theta: &DVector<f64>,
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if states.is_empty() || states.len() != inputs.len() {
            return Err(Error::config(format!(
                "reference needs matching non-empty state and input sequences ({} vs {})",
                states.len(),
                inputs.len()
            )));
        }
        let feasibility_residual = feasibility_residual(model, theta, &states, &inputs)?;
        Ok(Self {
            states,
            inputs,
            feasibility_residual,
            certificate: None,
        })
    }

    /// The constant reference `(x_s, u_s)` repeated `period` times.
    pub fn constant(
        model: &ParametricModel,
        theta: &DVector<f64>,
        x_s: &DVector<f64>,
        u_s: &DVector<f64>,
        period: usize,
    ) -> Result<Self> {
        Self::new(
            model,
            theta,
            vec![x_s.clone(); period.max(1)],
            vec![u_s.clone(); period.max(1)],
        )
    }

    pub fn period(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    /// `x_r(k)` with periodic extension.
    pub fn state_at(&self, k: usize) -> &DVector<f64> {
        &self.states[k % self.period()]
    }

    /// `u_r(k)` with periodic extension.
    pub fn input_at(&self, k: usize) -> &DVector<f64> {
        &self.inputs[k % self.period()]
    }

    pub fn with_certificate(mut self, certificate: PeCertificate) -> Self {
        self.certificate = Some(certificate);
        self
    }

    /// Same orbit started at index `shift`.
    pub fn rotated(&self, shift: usize) -> Self {
        let m = self.period();
        Self {
            states: (0..m).map(|k| self.state_at(k + shift).clone()).collect(),
            inputs: (0..m).map(|k| self.input_at(k + shift).clone()).collect(),
            feasibility_residual: self.feasibility_residual,
            certificate: None,
        }
    }

    pub fn is_certified(&self) -> bool {
        self.certificate.as_ref().is_some_and(|c| c.pass)
    }
}

pub fn feasibility_residual(
    model: &ParametricModel,
    theta: &DVector<f64>,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<f64> {
    let m = states.len();
    let mut worst: f64 = 0.0;
    for k in 0..m {
        let next = model.nominal(&states[k], &inputs[k], theta)?;
        let err = (next - &states[(k + 1) % m]).norm();
        if !err.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Rolls `inputs` forward from `x0`, returning all states `x_0..x_M` and `∂x_M/∂x_0`.
fn rollout_with_state_sensitivity(
    model: &ParametricModel,
    theta: &DVector<f64>,
    inputs: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    let n = model.state_dim();
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    let mut sens = DMatrix::identity(n, n);
    for u in inputs {
        let x = states.last().expect("non-empty");
        let (a, _) = model.jacobians(x, u, theta)?;
        sens = a * sens;
        states.push(model.nominal(x, u, theta)?);
    }
    Ok((states, sens))
}

/// Solves `x_0 = Φ_M(x_0; u_r)` by damped Newton and returns the period-`M` orbit.
pub fn periodic_shoot(
    model: &ParametricModel,
    theta: &DVector<f64>,
    inputs: &[DVector<f64>],
    x_guess: &DVector<f64>,
) -> Result<ReferenceTrajectory> {
    let n = model.state_dim();
    if inputs.is_empty() {
        return Err(Error::config("period must be at least 1"));
    }
    check_dim("state guess", n, x_guess.len())?;
    for u in inputs {
        check_dim("reference input", model.input_dim(), u.len())?;
    }
    let residual_at = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let (states, _) = rollout_with_state_sensitivity(model, theta, inputs, x)?;
        Ok(x - states.last().expect("non-empty"))
    };
    let mut x0 = x_guess.clone();
    let mut g = residual_at(&x0)?;
    let mut history = vec![g.norm()];
    let target = 1e-13;
    for _ in 0..NEWTON_MAX_ITER {
        if !g.norm().is_finite() {
            return Err(Error::ShootingDiverged { history });
        }
        let (_, sens) = rollout_with_state_sensitivity(model, theta, inputs, &x0)?;
        let jac = DMatrix::identity(n, n) - sens;
        let sigma_min = linalg::min_singular_value(&jac);
        if sigma_min <= 1e-12 * jac.amax().max(1.0) {
            return Err(Error::PeriodicityJacobianSingular { sigma_min });
        }
        if g.norm() <= target * (1.0 + x0.norm()) {
            break;
        }
        let step = jac
            .lu()
            .solve(&(-&g))
            .ok_or(Error::PeriodicityJacobianSingular { sigma_min })?;
        let (next_x, next_g) = damped_update(&x0, &step, g.norm(), &residual_at)?;
        if !(next_g.norm() < g.norm()) {
            // Roundoff floor or a genuinely stuck iterate.
            break;
        }
        x0 = next_x;
        g = next_g;
        history.push(g.norm());
    }
    let (mut states, _) = rollout_with_state_sensitivity(model, theta, inputs, &x0)?;
    states.pop();
    let traj = ReferenceTrajectory::new(model, theta, states, inputs.to_vec())?;
    if traj.feasibility_residual <= SHOOTING_TOL {
        Ok(traj)
    } else {
        Err(Error::ShootingDiverged { history })
    }
}

/// `∂x_r(0)/∂u_r` for a periodic orbit, by forward sensitivities and the implicit
/// function theorem: `(I - ∂Φ/∂x₀)⁻¹ ∂Φ/∂u`.
pub fn initial_state_sensitivity(
    model: &ParametricModel,
    theta: &DVector<f64>,
    traj: &ReferenceTrajectory,
) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let m = model.input_dim();
    let period = traj.period();
    let mut dx_dx0 = DMatrix::identity(n, n);
    let mut dx_du = DMatrix::zeros(n, m * period);
    for k in 0..period {
        let (a, b) = model.jacobians(traj.state_at(k), traj.input_at(k), theta)?;
        dx_dx0 = &a * dx_dx0;
        dx_du = &a * dx_du;
        let mut block = dx_du.columns_mut(k * m, m);
        block += b;
    }
    let jac = DMatrix::identity(n, n) - dx_dx0;
    let sigma_min = linalg::min_singular_value(&jac);
    jac.lu()
        .solve(&dx_du)
        .ok_or(Error::PeriodicityJacobianSingular { sigma_min })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityRow {
    /// `[D_i, C_iB, C_iAB, …, C_iA^{n-1}B]`, row-major.
    pub matrix: Vec<Vec<f64>>,
    pub rank: usize,
    pub output_reachable: bool,
    /// Smallest `k` with `rank [D_i, C_iB, …, C_iA^{k-1}B]` equal to the final rank.
    pub saturation_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityReport {
    pub param_dim: usize,
    pub rows: Vec<ReachabilityRow>,
    pub any_reachable: bool,
    /// Reachable row with the smallest saturation index.
    pub witness: Option<usize>,
}

impl ReachabilityReport {
    pub fn witness_row(&self) -> Option<&ReachabilityRow> {
        self.witness.map(|i| &self.rows[i])
    }
}

pub fn output_reachability(lin: &Linearization) -> ReachabilityReport {
    let n = lin.a.nrows();
    let m = lin.b.ncols();
    let s = lin.a_basis.len();
    let mut rows = Vec::with_capacity(n);
    for (c, d) in lin.c_rows.iter().zip(&lin.d_rows) {
        let mut blocks = vec![d.clone()];
        let mut a_pow_b = lin.b.clone();
        for _ in 0..n {
            blocks.push(c * &a_pow_b);
            a_pow_b = &lin.a * a_pow_b;
        }
        let matrix = DMatrix::from_fn(s, m * (n + 1), |r, col| blocks[col / m][(r, col % m)]);
        let ranks: Vec<usize> = (0..=n)
            .map(|k| linalg::numerical_rank(&matrix.columns(0, m * (k + 1)).into_owned(), s))
            .collect();
        let rank = ranks[n];
        let saturation_index = ranks.iter().position(|&r| r == rank).unwrap_or(n);
        rows.push(ReachabilityRow {
            matrix: linalg::to_rows(&matrix),
            rank,
            output_reachable: rank == s,
            saturation_index,
        });
    }
    let witness = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.output_reachable)
        .min_by_key(|(_, r)| r.saturation_index)
        .map(|(i, _)| i);
    ReachabilityReport {
        param_dim: s,
        any_reachable: witness.is_some(),
        rows,
        witness,
    }
}

/// Window bounds for an excitation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeCertificate {
    pub window: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Ascending eigenvalues of each cyclic window sum, indexed by start.
    pub per_window_eigs: Vec<Vec<f64>>,
    pub threshold: f64,
    pub pass: bool,
}

/// Scale-aware strict positivity test.
pub fn pe_passes(alpha: f64, beta: f64, relative_threshold: f64) -> bool {
    beta.is_finite() && alpha >= relative_threshold * beta.max(1.0) && alpha > 0.0
}

/// Eigenvalue bounds of all cyclic windows `Σ_{k=j}^{j+window-1} G_{k mod M}`.
pub fn cyclic_window_certificate(
    grams: &[DMatrix<f64>],
    window: usize,
    relative_threshold: f64,
) -> PeCertificate {
    let period = grams.len();
    let dim = grams.first().map_or(0, |g| g.nrows());
    let per_window_eigs: Vec<Vec<f64>> = (0..period)
        .map(|start| {
            let mut sum = DMatrix::zeros(dim, dim);
            for k in start..start + window {
                sum += &grams[k % period];
            }
            linalg::sym_eigenvalues(&sum)
        })
        .collect();
    let alpha = per_window_eigs
        .iter()
        .filter_map(|e| e.first().copied())
        .fold(f64::INFINITY, f64::min);
    let beta = per_window_eigs
        .iter()
        .filter_map(|e| e.last().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = relative_threshold * beta.max(1.0);
    PeCertificate {
        window,
        alpha,
        beta,
        per_window_eigs,
        threshold,
        pass: pe_passes(alpha, beta, relative_threshold),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputExcitation {
    pub window: usize,
    pub alpha_u: f64,
    pub beta_u: f64,
    pub pass: bool,
}

/// Excitation of `δu = u_r - u_s` over cyclic windows of the given length.
pub fn pe_input_check(
    inputs: &[DVector<f64>],
    u_s: &DVector<f64>,
    window: i64,
    relative_threshold: f64,
) -> Result<InputExcitation> {
    if window <= 0 {
        return Err(Error::WindowTooShort(window));
    }
    let grams: Vec<DMatrix<f64>> = inputs
        .iter()
        .map(|u| {
            let du = u - u_s;
            &du * du.transpose()
        })
        .collect();
    let cert = cyclic_window_certificate(&grams, window as usize, relative_threshold);
    Ok(InputExcitation {
        window: window as usize,
        alpha_u: cert.alpha,
        beta_u: cert.beta,
        pass: cert.pass,
    })
}

/// Evaluates the nonlinear regressor along the orbit and bounds all `M` cyclic
/// windows of length `M`.
pub fn certify_pe(
    model: &ParametricModel,
    traj: &ReferenceTrajectory,
    relative_threshold: f64,
) -> Result<PeCertificate> {
    let grams = traj
        .states()
        .iter()
        .zip(traj.inputs())
        .map(|(x, u)| Ok(model.regressor(x, u)?.gram()))
        .collect::<Result<Vec<_>>>()?;
    Ok(cyclic_window_certificate(
        &grams,
        traj.period(),
        relative_threshold,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcitationShape {
    /// One sinusoid per input channel, channel `c` shifted by `2πc/(mM)`.
    Sinusoid,
    /// Pseudo-random `±amplitude` pattern from a 7-bit LFSR.
    Prbs,
}

/// `u_s + δu(k)` for `k = 0..period`.
pub fn excitation_inputs(
    u_s: &DVector<f64>,
    period: usize,
    amplitude: f64,
    shape: ExcitationShape,
) -> Vec<DVector<f64>> {
    let m = u_s.len();
    match shape {
        ExcitationShape::Sinusoid => (0..period)
            .map(|k| {
                DVector::from_fn(m, |c, _| {
                    let phase = 2.0 * PI * c as f64 / (m * period) as f64;
                    u_s[c] + amplitude * (2.0 * PI * k as f64 / period as f64 + phase).sin()
                })
            })
            .collect(),
        ExcitationShape::Prbs => {
            let mut registers: Vec<u8> = (0..m).map(|c| 0x7f ^ (c as u8 * 0x15)).collect();
            let mut out = Vec::with_capacity(period);
            for _ in 0..period {
                let du = DVector::from_fn(m, |c, _| {
                    let reg = &mut registers[c];
                    let bit = ((*reg >> 6) ^ (*reg >> 5)) & 1;
                    *reg = ((*reg << 1) | bit) & 0x7f;
                    if bit == 1 {
                        amplitude
                    } else {
                        -amplitude
                    }
                });
                out.push(u_s + du);
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub period: usize,
    pub amplitude: f64,
    pub shape: ExcitationShape,
    pub relative_threshold: f64,
}

impl GenerationOptions {
    pub fn sinusoid(period: usize, amplitude: f64) -> Self {
        Self {
            period,
            amplitude,
            shape: ExcitationShape::Sinusoid,
            relative_threshold: DEFAULT_PE_RELATIVE_THRESHOLD,
        }
    }
}

/// A certified reference plus the intermediate reports that justify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReference {
    pub trajectory: ReferenceTrajectory,
    pub reachability: ReachabilityReport,
    pub input_excitation: InputExcitation,
}

fn at_stage(stage: GenerationStage) -> impl FnOnce(Error) -> Error {
    move |e| Error::Generation {
        stage,
        source: Box::new(e),
    }
}

/// Steady tuple → reachability → excitation input → shooting → certificate.
///
/// The input excitation test is a sufficient condition only; a failing input
/// test is logged and the nonlinear certificate decides.
pub fn generate_pe_reference(
    model: &ParametricModel,
    theta: &DVector<f64>,
    equilibrium: &Equilibrium,
    options: &GenerationOptions,
) -> Result<GeneratedReference> {
    let n = model.state_dim();
    if options.period < n {
        return Err(Error::config(format!(
            "period {} is shorter than the state dimension {n}",
            options.period
        )));
    }
    let lin = model.linearize(&equilibrium.x_s, &equilibrium.u_s, theta)?;
    let reachability = output_reachability(&lin);
    let Some(witness) = reachability.witness_row() else {
        return Err(at_stage(GenerationStage::OutputReachability)(
            Error::NotOutputReachable {
                report: reachability,
            },
        ));
    };
    let window = options.period as i64 - witness.saturation_index as i64;
    let inputs = excitation_inputs(
        &equilibrium.u_s,
        options.period,
        options.amplitude,
        options.shape,
    );
    let input_excitation = pe_input_check(
        &inputs,
        &equilibrium.u_s,
        window,
        options.relative_threshold,
    )
    .map_err(at_stage(GenerationStage::InputExcitation))?;
    if !input_excitation.pass {
        warn!(
            "input perturbation is not exciting over windows of {window} (alpha_u = {:e})",
            input_excitation.alpha_u
        );
    }
    let trajectory = periodic_shoot(model, theta, &inputs, &equilibrium.x_s)
        .map_err(at_stage(GenerationStage::Shooting))?;
    let certificate = certify_pe(model, &trajectory, options.relative_threshold)?;
    if !certificate.pass {
        return Err(at_stage(GenerationStage::Certification)(
            Error::CertificationFailed { certificate },
        ));
    }
    Ok(GeneratedReference {
        trajectory: trajectory.with_certificate(certificate),
        reachability,
        input_excitation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationOptions {
    pub period: usize,
    pub alpha: f64,
    pub beta: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub penalty_rounds: usize,
    pub tolerance: f64,
    /// Starting input sequence; defaults to a cosine of amplitude 0.5 per channel.
    pub initial_inputs: Option<Vec<Vec<f64>>>,
    pub relative_threshold: f64,
}

impl OptimizationOptions {
    pub fn new(period: usize, alpha: f64, beta: f64) -> Self {
        Self {
            period,
            alpha,
            beta,
            initial_penalty: 100.0,
            penalty_growth: 10.0,
            penalty_rounds: 7,
            tolerance: 1e-6,
            initial_inputs: None,
            relative_threshold: DEFAULT_PE_RELATIVE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedReference {
    pub trajectory: ReferenceTrajectory,
    /// `(1/M) Σ |x_i|²_Q + |u_i|²_R` at the returned orbit.
    pub cost: f64,
    pub penalty_weight: f64,
    pub violation: f64,
    pub window_eigenvalues: Vec<f64>,
}

/// Penalised single-shooting problem over `z = (x_0, u_0, …, u_{M-1})`.
struct PenaltyProblem<'a> {
    model: &'a ParametricModel,
    theta: &'a DVector<f64>,
    q: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
    period: usize,
    alpha: f64,
    beta: f64,
}

struct PenaltyEval {
    cost: f64,
    violation: f64,
    value: f64,
    grad: DVector<f64>,
}

impl PenaltyProblem<'_> {
    fn dim(&self) -> usize {
        self.model.state_dim() + self.model.input_dim() * self.period
    }

    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>) {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let x0 = z.rows(0, n).into_owned();
        let inputs = (0..self.period)
            .map(|i| z.rows(n + i * m, m).into_owned())
            .collect();
        (x0, inputs)
    }

    fn eval(&self, z: &DVector<f64>, mu: f64) -> Result<PenaltyEval> {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let dim = self.dim();
        let (x0, inputs) = self.split(z);
        let select = |i: usize| {
            let mut e = DMatrix::zeros(m, dim);
            for c in 0..m {
                e[(c, n + i * m + c)] = 1.0;
            }
            e
        };

        let mut states = vec![x0];
        let mut sens = vec![DMatrix::identity(n, dim)];
        let mut cost = 0.0;
        let mut cost_grad = DVector::zeros(dim);
        let mut gram = DMatrix::zeros(self.model.param_dim(), self.model.param_dim());
        let mut regressors = Vec::with_capacity(self.period);
        for (i, u) in inputs.iter().enumerate() {
            let x = &states[i];
            let e = select(i);
            let qx = self.q * x;
            let ru = self.r * u;
            cost += x.dot(&qx) + u.dot(&ru);
            cost_grad += (sens[i].transpose() * qx + e.transpose() * ru) * 2.0;
            let phi = self.model.regressor(x, u)?;
            gram += phi.gram();
            regressors.push(phi);
            let (a, b) = self.model.jacobians(x, u, self.theta)?;
            let next_sens = &a * &sens[i] + &b * &e;
            let next = self.model.nominal(x, u, self.theta)?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::RolloutDiverged { step: i + 1 });
            }
            states.push(next);
            sens.push(next_sens);
        }
        let scale = 1.0 / self.period as f64;
        cost *= scale;
        cost_grad *= scale;

        let gap = &states[self.period] - &states[0];
        let gap_grad = (&sens[self.period] - &sens[0]).transpose() * &gap * 2.0;

        // dλ/dz for an eigenvector v of the window sum: 2 Σᵢ (φᵢᵀv)ᵀ ∂(φᵢᵀv)/∂z.
        let eig_grad = |v: &DVector<f64>| -> Result<DVector<f64>> {
            let mut g = DVector::zeros(dim);
            for (i, u) in inputs.iter().enumerate() {
                let x = &states[i];
                let (aj, bj) = self.model.basis_jacobians(x, u)?;
                let mut w = DMatrix::zeros(n, dim);
                for (j, (a, b)) in aj.iter().zip(&bj).enumerate() {
                    if v[j] != 0.0 {
                        w += (a * &sens[i] + b * select(i)) * v[j];
                    }
                }
                let pv = regressors[i].values() * v;
                g += w.transpose() * pv * 2.0;
            }
            Ok(g)
        };

        let (lmin, vmin) = linalg::sym_min_eigenpair(&gram);
        let (lmax, vmax) = linalg::sym_max_eigenpair(&gram);
        let low = (self.alpha - lmin).max(0.0);
        let high = (lmax - self.beta).max(0.0);

        let mut value = cost + mu * (gap.norm_squared() + low * low + high * high);
        let mut grad = cost_grad + gap_grad * mu;
        if low > 0.0 {
            grad -= eig_grad(&vmin)? * (2.0 * mu * low);
        }
        if high > 0.0 {
            grad += eig_grad(&vmax)? * (2.0 * mu * high);
        }
        if !value.is_finite() {
            value = f64::INFINITY;
        }
        Ok(PenaltyEval {
            cost,
            violation: gap.norm().max(low).max(high),
            value,
            grad,
        })
    }

    /// BFGS with Armijo backtracking on the penalised objective.
    fn minimize(&self, z0: DVector<f64>, mu: f64) -> Result<DVector<f64>> {
        let dim = self.dim();
        let mut z = z0;
        let mut cur = self.eval(&z, mu)?;
        let mut h_inv = DMatrix::identity(dim, dim) / (1.0 + mu);
        for _ in 0..2000 {
            if cur.grad.norm() <= 1e-12 * (1.0 + cur.value.abs()) {
                break;
            }
            let mut dir = -(&h_inv * &cur.grad);
            if dir.dot(&cur.grad) >= 0.0 {
                h_inv = DMatrix::identity(dim, dim) / (1.0 + mu);
                dir = -(&h_inv * &cur.grad);
            }
            let slope = dir.dot(&cur.grad);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial = &z + &dir * t;
                if let Ok(next) = self.eval(&trial, mu) {
                    if next.value <= cur.value + 1e-4 * t * slope {
                        accepted = Some((trial, next));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((next_z, next)) = accepted else {
                break;
            };
            let s = &next_z - &z;
            let y = &next.grad - &cur.grad;
            let sy = s.dot(&y);
            if sy > 1e-14 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let eye = DMatrix::<f64>::identity(dim, dim);
                let left = &eye - &s * y.transpose() * rho;
                let right = &eye - &y * s.transpose() * rho;
                h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
            }
            let stalled = (cur.value - next.value).abs() <= 1e-16 * cur.value.abs().max(1e-300);
            z = next_z;
            cur = next;
            if stalled {
                break;
            }
        }
        Ok(z)
    }
}

/// Quadratic-penalty search for a period-`M` orbit whose regressor window sum
/// has eigenvalues in `[alpha, beta]`, minimising `(1/M) Σ |x_i|²_Q + |u_i|²_R`.
pub fn optimize_pe_reference(
    model: &ParametricModel,
    theta: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    options: &OptimizationOptions,
) -> Result<OptimizedReference> {
    let n = model.state_dim();
    let m = model.input_dim();
    let period = options.period;
    if period == 0 {
        return Err(Error::config("period must be at least 1"));
    }
    if !(options.alpha >= 0.0 && options.beta >= options.alpha) {
        return Err(Error::config(format!(
            "need 0 <= alpha <= beta, got alpha = {}, beta = {}",
            options.alpha, options.beta
        )));
    }
    check_dim("Q rows", n, q.nrows())?;
    check_dim("R rows", m, r.nrows())?;
    let problem = PenaltyProblem {
        model,
        theta,
        q,
        r,
        period,
        alpha: options.alpha,
        beta: options.beta,
    };

    let shape: Vec<DVector<f64>> = match &options.initial_inputs {
        Some(rows) => {
            if rows.len() != period {
                return Err(Error::config("initial_inputs length must equal the period"));
            }
            rows.iter().map(|r| DVector::from_row_slice(r)).collect()
        }
        None => (0..period)
            .map(|k| {
                DVector::from_fn(m, |c, _| {
                    (2.0 * PI * (k as f64 + c as f64 / m as f64) / period as f64).cos()
                })
            })
            .collect(),
    };
    // Scan amplitudes of the starting state and input shape for the lowest
    // penalised value. The origin is a stationary point, so a nonzero start
    // matters.
    let mut z = DVector::zeros(problem.dim());
    let mut best = f64::INFINITY;
    let amplitudes: Vec<f64> = (-3..16).map(|k| 2f64.powi(-k)).collect();
    for &input_scale in &amplitudes {
        for state_scale in amplitudes.iter().flat_map(|a| [*a, -*a]) {
            let mut trial = DVector::zeros(problem.dim());
            trial.rows_mut(0, n).fill(state_scale);
            for (i, u) in shape.iter().enumerate() {
                trial.rows_mut(n + i * m, m).copy_from(&(u * input_scale));
            }
            let value = problem
                .eval(&trial, options.initial_penalty)
                .map_or(f64::INFINITY, |e| e.value);
            if value < best {
                best = value;
                z = trial;
            }
        }
    }

    let mut mu = options.initial_penalty;
    let mut violation = f64::INFINITY;
    for round in 0..options.penalty_rounds {
        z = problem.minimize(z, mu)?;
        let eval = problem.eval(&z, mu)?;
        debug!(
            "penalty round {round}: mu = {mu:e}, cost = {:.6}, violation = {:e}",
            eval.cost, eval.violation
        );
        violation = eval.violation;
        if violation <= 0.1 * options.tolerance {
            break;
        }
        if round + 1 < options.penalty_rounds {
            mu *= options.penalty_growth;
        }
    }

    // Closing the orbit exactly by shooting can move x_0 far when the
    // periodicity Jacobian is nearly singular, so keep whichever candidate
    // violates the constraints least.
    let (x0, inputs) = problem.split(&z);
    let (mut states, _) = rollout_with_state_sensitivity(model, theta, &inputs, &x0)?;
    states.pop();
    let mut candidates = vec![ReferenceTrajectory::new(model, theta, states, inputs.clone())?];
    if let Ok(t) = periodic_shoot(model, theta, &inputs, &x0) {
        candidates.push(t);
    }
    let mut scored = candidates
        .into_iter()
        .map(|t| {
            let cert = certify_pe(model, &t, options.relative_threshold)?;
            let v = t
                .feasibility_residual
                .max(options.alpha - cert.alpha)
                .max(cert.beta - options.beta)
                .max(0.0);
            Ok((v, t, cert))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (final_violation, trajectory, certificate) = scored.swap_remove(0);
    let window_eigenvalues = certificate.per_window_eigs[0].clone();
    if final_violation > options.tolerance {
        return Err(Error::PenaltyStalled {
            violation: final_violation.max(violation),
        });
    }
    let cost = trajectory
        .states()
        .iter()
        .zip(trajectory.inputs())
        .map(|(x, u)| x.dot(&(q * x)) + u.dot(&(r * u)))
        .sum::<f64>()
        / period as f64;
    Ok(OptimizedReference {
        trajectory: trajectory.with_certificate(certificate),
        cost,
        penalty_weight: mu,
        violation: final_violation,
        window_eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::library::{linear, linear_theta, scalar_bilinear};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    /// Closed-form steady state of the scalar bilinear plant.
    fn scalar_steady_state(theta: [f64; 2], u_s: f64) -> f64 {
        u_s / (1.0 - theta[0] - theta[1] * u_s)
    }

    #[test]
    fn scalar_equilibrium_matches_closed_form() {
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let eq = find_equilibrium(&model, model.theta_true(), &v(&[-0.09]), &v(&[1.0])).unwrap();
        let expected = scalar_steady_state([1.1, 0.1], -0.09);
        assert!((eq.x_s[0] - expected).abs() < 1e-12);
        assert!((expected - 0.989_010_989_010_989).abs() < 1e-12);
        assert!(eq.residual <= EQUILIBRIUM_TOL);
    }

    #[test]
    fn zero_input_equilibrium_is_origin() {
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let eq = find_equilibrium(&model, model.theta_true(), &v(&[0.0]), &v(&[0.3])).unwrap();
        assert!(eq.x_s[0].abs() < 1e-12);
    }

    #[test]
    fn unit_eigenvalue_at_origin_is_rejected() {
        let model = scalar_bilinear([1.0, 0.1], 0.0);
        let err = find_equilibrium(&model, model.theta_true(), &v(&[0.0]), &v(&[0.0])).unwrap_err();
        assert!(matches!(err, Error::EigenvalueOneAtEquilibrium { .. }), "{err}");
        // The tuple itself is still a valid steady state.
        assert!(Equilibrium::verified(&model, model.theta_true(), v(&[0.0]), v(&[0.0])).is_ok());
    }

    fn offset_inputs() -> Vec<DVector<f64>> {
        excitation_inputs(&v(&[-0.09]), 4, 0.3, ExcitationShape::Sinusoid)
    }

    #[test]
    fn scalar_period_four_orbit() {
        // Frozen from an independent bracketing root solve of x0 = Φ₄(x0).
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let eq = find_equilibrium(&model, model.theta_true(), &v(&[-0.09]), &v(&[1.0])).unwrap();
        let traj = periodic_shoot(&model, model.theta_true(), &offset_inputs(), &eq.x_s).unwrap();
        assert!((traj.state_at(0)[0] - 0.864_064_659_389_188_5).abs() < 1e-10);
        assert!(traj.feasibility_residual <= SHOOTING_TOL);
        let states: Vec<f64> = traj.states().iter().map(|x| x[0]).collect();
        let expected = [0.8641, 0.8527, 1.1659, 1.1820];
        for (s, e) in states.iter().zip(expected) {
            assert!((s - e).abs() < 5e-5, "{states:?}");
        }
    }

    #[test]
    fn unperturbed_input_returns_equilibrium() {
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let eq = find_equilibrium(&model, model.theta_true(), &v(&[-0.09]), &v(&[1.0])).unwrap();
        let traj = periodic_shoot(&model, model.theta_true(), &vec![eq.u_s.clone(); 5], &eq.x_s).unwrap();
        for x in traj.states() {
            assert!((x - &eq.x_s).norm() < 1e-12);
        }
        assert!(traj.feasibility_residual < 1e-12);
    }

    #[test]
    fn scalar_linear_closed_form() {
        let (a, b) = (0.7, 1.3);
        let model = linear(&DMatrix::from_element(1, 1, a), &DMatrix::from_element(1, 1, b), 0.0);
        let inputs: Vec<_> = [0.4, -1.0, 0.2, 0.9, -0.3].iter().map(|&u| v(&[u])).collect();
        let m = inputs.len() as i32;
        let sum: f64 = inputs
            .iter()
            .enumerate()
            .map(|(k, u)| a.powi(m - 1 - k as i32) * b * u[0])
            .sum();
        let expected = sum / (1.0 - a.powi(m));
        let traj = periodic_shoot(&model, model.theta_true(), &inputs, &v(&[0.0])).unwrap();
        assert!((traj.state_at(0)[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn unit_eigenvalue_shooting_is_singular() {
        let model = linear(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0), 0.0);
        let err = periodic_shoot(&model, model.theta_true(), &[v(&[1.0]), v(&[-1.0])], &v(&[0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::PeriodicityJacobianSingular { .. }));
    }

    #[test]
    fn reachability_of_offset_and_origin_linearisations() {
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let lin = model.linearize(&v(&[1.0]), &v(&[-0.09]), model.theta_true()).unwrap();
        let rep = output_reachability(&lin);
        assert!(rep.any_reachable);
        assert_eq!(rep.witness, Some(0));
        assert_eq!(rep.rows[0].rank, 2);
        assert_eq!(rep.rows[0].saturation_index, 1);
        // [D_1, C_1 B] with the exact B = 1.1.
        assert_eq!(rep.rows[0].matrix[0][0], 0.0);
        assert!((rep.rows[0].matrix[0][1] - 1.1).abs() < 1e-14);
        assert_eq!(rep.rows[0].matrix[1][0], 1.0);
        assert!((rep.rows[0].matrix[1][1] + 0.099).abs() < 1e-14);

        let model = scalar_bilinear([1.0, 0.1], 0.0);
        let lin = model.linearize(&v(&[0.0]), &v(&[0.0]), model.theta_true()).unwrap();
        let rep = output_reachability(&lin);
        assert!(!rep.any_reachable);
        assert_eq!(rep.rows[0].rank, 1);
        assert_eq!(rep.rows[0].matrix, vec![vec![0.0, 1.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn zero_output_system_has_rank_zero() {
        let lin = Linearization {
            a: DMatrix::from_element(1, 1, 0.5),
            b: DMatrix::from_element(1, 1, 1.0),
            a_basis: vec![DMatrix::zeros(1, 1); 2],
            b_basis: vec![DMatrix::zeros(1, 1); 2],
            c_rows: vec![DMatrix::zeros(2, 1)],
            d_rows: vec![DMatrix::zeros(2, 1)],
        };
        let rep = output_reachability(&lin);
        assert_eq!(rep.rows[0].rank, 0);
        assert!(!rep.any_reachable);
    }

    #[test]
    fn sinusoid_input_excitation() {
        let check = pe_input_check(&offset_inputs(), &v(&[-0.09]), 3, DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
        // (0.3 sin(2π/4))²
        assert!((check.alpha_u - 0.09).abs() < 1e-14);
        assert!((check.beta_u - 0.18).abs() < 1e-14);
        assert!(check.pass);

        let flat = vec![v(&[-0.09]); 4];
        let check = pe_input_check(&flat, &v(&[-0.09]), 3, DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
        assert_eq!(check.alpha_u, 0.0);
        assert!(!check.pass);

        assert!(matches!(
            pe_input_check(&flat, &v(&[-0.09]), 0, DEFAULT_PE_RELATIVE_THRESHOLD),
            Err(Error::WindowTooShort(0))
        ));
    }

    #[test]
    fn two_channel_alternating_input_is_exciting() {
        let u_s = v(&[0.0, 0.0]);
        let inputs = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let check = pe_input_check(&inputs, &u_s, 3, DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
        // Brute force: every 3-window holds both unit vectors at least once.
        let mut brute = f64::INFINITY;
        for j in 0..4 {
            let mut g = DMatrix::<f64>::zeros(2, 2);
            for k in j..j + 3 {
                let du = &inputs[k % 4] - &u_s;
                g += &du * du.transpose();
            }
            let e = g.symmetric_eigenvalues();
            brute = brute.min(e.min());
        }
        assert!((check.alpha_u - brute).abs() < 1e-14);
        assert!(check.alpha_u > 0.0 && check.pass);
    }

    #[test]
    fn certificate_of_scalar_orbit() {
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let eq = find_equilibrium(&model, model.theta_true(), &v(&[-0.09]), &v(&[1.0])).unwrap();
        let traj = periodic_shoot(&model, model.theta_true(), &offset_inputs(), &eq.x_s).unwrap();
        let cert = certify_pe(&model, &traj, DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
        // Direct 2×2 window sum of φφᵀ with φ = [x, xu].
        let mut g = DMatrix::<f64>::zeros(2, 2);
        for (x, u) in traj.states().iter().zip(traj.inputs()) {
            let p = v(&[x[0], x[0] * u[0]]);
            g += &p * p.transpose();
        }
        let eig = g.symmetric_eigenvalues();
        assert!((cert.alpha - eig.min()).abs() < 1e-12);
        assert!((cert.beta - eig.max()).abs() < 1e-12);
        assert!(cert.pass && cert.alpha > 0.0);
        assert_eq!(cert.per_window_eigs.len(), 4);

        let rotated = certify_pe(&model, &traj.rotated(3), DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
        assert!((rotated.alpha - cert.alpha).abs() < 1e-12);
        assert!((rotated.beta - cert.beta).abs() < 1e-12);
        assert!(cert.beta >= cert.alpha);
    }

    #[test]
    fn origin_orbit_is_not_exciting() {
        let model = scalar_bilinear([1.0, 0.1], 0.0);
        let traj = ReferenceTrajectory::constant(&model, model.theta_true(), &v(&[0.0]), &v(&[0.0]), 2).unwrap();
        let cert = certify_pe(&model, &traj, DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
        assert_eq!(cert.alpha, 0.0);
        assert!(!cert.pass);
    }

    #[test]
    fn generate_scalar_reference() {
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let eq = find_equilibrium(&model, model.theta_true(), &v(&[-0.09]), &v(&[1.0])).unwrap();
        let gen = generate_pe_reference(&model, model.theta_true(), &eq, &GenerationOptions::sinusoid(4, 0.3)).unwrap();
        assert!(gen.trajectory.is_certified());
        assert!((gen.trajectory.state_at(0)[0] - 0.864_064_659_389_188_5).abs() < 1e-10);
        assert_eq!(gen.input_excitation.window, 3);
        assert!((gen.input_excitation.alpha_u - 0.09).abs() < 1e-14);
    }

    #[test]
    fn zero_amplitude_fails_certification() {
        let model = scalar_bilinear([1.1, 0.1], 0.0);
        let eq = find_equilibrium(&model, model.theta_true(), &v(&[-0.09]), &v(&[1.0])).unwrap();
        let err = generate_pe_reference(&model, model.theta_true(), &eq, &GenerationOptions::sinusoid(4, 0.0)).unwrap_err();
        assert_eq!(err.stage(), Some(GenerationStage::Certification));
        let Error::Generation { source, .. } = err else { unreachable!() };
        let Error::CertificationFailed { certificate } = *source else {
            panic!("unexpected {source}")
        };
        // A single repeated regressor has rank one.
        assert!(certificate.alpha.abs() < 1e-12);
    }

    #[test]
    fn origin_generation_fails_reachability() {
        let model = scalar_bilinear([1.0, 0.1], 0.0);
        let eq = Equilibrium::verified(&model, model.theta_true(), v(&[0.0]), v(&[0.0])).unwrap();
        let err = generate_pe_reference(&model, model.theta_true(), &eq, &GenerationOptions::sinusoid(2, 0.3)).unwrap_err();
        assert_eq!(err.stage(), Some(GenerationStage::OutputReachability));
    }

    #[test]
    fn prbs_shape_is_plus_minus_amplitude() {
        let inputs = excitation_inputs(&v(&[1.0, -1.0]), 16, 0.2, ExcitationShape::Prbs);
        for u in &inputs {
            assert!(((u[0] - 1.0).abs() - 0.2).abs() < 1e-15);
            assert!(((u[1] + 1.0).abs() - 0.2).abs() < 1e-15);
        }
        let signs: Vec<bool> = inputs.iter().map(|u| u[0] > 1.0).collect();
        assert!(signs.contains(&true) && signs.contains(&false));
    }

    #[test]
    fn constrained_origin_reference() {
        let model = scalar_bilinear([1.0, 0.1], 0.0);
        let q = DMatrix::from_element(1, 1, 6.0);
        let r = DMatrix::from_element(1, 1, 0.1);
        let opt = optimize_pe_reference(&model, model.theta_true(), &q, &r, &OptimizationOptions::new(2, 0.1, 0.3)).unwrap();
        let traj = &opt.trajectory;
        assert!(traj.feasibility_residual <= 1e-6);
        let cert = certify_pe(&model, traj, DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
        assert!(cert.alpha >= 0.1 - 1e-6, "{cert:?}");
        assert!(cert.beta <= 0.3 + 1e-6, "{cert:?}");
        // Constrained optimum of an interior-point reference solve.
        assert!((opt.cost - 0.715_188_7).abs() < 1e-4, "cost {}", opt.cost);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let model = scalar_bilinear([1.0, 0.1], 0.0);
        let q = DMatrix::from_element(1, 1, 6.0);
        let r = DMatrix::from_element(1, 1, 0.1);
        let problem = PenaltyProblem {
            model: &model,
            theta: model.theta_true(),
            q: &q,
            r: &r,
            period: 3,
            alpha: 0.5,
            beta: 0.6,
        };
        for z in [v(&[0.3, 0.7, -0.4, 0.2]), v(&[-0.1, 0.05, 0.3, -0.6]), v(&[2.0, 0.7, -0.4, 0.2])] {
            let eval = problem.eval(&z, 7.0).unwrap();
            let h = 1e-6;
            for p in 0..z.len() {
                let mut zp = z.clone();
                zp[p] += h;
                let mut zm = z.clone();
                zm[p] -= h;
                let fd = (problem.eval(&zp, 7.0).unwrap().value - problem.eval(&zm, 7.0).unwrap().value) / (2.0 * h);
                assert!((fd - eval.grad[p]).abs() <= 1e-5 * (1.0 + fd.abs()), "z = {z}, p = {p}: fd {fd} vs {}", eval.grad[p]);
            }
        }
    }

    #[test]
    fn inactive_excitation_constraint_collapses_to_origin() {
        let model = scalar_bilinear([1.0, 0.1], 0.0);
        let q = DMatrix::from_element(1, 1, 6.0);
        let r = DMatrix::from_element(1, 1, 0.1);
        let opt = optimize_pe_reference(&model, model.theta_true(), &q, &r, &OptimizationOptions::new(2, 0.0, 0.3)).unwrap();
        assert!(opt.cost < 1e-8, "cost {}", opt.cost);
        assert!(!opt.trajectory.is_certified());
    }

    fn random_linear(entries: &[f64], n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
        let b = DMatrix::from_fn(n, m, |i, j| entries[n * n + i * m + j]);
        (a, b)
    }

    fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
        let n = a.nrows();
        let m = b.ncols();
        let mut blocks = DMatrix::zeros(n, n * m);
        let mut apow = b.clone();
        for k in 0..n {
            blocks.columns_mut(k * m, m).copy_from(&apow);
            apow = a * apow;
        }
        linalg::numerical_rank(&blocks, n * m)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn linear_shooting_matches_closed_form(
            entries in prop::collection::vec(-1.5f64..1.5, 12),
            us in prop::collection::vec(-1.0f64..1.0, 10),
            period in 1usize..6,
        ) {
            let (n, m) = (2, 2);
            let (a, b) = random_linear(&entries, n, m);
            let eigs = a.complex_eigenvalues();
            prop_assume!(eigs.iter().all(|l| (l.norm() - 1.0).abs() > 0.05));
            let model = linear(&a, &b, 0.0);
            let theta = linear_theta(&a, &b);
            let inputs: Vec<_> = (0..period).map(|k| DVector::from_row_slice(&us[2 * k..2 * k + 2])).collect();
            // x0 = (I - A^M)⁻¹ Σ A^{M-1-k} B u_k
            let mut rhs = DVector::zeros(n);
            let mut a_m = DMatrix::identity(n, n);
            for u in inputs.iter() {
                rhs = &a * rhs + &b * u;
                a_m = &a * a_m;
            }
            let lhs = DMatrix::identity(n, n) - a_m;
            prop_assume!(linalg::min_singular_value(&lhs) > 1e-3);
            let expected = lhs.lu().solve(&rhs).unwrap();
            let traj = periodic_shoot(&model, &theta, &inputs, &DVector::zeros(n)).unwrap();
            prop_assert!((traj.state_at(0) - &expected).amax() <= 1e-8 * (1.0 + expected.amax()));
            // rolling forward returns to the start
            let mut x = traj.state_at(0).clone();
            for u in &inputs {
                x = model.nominal(&x, u, &theta).unwrap();
            }
            prop_assert!((x - traj.state_at(0)).norm() <= 1e-9);
        }

        #[test]
        fn initial_state_sensitivity_has_full_rank(
            entries in prop::collection::vec(-1.5f64..1.5, 12),
            us in prop::collection::vec(-1.0f64..1.0, 10),
            extra in 0usize..3,
        ) {
            let (n, m) = (3, 1);
            let (a, b) = random_linear(&entries, n, m);
            prop_assume!(a.complex_eigenvalues().iter().all(|l| (l.norm() - 1.0).abs() > 0.05));
            prop_assume!(controllability_rank(&a, &b) == n);
            let period = n + extra;
            let model = linear(&a, &b, 0.0);
            let theta = linear_theta(&a, &b);
            let inputs: Vec<_> = (0..period).map(|k| DVector::from_element(1, us[k])).collect();
            let lhs = DMatrix::identity(n, n) - a.pow(period as u32);
            prop_assume!(linalg::min_singular_value(&lhs) > 1e-3);
            let traj = periodic_shoot(&model, &theta, &inputs, &DVector::zeros(n)).unwrap();
            let sens = initial_state_sensitivity(&model, &theta, &traj).unwrap();
            prop_assert_eq!(linalg::numerical_rank(&sens, n * period * 100), n);
        }

        #[test]
        fn certificate_bounds_every_window(
            xs in prop::collection::vec(-2.0f64..2.0, 6),
            us in prop::collection::vec(-1.0f64..1.0, 6),
            period in 2usize..6,
        ) {
            let model = scalar_bilinear([1.1, 0.1], 0.0);
            let traj = ReferenceTrajectory::new(
                &model,
                model.theta_true(),
                xs[..period].iter().map(|&x| v(&[x])).collect(),
                us[..period].iter().map(|&u| v(&[u])).collect(),
            ).unwrap();
            let cert = certify_pe(&model, &traj, DEFAULT_PE_RELATIVE_THRESHOLD).unwrap();
            for j in 0..period {
                let mut g = DMatrix::<f64>::zeros(2, 2);
                for k in j..j + period {
                    let p = model.regressor(traj.state_at(k), traj.input_at(k)).unwrap().phi();
                    g += &p * p.transpose();
                }
                let e = g.symmetric_eigenvalues();
                prop_assert!(e.min() >= cert.alpha - 1e-12);
                prop_assert!(e.max() <= cert.beta + 1e-12);
                if cert.pass {
                    prop_assert!(g.cholesky().is_some());
                }
            }
        }
    }
}
