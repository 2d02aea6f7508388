//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use adampc::closed_loop::{median, run};
use adampc::config::ExperimentFile;
use adampc::model::library::{linear, linear_theta, scalar_bilinear};
use adampc::mpc::{self, check_hessian_pd, finite_difference_hessian, MpcConfig};
use adampc::refgen::{
    excitation_inputs, optimize_pe_reference, output_reachability, periodic_shoot, ExcitationShape,
    OptimizationOptions, ReferenceTrajectory,
};
use adampc::rls::{RlsConfig, RlsState};
use adampc::{ExperimentConfig, Regressor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OFFSET: &str = include_str!("../../../configs/offset_tracking.toml");
const ORIGIN_OPTIMIZE: &str = include_str!("../../../configs/origin_optimize.toml");

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| uniform(rng, -1.0, 1.0))
}

fn random_spd(rng: &mut ChaCha8Rng, dim: usize, shift: f64) -> DMatrix<f64> {
    let l = random_matrix(rng, dim, dim);
    &l * l.transpose() + DMatrix::identity(dim, dim) * shift
}

fn offset_experiment(edit: impl FnOnce(&mut ExperimentFile)) -> ExperimentConfig {
    let mut file = ExperimentFile::from_toml_str(OFFSET).expect("offset config parses");
    edit(&mut file);
    file.experiment(Path::new(".")).expect("offset experiment builds")
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let model = scalar_bilinear([1.1, 0.1], 0.0);
    let inputs = excitation_inputs(&v(&[-0.09]), 4, 0.3, ExcitationShape::Sinusoid);
    let traj = match periodic_shoot(&model, model.theta_true(), &inputs, &v(&[1.0])) {
        Ok(t) => t,
        Err(e) => return verdict(false, format!("shooting failed: {e}")),
    };
    let elapsed = start.elapsed();
    let x0 = traj.state_at(0)[0];
    verdict(
        (x0 - 0.91).abs() <= 0.005 && within(elapsed, 1.0),
        format!("x_r(0) = {x0:.10} (target 0.91 +/- 0.005), {elapsed:?}"),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let model = scalar_bilinear([1.1, 0.1], 0.0);
    let lin = model.linearize(&v(&[1.0]), &v(&[-0.09]), model.theta_true()).unwrap();
    let (a, b) = (lin.a[(0, 0)], lin.b[(0, 0)]);
    let report = output_reachability(&lin);
    let row = &report.rows[0];
    let expected = [[0.0, 0.99], [1.0, -0.09]];
    let matrix_err = row
        .matrix
        .iter()
        .zip(expected.iter())
        .flat_map(|(r, e)| r.iter().zip(e.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    let origin = scalar_bilinear([1.0, 0.1], 0.0);
    let origin_lin = origin.linearize(&v(&[0.0]), &v(&[0.0]), origin.theta_true()).unwrap();
    let origin_rank = output_reachability(&origin_lin).rows[0].rank;
    let elapsed = start.elapsed();
    let ab_ok = (a - 1.09).abs() <= 1e-12 && (b - 0.99).abs() <= 1e-12;
    let pass = ab_ok && matrix_err <= 1e-12 && row.rank == 2 && origin_rank == 1 && within(elapsed, 0.1);
    verdict(
        pass,
        format!(
            "A = {a}, B = {b} (target 1.09, 0.99); reachability matrix {:?} max dev {matrix_err:.3e}, rank {}; origin rank {origin_rank}; {elapsed:?}",
            row.matrix, row.rank
        ),
    )
}

/// Minimiser of `λ^k |θ-θ̂₀|²_{P₀⁻¹} + Σ λ^{k-1-i} |y_i - φ_iᵀθ|²_{T⁻¹}` from its normal equations.
fn weighted_least_squares(cfg: &RlsConfig, data: &[(DMatrix<f64>, DVector<f64>)]) -> DVector<f64> {
    let k = data.len() as i32;
    let p0_inv = cfg.p_init.clone().try_inverse().unwrap();
    let t_inv = cfg.t.clone().try_inverse().unwrap();
    let mut h = &p0_inv * cfg.lambda.powi(k);
    let mut g = &p0_inv * &cfg.theta_hat_0 * cfg.lambda.powi(k);
    for (i, (values, y)) in data.iter().enumerate() {
        let w = cfg.lambda.powi(k - 1 - i as i32);
        h += values.transpose() * &t_inv * values * w;
        g += values.transpose() * &t_inv * y * w;
    }
    h.lu().solve(&g).unwrap()
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=3);
        let s = rng.random_range(1..=4);
        let steps = rng.random_range(1..=200);
        let cfg = RlsConfig {
            lambda: uniform(&mut rng, 0.85, 0.999),
            t: random_spd(&mut rng, n, 0.5),
            p_init: random_spd(&mut rng, s, 0.5),
            theta_hat_0: DVector::from_fn(s, |_, _| rng.random::<f64>() * 2.0 - 1.0),
        };
        let mut state = RlsState::new(&cfg).unwrap();
        let mut data = Vec::with_capacity(steps);
        for _ in 0..steps {
            let values = random_matrix(&mut rng, n, s);
            let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            state = state
                .update(&Regressor::from_columns(values.clone()), &y, &DVector::zeros(n))
                .unwrap();
            data.push((values, y));
        }
        let expected = weighted_least_squares(&cfg, &data);
        worst = worst.max((&state.theta_hat - &expected).amax());
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-8 && within(elapsed, 5.0),
        format!("50 datasets, max |theta_rls - theta_wls| = {worst:.3e}, {elapsed:?}"),
    )
}

struct LinearInstance {
    model: adampc::ParametricModel,
    theta: DVector<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    traj: ReferenceTrajectory,
    config: MpcConfig,
    x_k: DVector<f64>,
    k: usize,
}

fn linear_instance(rng: &mut ChaCha8Rng) -> LinearInstance {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=2);
    let horizon = rng.random_range(1..=6);
    let a = random_matrix(rng, n, n);
    let b = random_matrix(rng, n, m);
    let q = random_spd(rng, n, 0.5);
    let r = random_spd(rng, m, 0.1);
    let x_k = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let period = rng.random_range(1..=4);
    let xr: Vec<_> = (0..period).map(|_| DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)).collect();
    let ur: Vec<_> = (0..period).map(|_| DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0)).collect();
    let model = linear(&a, &b, 0.0);
    let theta = linear_theta(&a, &b);
    let traj = ReferenceTrajectory::new(&model, &theta, xr, ur).unwrap();
    LinearInstance {
        model,
        theta,
        a,
        b,
        traj,
        config: MpcConfig::new(q, r, horizon),
        x_k,
        k: rng.random_range(0..4),
    }
}

/// Dense quadratic `J(z) = zᵀHz + 2gᵀz + c` of a linear instance.
fn dense_quadratic(inst: &LinearInstance) -> (DMatrix<f64>, DVector<f64>) {
    let (n, m, horizon) = (inst.a.nrows(), inst.b.ncols(), inst.config.horizon);
    let dim = m * horizon;
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    for i in 0..horizon {
        let mut s = DMatrix::zeros(n, dim);
        for j in 0..i {
            let block = inst.a.pow((i - 1 - j) as u32) * &inst.b;
            s.view_mut((0, j * m), (n, m)).copy_from(&block);
        }
        let free = inst.a.pow(i as u32) * &inst.x_k - inst.traj.state_at(inst.k + i);
        h += s.transpose() * &inst.config.q * &s;
        g += s.transpose() * &inst.config.q * free;
        let mut e = DMatrix::zeros(m, dim);
        e.view_mut((0, i * m), (m, m)).fill_with_identity();
        h += e.transpose() * &inst.config.r * &e;
        g -= e.transpose() * &inst.config.r * inst.traj.input_at(inst.k + i);
    }
    (h, g)
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut max_iters = 0;
    for _ in 0..50 {
        let inst = linear_instance(&mut rng);
        let (h, g) = dense_quadratic(&inst);
        let u_opt = h.cholesky().unwrap().solve(&(-g));
        let warm = mpc::reference_inputs(&inst.traj, inst.k, inst.config.horizon);
        let sol = mpc::solve(&inst.model, &inst.theta, &inst.x_k, &inst.traj, inst.k, &inst.config, &warm).unwrap();
        let got = DVector::from_iterator(u_opt.len(), sol.u_star.iter().flat_map(|u| u.iter().copied()));
        worst = worst.max((&got - &u_opt).amax());
        max_iters = max_iters.max(sol.iterations);
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-6 && max_iters <= 1 && within(elapsed, 5.0),
        format!("50 instances, max |u - u_dense| = {worst:.3e}, max Gauss-Newton steps {max_iters}, {elapsed:?}"),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_ratio = 0.0f64;
    let mut checked = 0;
    let mut failures = Vec::new();
    for i in 0..20 {
        let theta_hat_0 = vec![1.1 + uniform(&mut rng, -0.5, 0.5), 0.1 + uniform(&mut rng, -0.5, 0.5)];
        let lambda = uniform(&mut rng, 0.8, 0.98);
        let seed = rng.random::<u64>();
        let config = offset_experiment(|f| {
            f.model.w_bar = 0.0;
            f.rls.theta_hat_0 = theta_hat_0.clone();
            f.rls.lambda = lambda;
            f.sim.seed = seed;
            f.sim.steps = 120;
            f.mpc.hessian_check = adampc::HessianCheck::Off;
        });
        let outcome = run(&config).unwrap();
        if let Some(e) = &outcome.abort {
            failures.push(format!("run {i} aborted: {e}"));
            continue;
        }
        for pair in outcome.trace.rows.windows(2) {
            // Past the roundoff floor of θ̂ - θ the ratio is noise.
            if pair[0].theta_error < 1e-9 {
                break;
            }
            checked += 1;
            let ratio = pair[1].lyapunov / (lambda * pair[0].lyapunov);
            worst_ratio = worst_ratio.max(ratio);
        }
    }
    verdict(
        failures.is_empty() && worst_ratio <= 1.0 + 1e-10,
        format!(
            "20 zero-noise closed-loop runs, {checked} steps, max W_(k+1)/(lambda W_k) = {worst_ratio:.12}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let config = offset_experiment(|f| {
        f.model.w_bar = 0.0;
        f.sim.steps = 150;
    });
    let outcome = run(&config).unwrap();
    let elapsed = start.elapsed();
    if let Some(e) = outcome.abort {
        return verdict(false, format!("run aborted: {e}"));
    }
    let rows = &outcome.trace.rows;
    let period = config.monitor_window;
    // θ̃ after the update at step k is θ̃ in row k + 1; the final estimate covers step 149.
    let mut errors: Vec<f64> = rows.iter().skip(1).map(|r| r.theta_error).collect();
    errors.push(outcome.trace.final_theta_error);
    let reached = errors.iter().position(|&e| e < 1e-6);
    // Least-squares slope of log|θ̃_k| for k ≥ M, above the roundoff floor.
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.k >= period && r.theta_error > 1e-12)
        .map(|r| (r.k as f64, r.theta_error.ln()))
        .collect();
    let count = points.len() as f64;
    let mean_k = points.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_l = points.iter().map(|p| p.1).sum::<f64>() / count;
    let slope = points.iter().map(|p| (p.0 - mean_k) * (p.1 - mean_l)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mean_k).powi(2)).sum::<f64>();
    let bound = 0.5 * 0.9f64.ln() + 0.05;
    verdict(
        reached.is_some() && slope <= bound && within(elapsed, 10.0),
        format!(
            "|theta err| < 1e-6 after {} steps, final {:.3e}, log-slope {slope:.4} (bound {bound:.4}, {} points), {elapsed:?}",
            reached.map_or("never".to_string(), |k| (k + 1).to_string()),
            outcome.trace.final_theta_error,
            points.len()
        ),
    )
}

fn criterion_7() -> Verdict {
    let config = offset_experiment(|f| f.sim.seed = 7);
    let outcome = run(&config).unwrap();
    if let Some(e) = outcome.abort {
        return verdict(false, format!("run aborted: {e}"));
    }
    let alpha_ref = config.reference.certificate.as_ref().map(|c| c.alpha).unwrap_or(f64::NAN);
    let Some(k_pe) = outcome.trace.k_pe else {
        return verdict(false, "closed loop never became PE");
    };
    let worst = outcome.trace.worst_window_lambda_min(k_pe).unwrap_or(f64::NAN);
    verdict(
        worst >= 0.5 * alpha_ref,
        format!("k_PE = {k_pe}, worst window lambda_min {worst:.4e} vs 0.5 alpha_ref = {:.4e}", 0.5 * alpha_ref),
    )
}

fn steady_state_errors(w_bar: f64, seeds: std::ops::Range<u64>) -> Result<Vec<f64>, String> {
    use rayon::prelude::*;
    seeds
        .into_par_iter()
        .map(|seed| {
            let config = offset_experiment(|f| {
                f.model.w_bar = w_bar;
                f.sim.seed = seed;
                f.mpc.hessian_check = adampc::HessianCheck::Off;
            });
            let outcome = run(&config).map_err(|e| e.to_string())?;
            match outcome.abort {
                Some(e) => Err(format!("seed {seed} aborted: {e}")),
                None => Ok(outcome.trace.mean_theta_error_tail(100)),
            }
        })
        .collect()
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let (high, low) = match (steady_state_errors(0.2, 100..120), steady_state_errors(0.1, 100..120)) {
        (Ok(h), Ok(l)) => (h, l),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e),
    };
    let ratio = median(&low) / median(&high);
    let elapsed = start.elapsed();
    verdict(
        (0.3..=0.7).contains(&ratio) && within(elapsed, 60.0),
        format!(
            "median steady |theta err|: {:.4e} at 0.2, {:.4e} at 0.1, ratio {ratio:.4}, {elapsed:?}",
            median(&high),
            median(&low)
        ),
    )
}

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let file = ExperimentFile::from_toml_str(ORIGIN_OPTIMIZE).unwrap();
    let model = file.build_model().unwrap();
    let q = DMatrix::from_element(1, 1, 6.0);
    let r = DMatrix::from_element(1, 1, 0.1);
    let result = optimize_pe_reference(&model, model.theta_true(), &q, &r, &OptimizationOptions::new(2, 0.1, 0.3));
    let elapsed = start.elapsed();
    match result {
        Ok(opt) => {
            let feas = opt.trajectory.feasibility_residual;
            let in_band = opt.window_eigenvalues.iter().all(|&e| (0.1 - 1e-6..=0.3 + 1e-6).contains(&e));
            verdict(
                feas <= 1e-6 && in_band && within(elapsed, 10.0),
                format!(
                    "feasibility {feas:.3e}, window eigenvalues {:?}, cost {:.6}, {elapsed:?}",
                    opt.window_eigenvalues, opt.cost
                ),
            )
        }
        Err(e) => verdict(false, format!("optimizer failed: {e}")),
    }
}

fn criterion_10() -> Verdict {
    let config = offset_experiment(|f| f.sim.seed = 10);
    let outcome = run(&config).unwrap();
    let checked: Vec<f64> = outcome.trace.rows.iter().filter_map(|r| r.hessian_lambda_min).collect();
    let min_along_run = checked.iter().copied().fold(f64::INFINITY, f64::min);
    let run_ok = outcome.abort.is_none() && checked.len() == outcome.trace.rows.len() && min_along_run > 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_rel = 0.0f64;
    let mut pd_ok = true;
    for _ in 0..50 {
        let inst = linear_instance(&mut rng);
        let (h, _) = dense_quadratic(&inst);
        let exact = h * 2.0;
        let warm = mpc::reference_inputs(&inst.traj, inst.k, inst.config.horizon);
        let sol = mpc::solve(&inst.model, &inst.theta, &inst.x_k, &inst.traj, inst.k, &inst.config, &warm).unwrap();
        let fd = finite_difference_hessian(&inst.model, &inst.theta, &inst.x_k, &sol.u_star, &inst.traj, inst.k, &inst.config).unwrap();
        worst_rel = worst_rel.max((&fd - &exact).amax() / exact.amax());
        let report = check_hessian_pd(&inst.model, &inst.theta, &inst.x_k, &sol, &inst.traj, inst.k, &inst.config).unwrap();
        pd_ok &= report.pd;
    }
    verdict(
        run_ok && worst_rel <= 1e-4 && pd_ok,
        format!(
            "closed loop: {} checks, min lambda_min {min_along_run:.4e}; linear instances: max relative Hessian dev {worst_rel:.3e}",
            checked.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("periodic reference x_r(0)", criterion_1),
        ("linearization and output reachability", criterion_2),
        ("RLS vs weighted least squares", criterion_3),
        ("MPC vs dense normal equations", criterion_4),
        ("Lyapunov decay", criterion_5),
        ("zero-noise convergence", criterion_6),
        ("closed-loop persistent excitation", criterion_7),
        ("noise-ball scaling", criterion_8),
        ("constrained reference optimization", criterion_9),
        ("MPC Hessian positive definiteness", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            name,
            result.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
