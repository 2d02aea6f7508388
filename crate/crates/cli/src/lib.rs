//! Command-line front end: `refgen`, `simulate`, `check` and `sweep`.
//!
//! Exit codes: 0 success, 2 failed or aborted run, 3 configuration error.

pub mod check;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use adampc::closed_loop::{self, quantile, SweepRow};
use adampc::config::OutputFormat;
use adampc::{Error, ExperimentFile, ReferenceBuild, ReferenceMode, ReferenceTrajectory, SimTrace, SweepSpec};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "adampc", version, about = "Adaptive tracking MPC with persistently exciting references")]
pub struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Disturbance seed; overrides `sim.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the reference and write reference.json / reference.csv.
    Refgen,
    /// Run the closed loop and write trace.csv / summary.json.
    Simulate(SimulateArgs),
    /// Report equilibrium, spectrum, controllability and output reachability.
    Check,
    /// Run a parameter and seed grid in parallel.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Force the disturbance bound to zero.
    #[arg(long)]
    pub no_noise: bool,
    /// Keep the initial estimate (no RLS updates).
    #[arg(long)]
    pub fixed_theta: bool,
    /// Run even when the reference is not persistently exciting.
    #[arg(long)]
    pub allow_uncertified: bool,
    /// Number of closed-loop steps; overrides `sim.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep specification (TOML); without it a single run is summarised.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

/// A failure together with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn failed(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILED,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config() { EXIT_CONFIG } else { EXIT_FAILED };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

type Overrides = Vec<(String, serde_json::Value)>;

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::Refgen => cmd_refgen(cli),
        Command::Simulate(args) => cmd_simulate(cli, args),
        Command::Check => cmd_check(cli),
        Command::Sweep(args) => cmd_sweep(cli, args),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

struct Loaded {
    file: ExperimentFile,
    base_dir: PathBuf,
}

fn load(cli: &Cli) -> CliResult<Loaded> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::config("--config <path> is required"))?;
    let mut file = ExperimentFile::from_path(path).map_err(|e| Failure::config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        file.sim.seed = seed;
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { file, base_dir })
}

fn output_dir(cli: &Cli, file: &ExperimentFile) -> CliResult<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| file.output.directory.clone());
    fs::create_dir_all(&dir).map_err(|e| Failure::failed(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::failed(format!("cannot write {}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    text
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `k, x_r[i], u_r[i]` for one period.
pub fn reference_csv(traj: &ReferenceTrajectory) -> String {
    let n = traj.state_at(0).len();
    let m = traj.input_at(0).len();
    let mut cols = vec!["k".to_string()];
    cols.extend((0..n).map(|i| format!("x_r[{i}]")));
    cols.extend((0..m).map(|i| format!("u_r[{i}]")));
    let mut out = cols.join(",");
    out.push('\n');
    for k in 0..traj.period() {
        let mut cells = vec![k.to_string()];
        cells.extend(traj.state_at(k).iter().copied().map(fmt_f64));
        cells.extend(traj.input_at(k).iter().copied().map(fmt_f64));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn build_reference(file: &ExperimentFile, base_dir: &Path) -> CliResult<ReferenceBuild> {
    file.build_reference(base_dir).map_err(Failure::from)
}

#[derive(Serialize)]
struct RefgenVerdict<'a> {
    status: &'a str,
    period: usize,
    x_r0: Vec<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    feasibility_residual: f64,
    files: Vec<PathBuf>,
}

fn cmd_refgen(cli: &Cli) -> CliResult<u8> {
    let Loaded { file, base_dir } = load(cli)?;
    if !matches!(file.reference.mode, ReferenceMode::Generate | ReferenceMode::Optimize) {
        return Err(Failure::config("refgen needs reference.mode = \"generate\" or \"optimize\""));
    }
    let build = build_reference(&file, &base_dir)?;
    let dir = output_dir(cli, &file)?;
    let json_path = dir.join("reference.json");
    let csv_path = dir.join("reference.csv");
    write(&json_path, &to_json(&build))?;
    write(&csv_path, &reference_csv(&build.trajectory))?;

    let traj = &build.trajectory;
    let cert = traj.certificate.as_ref();
    let verdict = RefgenVerdict {
        status: if traj.is_certified() { "certified" } else { "uncertified" },
        period: traj.period(),
        x_r0: traj.state_at(0).iter().copied().collect(),
        alpha: cert.map(|c| c.alpha),
        beta: cert.map(|c| c.beta),
        feasibility_residual: traj.feasibility_residual,
        files: vec![json_path, csv_path],
    };
    if cli.json {
        print!("{}", to_json(&verdict));
    } else {
        println!(
            "{}: period {}, x_r(0) = {:?}, alpha = {}, beta = {}, feasibility residual {:.3e}",
            verdict.status,
            verdict.period,
            verdict.x_r0,
            verdict.alpha.map_or("n/a".into(), |a| format!("{a:.6e}")),
            verdict.beta.map_or("n/a".into(), |b| format!("{b:.6e}")),
            verdict.feasibility_residual
        );
    }
    Ok(if traj.is_certified() { EXIT_OK } else { EXIT_FAILED })
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> CliResult<u8> {
    let Loaded { mut file, base_dir } = load(cli)?;
    if args.no_noise {
        file.model.w_bar = 0.0;
    }
    if args.fixed_theta {
        file.sim.fixed_theta = true;
    }
    if args.allow_uncertified {
        file.sim.allow_uncertified = true;
    }
    if let Some(steps) = args.steps {
        file.sim.steps = steps;
    }
    file.validate().map_err(Failure::from)?;
    let build = build_reference(&file, &base_dir)?;
    let config = file.experiment_with(build.trajectory)?;
    let outcome = closed_loop::run(&config).map_err(|e| match e {
        Error::UncertifiedReference => Failure::failed(format!("{e}; pass --allow-uncertified to run anyway")),
        e => Failure::from(e),
    })?;
    let summary = outcome.summary(&config);
    let dir = output_dir(cli, &file)?;
    if file.output.formats.contains(&OutputFormat::Csv) {
        write(&dir.join("trace.csv"), &outcome.trace.to_csv())?;
    }
    if file.output.formats.contains(&OutputFormat::Json) {
        write(&dir.join("summary.json"), &to_json(&summary))?;
    }
    if cli.json {
        print!("{}", to_json(&summary));
    } else {
        print_summary(&outcome.trace, &summary);
    }
    Ok(if outcome.abort.is_some() { EXIT_FAILED } else { EXIT_OK })
}

fn print_summary(trace: &SimTrace, s: &closed_loop::RunSummary) {
    if let Some(reason) = &s.aborted {
        println!("aborted after {} steps: {reason}", s.steps_completed);
    }
    println!(
        "{} steps, seed {}: |theta err| final {:.4e}, steady-state {:.4e}; tracking error last window {:.4e}, last 50 {:.4e}; k_PE {}; worst window lambda_min {}",
        trace.rows.len(),
        s.seed,
        s.final_theta_error,
        s.steady_state_theta_error,
        s.mean_tracking_error_last_window,
        s.mean_tracking_error_last_50,
        s.k_pe.map_or("none".into(), |k| k.to_string()),
        s.worst_window_lambda_min.map_or("n/a".into(), |l| format!("{l:.4e}")),
    );
}

fn cmd_check(cli: &Cli) -> CliResult<u8> {
    let Loaded { file, .. } = load(cli)?;
    let model = file.build_model()?;
    let eq = file.equilibrium(&model)?;
    let report = check::check_model(&model, &eq)?;
    if cli.json {
        print!("{}", to_json(&report));
    } else {
        println!("{}", report.render());
    }
    Ok(EXIT_OK)
}

/// Quantiles of one metric over the successful runs of a grid point.
#[derive(Debug, Clone, Serialize)]
pub struct Spread {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        Self {
            q25: quantile(values, 0.25),
            median: quantile(values, 0.5),
            q75: quantile(values, 0.75),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPointSummary {
    /// Grid overrides, seed excluded.
    pub point: Overrides,
    pub runs: usize,
    pub failures: usize,
    pub steady_state_theta_error: Spread,
    pub final_theta_error: Spread,
    pub mean_tracking_error_last_window: Spread,
    pub worst_window_lambda_min: Spread,
}

fn point_key(point: &[(String, serde_json::Value)]) -> String {
    point
        .iter()
        .map(|(p, v)| format!("{p}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Groups sweep rows by grid point, in first-seen order.
pub fn aggregate(rows: &[SweepRow]) -> Vec<GridPointSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Overrides, Vec<&SweepRow>)> = BTreeMap::new();
    for row in rows {
        let point: Vec<_> = row.overrides.iter().filter(|(p, _)| p != "sim.seed").cloned().collect();
        let key = point_key(&point);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_insert_with(|| (point, Vec::new())).1.push(row);
    }
    order
        .into_iter()
        .map(|key| {
            let (point, members) = groups.remove(&key).expect("grouped");
            let ok: Vec<_> = members
                .iter()
                .filter(|r| r.error.is_none())
                .filter_map(|r| r.summary.as_ref())
                .collect();
            let metric = |f: &dyn Fn(&closed_loop::RunSummary) -> f64| Spread::of(&ok.iter().map(|s| f(s)).collect::<Vec<_>>());
            GridPointSummary {
                runs: members.len(),
                failures: members.len() - ok.len(),
                steady_state_theta_error: metric(&|s| s.steady_state_theta_error),
                final_theta_error: metric(&|s| s.final_theta_error),
                mean_tracking_error_last_window: metric(&|s| s.mean_tracking_error_last_window),
                worst_window_lambda_min: metric(&|s| s.worst_window_lambda_min.unwrap_or(f64::NAN)),
                point,
            }
        })
        .collect()
}

/// Per-run sweep table.
pub fn sweep_csv(rows: &[SweepRow]) -> CliResult<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let fail = |e: csv::Error| Failure::failed(e.to_string());
    writer
        .write_record([
            "index",
            "overrides",
            "status",
            "final_theta_error",
            "steady_state_theta_error",
            "mean_tracking_error_last_window",
            "mean_tracking_error_last_50",
            "k_pe",
            "worst_window_lambda_min",
            "error",
        ])
        .map_err(fail)?;
    for row in rows {
        let s = row.summary.as_ref();
        let record = [
            row.index.to_string(),
            point_key(&row.overrides),
            if row.error.is_none() { "ok" } else { "failed" }.to_string(),
            opt(s.map(|s| s.final_theta_error)),
            opt(s.map(|s| s.steady_state_theta_error)),
            opt(s.map(|s| s.mean_tracking_error_last_window)),
            opt(s.map(|s| s.mean_tracking_error_last_50)),
            s.and_then(|s| s.k_pe).map(|k| k.to_string()).unwrap_or_default(),
            opt(s.and_then(|s| s.worst_window_lambda_min)),
            row.error.clone().unwrap_or_default(),
        ];
        writer.write_record(&record).map_err(fail)?;
    }
    let bytes = writer.into_inner().map_err(|e| Failure::failed(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> CliResult<u8> {
    let Loaded { file, base_dir } = load(cli)?;
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
            SweepSpec::from_toml_str(&text)?
        }
        None => SweepSpec::from_toml_str("")?,
    };
    let mut spec = spec;
    if let Some(seed) = cli.seed {
        spec.base_seed = Some(seed);
    }
    let runs = spec.expand(file.sim.seed);
    // Bad paths or values are configuration errors, caught before any run.
    for overrides in &runs {
        let mut f = file.clone();
        for (path, value) in overrides {
            f = f.with_override(path, value)?;
        }
    }
    let rows = closed_loop::sweep(&file, &base_dir, &runs);
    let summary = aggregate(&rows);
    let dir = output_dir(cli, &file)?;
    write(&dir.join("sweep.csv"), &sweep_csv(&rows)?)?;
    write(&dir.join("sweep_summary.json"), &to_json(&summary))?;
    if cli.json {
        print!("{}", to_json(&summary));
    } else {
        println!("point,runs,failures,steady_theta_err_q25,median,q75,final_theta_err_median,tracking_err_median");
        for g in &summary {
            println!(
                "{},{},{},{:.4e},{:.4e},{:.4e},{:.4e},{:.4e}",
                if g.point.is_empty() { "(base)".to_string() } else { point_key(&g.point) },
                g.runs,
                g.failures,
                g.steady_state_theta_error.q25,
                g.steady_state_theta_error.median,
                g.steady_state_theta_error.q75,
                g.final_theta_error.median,
                g.mean_tracking_error_last_window.median
            );
        }
    }
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        eprintln!("{failures} of {} runs failed; see sweep.csv", rows.len());
    }
    Ok(if failures == rows.len() { EXIT_FAILED } else { EXIT_OK })
}
