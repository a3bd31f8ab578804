//! `safe-esc` command-line driver: `run`, `verify` and `sweep` over builtin
//! or JSON scenarios. Every command writes its results as files under `--out`
//! beginning with `manifest.json`; stdout only carries one summary line per item.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use safe_esc::analysis::{
    asymptotic_error, derivative_check, margin_constants, orthogonality_error, parallel_rows,
    proximity_study, same_safe_component, sequential_tuning_study, verify_repulsion, BreachEvent,
    DerivativeCheck, MarginConstants, ProximityReport, RepulsionReport, RunParameters, SafetyReport,
    TuningPoint, TuningRow,
};
use safe_esc::dynamics::{
    default_quad_points, integrate_averaged, integrate_model_based, integrate_model_free,
    integrate_unconstrained_baseline, DynamicsError, IntegratorConfig, Layer, Trajectory,
};
use safe_esc::scenarios::{resolve, Overrides, Scenario};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BREACH: i32 = 2;
/// `verify` exit code when a check fails.
pub const EXIT_CHECK_FAILED: i32 = 3;

pub const ORTHOGONALITY_TOL: f64 = 1e-8;
const DERIVATIVE_SAMPLES: usize = 100;
const DERIVATIVE_SEED: u64 = 0x5afe;

#[derive(Debug, Parser)]
#[command(name = "safe-esc", version, about = "Safe extremum seeking with a logarithmic barrier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the selected layers and write one CSV per layer plus safety_report.json.
    Run(RunArgs),
    /// Check orthogonality, derivatives, margin, repulsion and proximity; write verification.json.
    Verify(CommonArgs),
    /// Evaluate the model-free loop over a (mu, a, omega) grid; write sweep.csv.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Builtin name (paper-1d, paper-2d-trig, paper-2d-corridor, interior-ball) or path to a scenario JSON file.
    pub scenario: String,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

/// Each flag replaces the corresponding scenario field; unset flags keep the scenario value.
#[derive(Debug, Clone, Copy, Default, Args)]
pub struct OverrideArgs {
    /// Barrier weight; 0 runs every layer without the barrier.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Dither amplitude.
    #[arg(long)]
    pub a: Option<f64>,
    /// Base dither frequency.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Adaptation gain.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// RK4 step; refined automatically when too coarse for the dither.
    #[arg(long)]
    pub step: Option<f64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(o: OverrideArgs) -> Self {
        Overrides {
            mu: o.mu,
            a: o.a,
            omega: o.omega,
            k: o.k,
            horizon: o.horizon,
            step: o.step,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated layers; defaults to model-free, averaged, model-based and the scenario baselines.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<Layer>,
    /// Worker threads for independent layers.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Ordered schedule `mu:a:omega,...`, jointly shrinking in (mu, a, 1/omega). Excludes the value lists.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["mu_values", "a_values", "omega_values"])]
    pub schedule: Vec<String>,
    /// Grid values for mu (cartesian product with the other lists).
    #[arg(long, value_delimiter = ',')]
    pub mu_values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub a_values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub omega_values: Vec<f64>,
    /// Rows integrated concurrently.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub out_dir: String,
    pub deterministic: bool,
    pub version: String,
    pub overrides: ManifestOverrides,
}

#[derive(Debug, Serialize)]
pub struct ManifestOverrides {
    pub mu: Option<f64>,
    pub a: Option<f64>,
    pub omega: Option<f64>,
    pub k: Option<f64>,
    pub horizon: Option<f64>,
    pub step: Option<f64>,
}

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    execute(&cli.command)
}

pub fn execute(command: &Command) -> i32 {
    let (name, common) = match command {
        Command::Run(a) => ("run", &a.common),
        Command::Verify(a) => ("verify", a),
        Command::Sweep(a) => ("sweep", &a.common),
    };
    if let Err(e) = write_manifest(name, common) {
        eprintln!("error: {e:#}");
        return EXIT_CONFIG;
    }
    let result = match command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let report = serde_json::json!({ "command": name, "error": format!("{e:#}") });
            let _ = write_json(&common.out.join("error.json"), &report);
            EXIT_CONFIG
        }
    }
}

fn write_manifest(command: &str, common: &CommonArgs) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let o = common.overrides;
    let manifest = RunManifest {
        command: command.to_string(),
        scenario: common.scenario.clone(),
        out_dir: common.out.display().to_string(),
        deterministic: true,
        version: env!("CARGO_PKG_VERSION").to_string(),
        overrides: ManifestOverrides {
            mu: o.mu,
            a: o.a,
            omega: o.omega,
            k: o.k,
            horizon: o.horizon,
            step: o.step,
        },
    };
    write_json(&common.out.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_scenario(common: &CommonArgs) -> Result<Scenario> {
    let base = resolve(&common.scenario).with_context(|| format!("resolving scenario `{}`", common.scenario))?;
    Ok(base.with_overrides(&common.overrides.into())?)
}

fn run_parameters(s: &Scenario, cfg: &IntegratorConfig) -> RunParameters {
    RunParameters {
        mu: s.problem.mu(),
        a: s.esc.dither().amplitude(),
        omega: s.esc.dither().base_rate(),
        k: s.esc.gain(),
        step: cfg.step,
        horizon: cfg.horizon,
    }
}

pub fn csv_file_name(layer: Layer) -> String {
    format!("{}.csv", layer.name().replace('-', "_"))
}

/// Layer integration settings. Layers without a dither reuse the recorded
/// time grid of the model-free layer as their step.
pub fn layer_config(s: &Scenario, layer: Layer) -> IntegratorConfig {
    let fitted = s.integrator.resolving(s.esc.dither());
    match layer {
        Layer::ModelFree | Layer::UnconstrainedBaseline => fitted,
        Layer::Averaged | Layer::ModelBased => IntegratorConfig {
            step: fitted.step * fitted.record_every as f64,
            record_every: 1,
            ..fitted
        },
    }
}

fn integrate(s: &Scenario, layer: Layer, cfg: &IntegratorConfig) -> Result<Trajectory, DynamicsError> {
    let x0 = &s.initial_estimate;
    match layer {
        Layer::ModelFree => integrate_model_free(&s.problem, &s.esc, cfg, x0),
        Layer::UnconstrainedBaseline => integrate_unconstrained_baseline(&s.problem, &s.esc, cfg, x0),
        Layer::Averaged => integrate_averaged(&s.problem, &s.esc, cfg, x0),
        Layer::ModelBased => integrate_model_based(&s.problem, s.esc.gain(), cfg, x0),
    }
}

struct LayerOutcome {
    report: SafetyReport,
    trajectory: Trajectory,
}

fn run_layer(s: &Scenario, layer: Layer, margin: Option<MarginConstants>) -> Result<LayerOutcome> {
    let cfg = layer_config(s, layer);
    let (trajectory, breach) = match integrate(s, layer, &cfg) {
        Ok(t) => (t, None),
        Err(DynamicsError::SafetyBreach(b)) => {
            let event = BreachEvent {
                time: b.time,
                estimate: b.estimate.iter().copied().collect(),
                probe: b.probe.iter().copied().collect(),
                h: b.h,
                diverged: b.diverged,
            };
            (b.trajectory, Some(event))
        }
        Err(e) => return Err(e).with_context(|| format!("integrating the {layer} layer")),
    };
    let (min_h_probe, min_h_estimate) = match &breach {
        Some(b) => (
            if b.h.is_nan() { trajectory.min_barrier_probe } else { trajectory.min_barrier_probe.min(b.h) },
            trajectory.min_barrier_estimate,
        ),
        None => (trajectory.min_barrier_probe, trajectory.min_barrier_estimate),
    };
    let asymptotic = (matches!(layer, Layer::ModelFree) && breach.is_none())
        .then(|| asymptotic_error(&trajectory, s.theta_star(), &cfg));
    let report = SafetyReport {
        scenario: s.name.clone(),
        layer,
        parameters: run_parameters(s, &cfg),
        min_h_probe,
        min_h_estimate,
        breach,
        final_estimate: trajectory
            .final_estimate()
            .map(|e| e.iter().copied().collect())
            .unwrap_or_default(),
        asymptotic_error: asymptotic,
        margin,
    };
    Ok(LayerOutcome { report, trajectory })
}

#[derive(Debug, Serialize)]
struct RunReport {
    scenario: String,
    layers: Vec<SafetyReport>,
    /// Breaches in layers that enforce safety.
    safety_breached: bool,
    exit_code: i32,
}

fn default_layers(s: &Scenario) -> Vec<Layer> {
    let mut layers = vec![Layer::ModelFree, Layer::Averaged, Layer::ModelBased];
    for b in &s.baselines {
        if !layers.contains(b) {
            layers.push(*b);
        }
    }
    layers
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

pub fn cmd_run(args: &RunArgs) -> Result<i32> {
    let s = load_scenario(&args.common)?;
    let mut layers = if args.layers.is_empty() { default_layers(&s) } else { args.layers.clone() };
    layers.dedup();
    let margin = margin_constants(&s.problem, &s.analysis_box, s.h_floor()).ok();

    let outcomes: Vec<Result<LayerOutcome>> =
        pool(args.jobs)?.install(|| layers.par_iter().map(|&l| run_layer(&s, l, margin)).collect());
    let mut reports = Vec::new();
    for outcome in outcomes {
        let LayerOutcome { report, trajectory } = outcome?;
        let path = args.common.out.join(csv_file_name(report.layer));
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        trajectory.write_csv(&mut w)?;
        w.flush()?;
        println!("{}", summary_line(&report));
        reports.push(report);
    }
    let breached = reports.iter().any(|r| r.layer.enforces_safety() && r.breach.is_some());
    let exit_code = if breached { EXIT_BREACH } else { EXIT_OK };
    write_json(
        &args.common.out.join("safety_report.json"),
        &RunReport {
            scenario: s.name.clone(),
            layers: reports,
            safety_breached: breached,
            exit_code,
        },
    )?;
    Ok(exit_code)
}

fn summary_line(r: &SafetyReport) -> String {
    let fmt_vec = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ");
    let mut line = format!(
        "{}: min_h_probe={:.6e} min_h_estimate={:.6e} final=[{}]",
        r.layer,
        r.min_h_probe,
        r.min_h_estimate,
        fmt_vec(&r.final_estimate)
    );
    if let Some(b) = &r.breach {
        line.push_str(&format!(" BREACH at t={:.6}", b.time));
        if !r.layer.enforces_safety() {
            line.push_str(" (baseline, expected)");
        }
    }
    line
}

#[derive(Debug, Serialize)]
pub struct Check<T: Serialize> {
    pub applicable: bool,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<T>,
}

impl<T: Serialize> Check<T> {
    fn ran(passed: bool, details: T) -> Self {
        Self {
            applicable: true,
            passed,
            reason: None,
            details: Some(details),
        }
    }

    fn failed(reason: String) -> Self {
        Self {
            applicable: true,
            passed: false,
            reason: Some(reason),
            details: None,
        }
    }

    fn skipped(reason: &str) -> Self {
        Self {
            applicable: false,
            passed: true,
            reason: Some(reason.to_string()),
            details: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct OrthogonalityDetails {
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub quad_points: usize,
}

#[derive(Debug, Serialize)]
pub struct ProximityDetails {
    pub report: ProximityReport,
    pub fitted_order_in_range: bool,
    pub pushes_inward: bool,
    pub direction_error_bounded: bool,
    pub direction_error_nonincreasing: bool,
}

#[derive(Debug, Serialize)]
pub struct VerificationReport {
    pub scenario: String,
    pub parameters: RunParameters,
    pub constants: Option<MarginConstants>,
    pub orthogonality: Check<OrthogonalityDetails>,
    pub derivatives: Check<DerivativeCheck>,
    pub margin: Check<MarginConstants>,
    pub repulsion: Check<RepulsionReport>,
    pub proximity: Check<ProximityDetails>,
    pub passed: bool,
}

/// Small enough for the first-order law to dominate on every builtin.
pub const PROXIMITY_MU_SCHEDULE: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

pub const PROXIMITY_SKIP_REASON: &str = "θ* not interior to tested component";

pub fn verification_report(s: &Scenario) -> Result<VerificationReport> {
    let dither = s.esc.dither();
    let quad_points = default_quad_points(dither);
    let ortho_err = orthogonality_error(dither, quad_points);
    let orthogonality = Check::ran(
        ortho_err < ORTHOGONALITY_TOL,
        OrthogonalityDetails {
            max_abs_error: ortho_err,
            tolerance: ORTHOGONALITY_TOL,
            quad_points,
        },
    );

    let points = s.sample_safe_points(DERIVATIVE_SAMPLES, DERIVATIVE_SEED, 1e-3);
    let derivatives = match derivative_check(&s.problem, &points) {
        Ok(d) if points.len() == DERIVATIVE_SAMPLES => Check::ran(d.passed(), d),
        Ok(d) => Check {
            reason: Some(format!("only {} safe samples found", d.points)),
            ..Check::ran(false, d)
        },
        Err(e) => Check::failed(e.to_string()),
    };

    let margin_result = margin_constants(&s.problem, &s.analysis_box, s.h_floor());
    let (margin, repulsion, constants) = match margin_result {
        Ok(mc) => {
            let structural = 0.0 < mc.c1 && mc.c1 <= mc.c0 && mc.c0 <= s.h_floor();
            let rep = verify_repulsion(&s.problem, &mc, &s.analysis_box, s.esc.gain())?;
            let rep_ok = rep.passed && rep.samples > 0;
            (Check::ran(structural, mc), Check::ran(rep_ok, rep), Some(mc))
        }
        Err(e) => (Check::failed(e.to_string()), Check::failed("margin unavailable".into()), None),
    };

    let theta_star = s.theta_star();
    let interior = same_safe_component(s.problem.barrier(), &s.analysis_box, &s.initial_estimate, theta_star);
    let proximity = if !interior || !s.problem.barrier_enabled() {
        Check::skipped(PROXIMITY_SKIP_REASON)
    } else {
        match proximity_study(&s.problem, &PROXIMITY_MU_SCHEDULE) {
            Ok(report) => {
                let details = ProximityDetails {
                    fitted_order_in_range: report.order_within(0.85, 1.15) || report.degenerate_first_order,
                    pushes_inward: report.pushes_inward() || report.degenerate_first_order,
                    direction_error_bounded: report.predicted_direction_error.iter().all(|e| e.is_finite()),
                    direction_error_nonincreasing: report.direction_error_settles(),
                    report,
                };
                let ok = details.fitted_order_in_range && details.pushes_inward && details.direction_error_bounded;
                Check::ran(ok, details)
            }
            Err(e) => Check::failed(e.to_string()),
        }
    };

    let passed = orthogonality.passed && derivatives.passed && margin.passed && repulsion.passed && proximity.passed;
    Ok(VerificationReport {
        scenario: s.name.clone(),
        parameters: run_parameters(s, &s.integrator),
        constants,
        orthogonality,
        derivatives,
        margin,
        repulsion,
        proximity,
        passed,
    })
}

pub fn cmd_verify(args: &CommonArgs) -> Result<i32> {
    let s = load_scenario(args)?;
    let report = verification_report(&s)?;
    write_json(&args.out.join("verification.json"), &report)?;
    let flag = |applicable: bool, passed: bool| match (applicable, passed) {
        (false, _) => "skipped",
        (true, true) => "pass",
        (true, false) => "FAIL",
    };
    println!("orthogonality: {}", flag(true, report.orthogonality.passed));
    println!("derivatives: {}", flag(true, report.derivatives.passed));
    match &report.constants {
        Some(mc) => println!("margin: {} (c1={:e})", flag(true, report.margin.passed), mc.c1),
        None => println!("margin: FAIL"),
    }
    println!("repulsion: {}", flag(true, report.repulsion.passed));
    println!("proximity: {}", flag(report.proximity.applicable, report.proximity.passed));
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn parse_schedule(entries: &[String]) -> Result<Vec<TuningPoint>> {
    entries
        .iter()
        .map(|e| {
            let parts: Vec<&str> = e.split(':').collect();
            if parts.len() != 3 {
                bail!("schedule entry `{e}` must be mu:a:omega");
            }
            let num = |s: &str| s.trim().parse::<f64>().with_context(|| format!("bad number `{s}` in `{e}`"));
            Ok(TuningPoint {
                mu: num(parts[0])?,
                a: num(parts[1])?,
                omega: num(parts[2])?,
            })
        })
        .collect()
}

fn grid(s: &Scenario, args: &SweepArgs) -> Vec<TuningPoint> {
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let mus = or(&args.mu_values, s.problem.mu());
    let amps = or(&args.a_values, s.esc.dither().amplitude());
    let omegas = or(&args.omega_values, s.esc.dither().base_rate());
    let mut out = Vec::new();
    for &mu in &mus {
        for &a in &amps {
            for &omega in &omegas {
                out.push(TuningPoint { mu, a, omega });
            }
        }
    }
    out
}

pub fn sweep_rows(s: &Scenario, args: &SweepArgs) -> Result<Vec<TuningRow>> {
    let x0 = &s.initial_estimate;
    let rows = if args.schedule.is_empty() {
        parallel_rows(&s.problem, &s.esc, &s.integrator, x0, &grid(s, args), args.jobs)?
    } else {
        let schedule = parse_schedule(&args.schedule)?;
        sequential_tuning_study(&s.problem, &s.esc, &s.integrator, x0, &schedule, args.jobs)?
    };
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[TuningRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "mu,a,omega,asymptotic_error,min_h,breached")?;
    for r in rows {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.mu, r.a, r.omega, r.asymptotic_error, r.min_h, r.breached
        )?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let s = load_scenario(&args.common)?;
    let rows = sweep_rows(&s, args)?;
    let path = args.common.out.join("sweep.csv");
    let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    for r in &rows {
        println!(
            "mu={} a={} omega={}: asymptotic_error={:.6e} min_h={:.6e}{}",
            r.mu,
            r.a,
            r.omega,
            r.asymptotic_error,
            r.min_h,
            if r.breached { " BREACH" } else { "" }
        );
    }
    Ok(EXIT_OK)
}
