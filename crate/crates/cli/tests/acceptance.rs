//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use safe_esc::analysis::{
    derivative_check, margin_constants, orthogonality_error, proximity_study, same_safe_component,
    sequential_tuning_study, solve_equilibrium, verify_repulsion, AnalysisBox, EquilibriumMode, TuningPoint,
};
use safe_esc::dynamics::{
    default_quad_points, integrate_averaged, integrate_model_based, integrate_model_free,
    integrate_unconstrained_baseline, IntegratorConfig, Trajectory,
};
use safe_esc::scenarios::{builtin, Scenario, BUILTIN_NAMES};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn scenario(name: &str) -> Scenario {
    builtin(name).expect("builtin scenario")
}

fn orthogonality() -> Outcome {
    let mut worst: f64 = 0.0;
    for name in BUILTIN_NAMES {
        let d = scenario(name).esc.dither().clone();
        worst = worst.max(orthogonality_error(&d, default_quad_points(&d)));
    }
    outcome(worst < 1e-8, format!("max |(1/T)∫ s mᵀ − I/a| = {worst:.3e} (< 1e-8)"))
}

fn derivative_consistency() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in BUILTIN_NAMES {
        let s = scenario(name);
        let points = s.sample_safe_points(100, 2024, 1e-3);
        let d = derivative_check(&s.problem, &points).expect("safe samples");
        ok &= points.len() == 100 && d.gradient_max_rel_error < 1e-5 && d.hessian_max_rel_error < 1e-4;
        parts.push(format!(
            "{name}: grad {:.1e}, hess {:.1e} ({} smooth)",
            d.gradient_max_rel_error, d.hessian_max_rel_error, d.smooth_points
        ));
    }
    outcome(ok, parts.join("; "))
}

fn one_d_reproduction() -> Outcome {
    let s = scenario("paper-1d");
    let target = (-1.0 - 7.0_f64.sqrt()) / 2.0;
    let esc = integrate_model_free(&s.problem, &s.esc, &s.integrator, &s.initial_estimate);
    let base = integrate_unconstrained_baseline(&s.problem, &s.esc, &s.integrator, &s.initial_estimate)
        .expect("baseline never halts");
    match esc {
        Ok(t) => {
            let fin = t.final_estimate().unwrap()[0];
            let ok = t.min_barrier_probe > 0.0 && (fin - target).abs() < 0.3 && base.min_barrier_probe < 0.0;
            outcome(
                ok,
                format!(
                    "min h(probe) = {:.4}, final θ̂ = {fin:.4} (target {target:.4} ± 0.3), baseline min h = {:.4}",
                    t.min_barrier_probe, base.min_barrier_probe
                ),
            )
        }
        Err(e) => outcome(false, format!("model-free run failed: {e}")),
    }
}

fn model_free(s: &Scenario) -> Result<Trajectory, String> {
    integrate_model_free(&s.problem, &s.esc, &s.integrator, &s.initial_estimate).map_err(|e| e.to_string())
}

fn corridor_reproduction() -> Outcome {
    let s = scenario("paper-2d-corridor");
    match model_free(&s) {
        Ok(t) => {
            let d = s.esc.dither();
            let a_r = d.amplitude() * d.amplitude_bound();
            let offset = (t.final_estimate().unwrap() - s.theta_star()).norm();
            let ok = t.min_barrier_probe > 0.0 && t.min_barrier_estimate > 0.0 && offset >= a_r;
            outcome(
                ok,
                format!(
                    "min h(probe) = {:.4}, offset from θ* = {offset:.4} (≥ a·R = {a_r:.4})",
                    t.min_barrier_probe
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn trig_reproduction() -> Outcome {
    let s = scenario("paper-2d-trig");
    match model_free(&s) {
        Ok(t) => {
            let fin = t.final_estimate().unwrap().clone();
            let eq = match solve_equilibrium(&s.problem, &fin, &EquilibriumMode::ModelBased) {
                Ok(eq) => eq,
                Err(e) => return outcome(false, format!("equilibrium solve failed: {e}")),
            };
            // The safe cell holding the start: cos > 0 on |θ₁| < 2.5, sin > 0 on θ₂ ∈ (−20/3, −10/3).
            let cell = AnalysisBox::new(vec![-2.6, -6.8], vec![2.6, -3.2], 105).unwrap();
            let same = same_safe_component(s.problem.barrier(), &cell, &s.initial_estimate, &eq);
            let dist = (&fin - &eq).norm();
            let ok = t.min_barrier_probe > 0.0 && t.min_barrier_estimate > 0.0 && same && dist <= 1.0;
            outcome(
                ok,
                format!(
                    "min h(probe) = {:.4}, ‖θ̂(T) − θ̂_μ‖ = {dist:.4} (≤ 1.0), equilibrium in start component: {same}",
                    t.min_barrier_probe
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn proximity_scaling() -> Outcome {
    let s = scenario("interior-ball");
    let r = match proximity_study(&s.problem, &[0.2, 0.1, 0.05, 0.025]) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("proximity study failed: {e}")),
    };
    let order_ok = r.order_within(0.85, 1.15);
    let settles = r.direction_error_settles();
    let inward = r.pushes_inward();
    let e = &r.predicted_direction_error;
    outcome(
        order_ok && settles && inward,
        format!(
            "fitted order {:.4} (in [0.85, 1.15]: {order_ok}); direction error {:?}, nonincreasing over the two smallest μ: {settles}; h(θ̂_μ) > h(θ*): {inward}",
            r.fitted_order.unwrap_or(f64::NAN),
            e.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn repulsion() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in BUILTIN_NAMES {
        let s = scenario(name);
        let mc = match margin_constants(&s.problem, &s.analysis_box, s.h_floor()) {
            Ok(mc) => mc,
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: margin failed: {e}"));
                continue;
            }
        };
        let rep = verify_repulsion(&s.problem, &mc, &s.analysis_box, s.esc.gain()).unwrap();
        ok &= rep.passed && rep.samples > 0 && rep.witnesses.is_empty();
        parts.push(format!("{name}: {} samples, {} failures", rep.samples, rep.failures));
    }
    let s = scenario("paper-1d");
    let mc = margin_constants(&s.problem, &s.analysis_box, s.h_floor()).unwrap();
    let weak = s.problem.with_mu(1e-6).unwrap();
    let rep = verify_repulsion(&weak, &mc, &s.analysis_box, s.esc.gain()).unwrap();
    ok &= !rep.witnesses.is_empty();
    parts.push(format!("paper-1d at μ=1e-6: {} witnesses", rep.failures));
    outcome(ok, parts.join("; "))
}

fn lyapunov_descent() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in BUILTIN_NAMES {
        let s = scenario(name);
        let starts = s.sample_safe_points(20, 99, 0.05);
        let cfg = IntegratorConfig::new(0.01, s.integrator.horizon.min(1000.0), 0.0).unwrap();
        let mut worst = f64::NEG_INFINITY;
        let mut failures = 0;
        for x0 in &starts {
            match integrate_model_based(&s.problem, s.esc.gain(), &cfg, x0) {
                Ok(t) => {
                    let inc = t.cost.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
                    if inc > 1e-8 {
                        failures += 1;
                    }
                    worst = worst.max(inc);
                }
                Err(_) => failures += 1,
            }
        }
        ok &= starts.len() == 20 && failures == 0;
        parts.push(format!("{name}: worst step increase {worst:.2e}, {failures}/20 starts fail"));
    }
    outcome(ok, parts.join("; "))
}

fn sup_error(a: &Trajectory, b: &Trajectory) -> f64 {
    a.times
        .iter()
        .zip(&a.estimate)
        .map(|(t, x)| (x - b.estimate_near(*t).expect("overlapping horizons")).norm())
        .fold(0.0, f64::max)
}

fn averaging_orders() -> Outcome {
    let s = scenario("paper-1d");
    let coarse = IntegratorConfig::new(0.01, s.integrator.horizon, 0.0).unwrap();
    let mb = integrate_model_based(&s.problem, s.esc.gain(), &coarse, &s.initial_estimate).unwrap();
    let mut in_a = Vec::new();
    for a in [0.2, 0.1, 0.05] {
        let esc = s.esc.with_dither(s.esc.dither().with_amplitude(a).unwrap());
        let av = integrate_averaged(&s.problem, &esc, &coarse, &s.initial_estimate).unwrap();
        in_a.push(sup_error(&av, &mb));
    }
    let orders: Vec<f64> = in_a.windows(2).map(|w| (w[0] / w[1]).log2()).collect();

    let av = integrate_averaged(&s.problem, &s.esc, &coarse, &s.initial_estimate).unwrap();
    let mut in_omega = Vec::new();
    for omega in [15.0, 30.0, 60.0] {
        let esc = s.esc.with_dither(s.esc.dither().with_base_rate(omega).unwrap());
        let mf = integrate_model_free(&s.problem, &esc, &s.integrator.resolving(esc.dither()), &s.initial_estimate)
            .unwrap();
        in_omega.push(sup_error(&av, &mf));
    }
    let ok = orders.iter().all(|&p| p >= 1.0) && in_omega.windows(2).all(|w| w[1] < w[0]);
    outcome(
        ok,
        format!(
            "averaged vs model-based sup errors {:?}, orders {:?} (≥ 1); model-free vs averaged sup errors for ω=15,30,60: {:?}",
            in_a.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>(),
            orders.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>(),
            in_omega.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>()
        ),
    )
}

fn sequential_tuning() -> Outcome {
    let s = scenario("interior-ball");
    let schedule = [
        TuningPoint { mu: 0.4, a: 0.2, omega: 50.0 },
        TuningPoint { mu: 0.2, a: 0.1, omega: 100.0 },
        TuningPoint { mu: 0.1, a: 0.05, omega: 200.0 },
    ];
    let rows = sequential_tuning_study(&s.problem, &s.esc, &s.integrator, &s.initial_estimate, &schedule, 3).unwrap();
    let errors: Vec<f64> = rows.iter().map(|r| r.asymptotic_error).collect();
    let ok = errors.windows(2).all(|w| w[1] < w[0]) && rows.iter().all(|r| !r.breached && r.min_h > 0.0);
    outcome(
        ok,
        format!(
            "asymptotic errors {:?}, min h {:?}",
            errors.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            rows.iter().map(|r| format!("{:.3}", r.min_h)).collect::<Vec<_>>()
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_safe-esc"))
            .args(["run", "paper-1d", "--out"])
            .arg(&out)
            .output()
            .expect("binary runs")
            .status
            .code()
            .unwrap_or(-1)
    };
    let c1 = run();
    let first = snapshot(&out);
    let c2 = run();
    let second = snapshot(&out);
    let ok = c1 == 0 && c2 == 0 && first.len() >= 5 && first == second;
    outcome(
        ok,
        format!("exit codes {c1}, {c2}; {} files compared byte for byte", first.len()),
    )
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("orthogonality", Duration::from_secs(1), orthogonality),
        ("gradient/hessian consistency", Duration::from_secs(5), derivative_consistency),
        ("1d reproduction", Duration::from_secs(5), one_d_reproduction),
        ("2d reproduction: trig field", Duration::from_secs(60), trig_reproduction),
        ("2d reproduction: corridor", Duration::from_secs(60), corridor_reproduction),
        ("equilibrium proximity scaling", Duration::from_secs(10), proximity_scaling),
        ("repulsion inequality", Duration::from_secs(10), repulsion),
        ("lyapunov descent", Duration::from_secs(20), lyapunov_descent),
        ("averaging orders", Duration::from_secs(30), averaging_orders),
        ("sequential tuning", Duration::from_secs(60), sequential_tuning),
        ("determinism", Duration::from_secs(60), determinism),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let passed = result.passed && in_time;
        if !passed {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.2}s / {}s{}]",
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time limit" }
        );
    }
    println!("acceptance: {} of {} criteria passed", 11 - failed, 11);
    if failed > 0 {
        std::process::exit(1);
    }
}
