use safe_esc::dynamics::{
    integrate_averaged, integrate_model_based, integrate_model_free, integrate_unconstrained_baseline,
    IntegratorConfig, Trajectory,
};
use safe_esc::scenarios::builtin;

fn lengths_agree(traj: &Trajectory) {
    let n = traj.times.len();
    assert!(n > 1);
    for len in [
        traj.estimate.len(),
        traj.probe.len(),
        traj.cost.len(),
        traj.nominal_cost.len(),
        traj.barrier.len(),
        traj.barrier_estimate.len(),
    ] {
        assert_eq!(len, n);
    }
}

#[test]
fn barrier_rate_along_model_based_flow_matches_lie_derivative() {
    let s = builtin("interior-ball").unwrap();
    let k = s.esc.gain();
    let dt = 1e-3;
    let cfg = IntegratorConfig::new(dt, 2.0, 0.0).unwrap();
    let traj = integrate_model_based(&s.problem, k, &cfg, &s.initial_estimate).unwrap();
    lengths_agree(&traj);
    for i in (1..traj.len() - 1).step_by(97) {
        let rate = (traj.barrier[i + 1] - traj.barrier[i - 1]) / (2.0 * dt);
        let lie = s.problem.barrier_lie_derivative(&traj.estimate[i], k).unwrap();
        assert!((rate - lie).abs() <= 1e-3 * lie.abs().max(1e-6), "t {}: {rate} vs {lie}", traj.times[i]);
    }
}

#[test]
fn halving_the_step_leaves_the_model_based_state_unchanged() {
    let s = builtin("interior-ball").unwrap();
    let k = s.esc.gain();
    let coarse = IntegratorConfig::new(1e-3, 5.0, 0.0).unwrap();
    let fine = IntegratorConfig::new(5e-4, 5.0, 0.0).unwrap();
    let a = integrate_model_based(&s.problem, k, &coarse, &s.initial_estimate).unwrap();
    let b = integrate_model_based(&s.problem, k, &fine, &s.initial_estimate).unwrap();
    let diff = (a.final_estimate().unwrap() - b.final_estimate().unwrap()).norm();
    assert!(diff < 1e-6, "diff {diff}");
    assert!((a.final_time().unwrap() - b.final_time().unwrap()).abs() < 1e-12);
}

#[test]
fn every_layer_is_deterministic_and_records_aligned_columns() {
    let s = builtin("paper-1d").unwrap();
    let cfg = IntegratorConfig::new(1e-3, 5.0, 0.0).unwrap().recording_every(10);
    let runs: [fn(&safe_esc::scenarios::Scenario, &IntegratorConfig) -> Trajectory; 4] = [
        |s, c| integrate_model_free(&s.problem, &s.esc, c, &s.initial_estimate).unwrap(),
        |s, c| integrate_unconstrained_baseline(&s.problem, &s.esc, c, &s.initial_estimate).unwrap(),
        |s, c| integrate_averaged(&s.problem, &s.esc, c, &s.initial_estimate).unwrap(),
        |s, c| integrate_model_based(&s.problem, s.esc.gain(), c, &s.initial_estimate).unwrap(),
    ];
    for run in runs {
        let first = run(&s, &cfg);
        let second = run(&s, &cfg);
        lengths_agree(&first);
        assert_eq!(first.len(), cfg.steps() / 10 + 1);
        let mut a = Vec::new();
        let mut b = Vec::new();
        first.write_csv(&mut a).unwrap();
        second.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(first.min_barrier_probe.to_bits(), second.min_barrier_probe.to_bits());
    }
}

#[test]
fn model_based_flow_settles_at_the_modified_minimizer() {
    // 1D: Ĵ' = 2θ + 3/(−θ − 1) = 0 gives θ = (−1 − √7)/2.
    let s = builtin("paper-1d").unwrap();
    let cfg = IntegratorConfig::new(1e-2, 200.0, 0.0).unwrap();
    let traj = integrate_model_based(&s.problem, s.esc.gain(), &cfg, &s.initial_estimate).unwrap();
    let expected = (-1.0 - 7f64.sqrt()) / 2.0;
    let last = traj.final_estimate().unwrap();
    assert!((last[0] - expected).abs() < 1e-8, "{last} vs {expected}");
    assert_eq!(last.len(), 1);
    assert!(traj.min_barrier_estimate > 0.0);
}
