//! Fixed-step RK4 integration of the three ESC layers:
//!
//! * model-free: `θ̂' = −k Ĵ(θ̂ + a s(ωt)) m(ωt, a)`
//! * averaged: `θ̄' = −k ḡ(θ̄, a)` with `ḡ` the period average of the estimate
//! * model-based: `ϑ' = −k ∇Ĵ(ϑ)`
//!
//! plus the unconstrained ESC baseline, which is the model-free loop on `J`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::averaged_gradient;
use crate::objective::{ObjectiveError, Problem};
use crate::signals::DitherSpec;

/// Minimum number of RK4 steps per cycle of the fastest dither channel.
pub const STEPS_PER_DITHER_CYCLE: f64 = 40.0;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("{0}")]
    SafetyBreach(Box<SafetyBreach>),
    #[error("step {step} too large to resolve the dither, needs <= {max_step}")]
    StepTooLarge { step: f64, max_step: f64 },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("gain must be positive, got {0}")]
    InvalidGain(f64),
    #[error("dimension mismatch: problem has {problem}, got {got}")]
    DimensionMismatch { problem: usize, got: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Which dynamical layer produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layer {
    ModelFree,
    Averaged,
    ModelBased,
    #[serde(alias = "unconstrained-esc")]
    UnconstrainedBaseline,
}

impl Layer {
    pub const ALL: [Layer; 4] = [
        Layer::ModelFree,
        Layer::Averaged,
        Layer::ModelBased,
        Layer::UnconstrainedBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::ModelFree => "model-free",
            Layer::Averaged => "averaged",
            Layer::ModelBased => "model-based",
            Layer::UnconstrainedBaseline => "unconstrained-baseline",
        }
    }

    /// Whether a breach in this layer counts against the safety guarantee.
    pub fn enforces_safety(self) -> bool {
        !matches!(self, Layer::UnconstrainedBaseline)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Layer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Layer::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown layer `{s}`"))
    }
}

/// Adaptation gain `k` and the dither.
#[derive(Debug, Clone, PartialEq)]
pub struct EscParams {
    gain: f64,
    dither: DitherSpec,
}

impl EscParams {
    /// `gain = 0` is accepted to freeze the estimate; negative gains are not.
    pub fn new(gain: f64, dither: DitherSpec) -> Result<Self, DynamicsError> {
        if !(gain.is_finite() && gain >= 0.0) {
            return Err(DynamicsError::InvalidGain(gain));
        }
        Ok(Self { gain, dither })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn dither(&self) -> &DitherSpec {
        &self.dither
    }

    pub fn with_gain(&self, gain: f64) -> Result<Self, DynamicsError> {
        Self::new(gain, self.dither.clone())
    }

    pub fn with_dither(&self, dither: DitherSpec) -> Self {
        Self {
            gain: self.gain,
            dither,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub step: f64,
    pub horizon: f64,
    pub start_time: f64,
    /// Record every `record_every`-th step (safety minima still cover every step).
    pub record_every: usize,
}

impl IntegratorConfig {
    pub fn new(step: f64, horizon: f64, start_time: f64) -> Result<Self, DynamicsError> {
        let cfg = Self {
            step,
            horizon,
            start_time,
            record_every: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn recording_every(mut self, record_every: usize) -> Self {
        self.record_every = record_every.max(1);
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(DynamicsError::InvalidConfig(format!("step must be positive, got {}", self.step)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(DynamicsError::InvalidConfig(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !self.start_time.is_finite() {
            return Err(DynamicsError::InvalidConfig("start time must be finite".into()));
        }
        if self.record_every == 0 {
            return Err(DynamicsError::InvalidConfig("record_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of RK4 steps covering the horizon.
    pub fn steps(&self) -> usize {
        (self.horizon / self.step - 1e-9).ceil().max(1.0) as usize
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.step
    }

    /// Largest step resolving the fastest dither channel with
    /// [`STEPS_PER_DITHER_CYCLE`] steps per cycle.
    pub fn max_step_for(dither: &DitherSpec) -> f64 {
        2.0 * PI / dither.fastest_frequency() / STEPS_PER_DITHER_CYCLE
    }

    pub fn check_resolves(&self, dither: &DitherSpec) -> Result<(), DynamicsError> {
        let max_step = Self::max_step_for(dither);
        if self.step > max_step * (1.0 + 1e-12) {
            return Err(DynamicsError::StepTooLarge {
                step: self.step,
                max_step,
            });
        }
        Ok(())
    }

    /// Same horizon with the step shrunk, if needed, to resolve `dither`.
    pub fn resolving(&self, dither: &DitherSpec) -> Self {
        let max_step = Self::max_step_for(dither);
        if self.step <= max_step {
            return *self;
        }
        let refine = (self.step / max_step).ceil();
        Self {
            step: self.step / refine,
            record_every: self.record_every * refine as usize,
            ..*self
        }
    }
}

/// Time-indexed record of one integration.
///
/// For the averaged and model-based layers there is no dither, so the probe
/// equals the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub layer: Layer,
    pub times: Vec<f64>,
    pub estimate: Vec<DVector<f64>>,
    pub probe: Vec<DVector<f64>>,
    /// `Ĵ` at the probe (`J` for the unconstrained baseline).
    pub cost: Vec<f64>,
    /// `J` at the probe.
    pub nominal_cost: Vec<f64>,
    /// `h` at the probe.
    pub barrier: Vec<f64>,
    /// `h` at the estimate.
    pub barrier_estimate: Vec<f64>,
    /// Minimum of `h(probe)` over every integration step, recorded or not.
    pub min_barrier_probe: f64,
    /// Minimum of `h(estimate)` over every integration step.
    pub min_barrier_estimate: f64,
    /// Number of completed RK4 steps.
    pub steps_taken: usize,
}

impl Trajectory {
    fn new(layer: Layer) -> Self {
        Self {
            layer,
            times: Vec::new(),
            estimate: Vec::new(),
            probe: Vec::new(),
            cost: Vec::new(),
            nominal_cost: Vec::new(),
            barrier: Vec::new(),
            barrier_estimate: Vec::new(),
            min_barrier_probe: f64::INFINITY,
            min_barrier_estimate: f64::INFINITY,
            steps_taken: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.estimate.first().map_or(0, |v| v.len())
    }

    pub fn final_estimate(&self) -> Option<&DVector<f64>> {
        self.estimate.last()
    }

    pub fn final_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Estimate at the recorded sample closest to `t`.
    pub fn estimate_near(&self, t: f64) -> Option<&DVector<f64>> {
        let idx = self.times.partition_point(|&s| s < t);
        let best = match idx {
            0 => 0,
            i if i >= self.times.len() => self.times.len().checked_sub(1)?,
            i if (self.times[i] - t).abs() < (t - self.times[i - 1]).abs() => i,
            i => i - 1,
        };
        self.estimate.get(best)
    }

    fn track(&mut self, h_probe: f64, h_estimate: f64) {
        self.min_barrier_probe = self.min_barrier_probe.min(h_probe);
        self.min_barrier_estimate = self.min_barrier_estimate.min(h_estimate);
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        t: f64,
        estimate: DVector<f64>,
        probe: DVector<f64>,
        cost: f64,
        nominal: f64,
        h_probe: f64,
        h_estimate: f64,
    ) {
        self.times.push(t);
        self.estimate.push(estimate);
        self.probe.push(probe);
        self.cost.push(cost);
        self.nominal_cost.push(nominal);
        self.barrier.push(h_probe);
        self.barrier_estimate.push(h_estimate);
    }

    /// CSV header `t,theta_hat_1..n,theta_1..n,J,Jhat,h_probe,h_estimate`.
    pub fn csv_header(n: usize) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=n).map(|i| format!("theta_hat_{i}")));
        cols.extend((1..=n).map(|i| format!("theta_{i}")));
        cols.extend(["J", "Jhat", "h_probe", "h_estimate"].map(String::from));
        cols.join(",")
    }

    /// Writes one row per recorded step with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.dimension();
        writeln!(out, "{}", Self::csv_header(n))?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            push_num(&mut line, self.times[i]);
            for x in self.estimate[i].iter().chain(self.probe[i].iter()) {
                line.push(',');
                push_num(&mut line, *x);
            }
            for x in [self.nominal_cost[i], self.cost[i], self.barrier[i], self.barrier_estimate[i]] {
                line.push(',');
                push_num(&mut line, x);
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn push_num(buf: &mut String, x: f64) {
    use std::fmt::Write as _;
    let _ = write!(buf, "{x:.16e}");
}

/// First unsafe evaluation met during an integration, with the trajectory up to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyBreach {
    pub layer: Layer,
    pub time: f64,
    pub estimate: DVector<f64>,
    pub probe: DVector<f64>,
    pub h: f64,
    /// The state stopped being finite (finite-time escape).
    pub diverged: bool,
    pub trajectory: Trajectory,
}

impl fmt::Display for SafetyBreach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} layer left the safe set at t = {:.6} (h = {:.3e}{})",
            self.layer,
            self.time,
            self.h,
            if self.diverged { ", state diverged" } else { "" }
        )
    }
}

/// `ĝ(τ, θ̂, a) = Ĵ(θ̂ + a s(τ)) m(τ, a)`.
pub fn gradient_estimate(
    problem: &Problem,
    params: &EscParams,
    tau: f64,
    theta_hat: &DVector<f64>,
) -> Result<DVector<f64>, ObjectiveError> {
    let dither = params.dither();
    let probe = theta_hat + dither.probe_offset(tau);
    let jhat = problem.modified_cost(&probe)?;
    Ok(dither.demod(tau) * jhat)
}

/// Stage failure inside an RK4 step: time and state of the offending stage.
struct StageFailure {
    time: f64,
    state: DVector<f64>,
}

fn rk4_step<F>(t: f64, x: &DVector<f64>, dt: f64, f: &mut F) -> Result<DVector<f64>, StageFailure>
where
    F: FnMut(f64, &DVector<f64>) -> Option<DVector<f64>>,
{
    let mut eval = |time: f64, state: DVector<f64>| {
        f(time, &state).ok_or(StageFailure { time, state })
    };
    let k1 = eval(t, x.clone())?;
    let k2 = eval(t + 0.5 * dt, x + &k1 * (0.5 * dt))?;
    let k3 = eval(t + 0.5 * dt, x + &k2 * (0.5 * dt))?;
    let k4 = eval(t + dt, x + &k3 * dt)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    // A finite-time escape leaves the safe set through infinity.
    if next.iter().any(|v| !v.is_finite()) {
        return Err(StageFailure { time: t + dt, state: next });
    }
    Ok(next)
}

fn check_dim(problem: &Problem, x: &DVector<f64>) -> Result<(), DynamicsError> {
    if x.len() != problem.dimension() {
        return Err(DynamicsError::DimensionMismatch {
            problem: problem.dimension(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Drives an RK4 loop. `probe_at` maps `(t, state)` to the evaluated point;
/// `rhs` is the vector field and returns `None` on a safety breach, as does a
/// failing `Ĵ` evaluation at a step point.
fn run_layer<F, P>(
    layer: Layer,
    problem: &Problem,
    cfg: &IntegratorConfig,
    x0: &DVector<f64>,
    mut rhs: F,
    probe_at: P,
) -> Result<Trajectory, DynamicsError>
where
    F: FnMut(f64, &DVector<f64>) -> Option<DVector<f64>>,
    P: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    cfg.validate()?;
    check_dim(problem, x0)?;
    let barrier = problem.barrier();
    let steps = cfg.steps();
    let mut traj = Trajectory::new(layer);
    let mut x = x0.clone();

    let breach = |traj: Trajectory, time: f64, estimate: DVector<f64>| {
        let probe = probe_at(time, &estimate);
        let h = barrier.value(&probe);
        DynamicsError::SafetyBreach(Box::new(SafetyBreach {
            layer,
            time,
            diverged: estimate.iter().any(|v| !v.is_finite()),
            estimate,
            probe,
            h,
            trajectory: traj,
        }))
    };

    for i in 0..=steps {
        let t = cfg.time_at(i);
        let probe = probe_at(t, &x);
        let Ok(jhat) = problem.modified_cost(&probe) else {
            return Err(breach(traj, t, x));
        };
        let h_probe = barrier.value(&probe);
        let h_est = barrier.value(&x);
        traj.track(h_probe, h_est);
        if i % cfg.record_every == 0 || i == steps {
            let j = problem.cost().value(&probe);
            traj.push(t, x.clone(), probe, jhat, j, h_probe, h_est);
        }
        if i == steps {
            break;
        }
        match rk4_step(t, &x, cfg.step, &mut rhs) {
            Ok(next) => x = next,
            Err(StageFailure { time, state }) => return Err(breach(traj, time, state)),
        }
        traj.steps_taken = i + 1;
    }
    Ok(traj)
}

fn model_free_impl(
    layer: Layer,
    problem: &Problem,
    params: &EscParams,
    cfg: &IntegratorConfig,
    theta_hat_0: &DVector<f64>,
) -> Result<Trajectory, DynamicsError> {
    cfg.validate()?;
    let dither = params.dither();
    cfg.check_resolves(dither)?;
    if dither.dimension() != problem.dimension() {
        return Err(DynamicsError::DimensionMismatch {
            problem: problem.dimension(),
            got: dither.dimension(),
        });
    }
    let omega = dither.base_rate();
    let k = params.gain();
    run_layer(
        layer,
        problem,
        cfg,
        theta_hat_0,
        |t, x| {
            gradient_estimate(problem, params, omega * t, x)
                .ok()
                .map(|g| g * -k)
        },
        |t, x| x + dither.probe_offset(omega * t),
    )
}

/// Model-free LBF-ESC. Halts with [`DynamicsError::SafetyBreach`] at the first
/// RK4 stage whose probe leaves the safe set.
pub fn integrate_model_free(
    problem: &Problem,
    params: &EscParams,
    cfg: &IntegratorConfig,
    theta_hat_0: &DVector<f64>,
) -> Result<Trajectory, DynamicsError> {
    model_free_impl(Layer::ModelFree, problem, params, cfg, theta_hat_0)
}

/// Plain ESC on `J` with the same dither and gain. Never raises a safety
/// breach; `h` is recorded so violations show up in the minima.
pub fn integrate_unconstrained_baseline(
    problem: &Problem,
    params: &EscParams,
    cfg: &IntegratorConfig,
    theta_hat_0: &DVector<f64>,
) -> Result<Trajectory, DynamicsError> {
    model_free_impl(
        Layer::UnconstrainedBaseline,
        &problem.without_barrier(),
        params,
        cfg,
        theta_hat_0,
    )
}

/// Default Simpson intervals for period averages: 64 per cycle of the
/// fastest channel within one common period, per dimension.
pub fn default_quad_points(dither: &DitherSpec) -> usize {
    let cycles = (dither.common_period() * dither.fastest_frequency() / dither.base_rate() / (2.0 * PI))
        .round()
        .max(1.0) as usize;
    64 * cycles * dither.dimension()
}

/// Averaged system `θ̄' = −k ḡ(θ̄, a)`, where `ḡ` is computed by quadrature.
pub fn integrate_averaged(
    problem: &Problem,
    params: &EscParams,
    cfg: &IntegratorConfig,
    theta_bar_0: &DVector<f64>,
) -> Result<Trajectory, DynamicsError> {
    let dither = params.dither();
    let quad = default_quad_points(dither);
    let k = params.gain();
    run_layer(
        Layer::Averaged,
        problem,
        cfg,
        theta_bar_0,
        |_, x| averaged_gradient(problem, dither, x, quad).ok().map(|g| g * -k),
        |_, x| x.clone(),
    )
}

/// Model-based gradient flow `ϑ' = −k ∇Ĵ(ϑ)`.
pub fn integrate_model_based(
    problem: &Problem,
    gain: f64,
    cfg: &IntegratorConfig,
    theta_0: &DVector<f64>,
) -> Result<Trajectory, DynamicsError> {
    if !(gain.is_finite() && gain >= 0.0) {
        return Err(DynamicsError::InvalidGain(gain));
    }
    run_layer(
        Layer::ModelBased,
        problem,
        cfg,
        theta_0,
        |_, x| problem.modified_gradient(x).ok().map(|g| g * -gain),
        |_, x| x.clone(),
    )
}
