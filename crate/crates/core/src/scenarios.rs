//! Declarative scenario bundles: cost, barrier, dither, integrator, initial
//! estimate and analysis box, with JSON load/save.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisBox, AnalysisError};
use crate::dynamics::{DynamicsError, EscParams, IntegratorConfig, Layer};
use crate::objective::{Barrier, ObjectiveError, Problem, QuadraticCost};
use crate::signals::{rational, DitherSpec, Rational, SignalError};

pub const BUILTIN_NAMES: [&str; 4] = ["paper-1d", "paper-2d-trig", "paper-2d-corridor", "interior-ball"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`; builtins are paper-1d, paper-2d-trig, paper-2d-corridor, interior-ball")]
    UnknownScenario(String),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("initial probe region is not safe: h = {h} at {point:?}")]
    UnsafeInitialPoint { point: Vec<f64>, h: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub problem: Problem,
    pub esc: EscParams,
    pub integrator: IntegratorConfig,
    pub initial_estimate: DVector<f64>,
    pub analysis_box: AnalysisBox,
    pub baselines: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    theta_star: Vec<f64>,
    #[serde(rename = "J_star")]
    j_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EscFile {
    k: f64,
    a: f64,
    omega: f64,
    relative_rates: Vec<[i64; 2]>,
    relative_amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntegratorFile {
    step: f64,
    horizon: f64,
    t0: f64,
    #[serde(default = "one")]
    record_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    cost: CostFile,
    barrier: Barrier,
    mu: f64,
    esc: EscFile,
    integrator: IntegratorFile,
    initial_estimate: Vec<f64>,
    analysis_box: AnalysisBox,
    #[serde(default)]
    baselines: Vec<Layer>,
}

/// Maps a JSON path onto the domain layout (`cost`, `barrier`, `mu` belong to `problem`).
fn domain_path(json_path: &str) -> String {
    let head = json_path.split(['.', '[']).next().unwrap_or("");
    if matches!(head, "cost" | "barrier" | "mu") {
        format!("problem.{json_path}")
    } else {
        json_path.to_string()
    }
}

fn schema_error(err: serde_path_to_error::Error<serde_json::Error>) -> ScenarioError {
    let mut path = err.path().to_string();
    let message = err.inner().to_string();
    if let Some(field) = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next())
    {
        path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
    }
    ScenarioError::Schema {
        path: domain_path(&path),
        message,
    }
}

impl Scenario {
    /// Validates cross-field invariants, including that every probe of the
    /// first dither cycle around the initial estimate is safe.
    pub fn new(
        name: impl Into<String>,
        problem: Problem,
        esc: EscParams,
        integrator: IntegratorConfig,
        initial_estimate: DVector<f64>,
        analysis_box: AnalysisBox,
        baselines: Vec<Layer>,
    ) -> Result<Self, ScenarioError> {
        let s = Self {
            name: name.into(),
            problem,
            esc,
            integrator,
            initial_estimate,
            analysis_box,
            baselines,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.problem.dimension();
        let mismatch = |got| {
            ScenarioError::Objective(ObjectiveError::DimensionMismatch { expected: n, got })
        };
        if self.initial_estimate.len() != n {
            return Err(mismatch(self.initial_estimate.len()));
        }
        if self.esc.dither().dimension() != n {
            return Err(mismatch(self.esc.dither().dimension()));
        }
        self.analysis_box.validate()?;
        if self.analysis_box.dimension() != n {
            return Err(mismatch(self.analysis_box.dimension()));
        }
        self.integrator.validate()?;
        let h0 = self.problem.barrier().value(&self.initial_estimate);
        if !(h0 > 0.0) || self.probe_ring_min_h() <= 0.0 {
            return Err(ScenarioError::UnsafeInitialPoint {
                point: self.initial_estimate.iter().copied().collect(),
                h: h0.min(self.probe_ring_min_h()),
            });
        }
        Ok(())
    }

    /// Minimum of `h` over the probes `θ̂₀ + a s(τ)` on one dither period.
    pub fn probe_ring_min_h(&self) -> f64 {
        let d = self.esc.dither();
        let period = d.common_period();
        let samples = 64 * self.integrator_cycles_hint();
        (0..samples)
            .map(|i| {
                let tau = period * i as f64 / samples as f64;
                self.problem.barrier().value(&(&self.initial_estimate + d.probe_offset(tau)))
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn integrator_cycles_hint(&self) -> usize {
        let d = self.esc.dither();
        let cycles = d.common_period() * d.fastest_frequency() / d.base_rate() / (2.0 * std::f64::consts::PI);
        cycles.ceil().max(1.0) as usize
    }

    pub fn dimension(&self) -> usize {
        self.problem.dimension()
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        self.problem.cost().minimizer()
    }

    /// Half the barrier value at the initial estimate; caps the margin `c0`.
    pub fn h_floor(&self) -> f64 {
        0.5 * self.problem.barrier().value(&self.initial_estimate)
    }

    fn to_file(&self) -> ScenarioFile {
        let cost = self.problem.cost();
        let h = cost.hessian();
        let d = self.esc.dither();
        ScenarioFile {
            name: self.name.clone(),
            cost: CostFile {
                h: (0..h.nrows()).map(|i| h.row(i).iter().copied().collect()).collect(),
                theta_star: cost.minimizer().iter().copied().collect(),
                j_star: cost.minimum_value(),
            },
            barrier: self.problem.barrier().clone(),
            mu: self.problem.mu(),
            esc: EscFile {
                k: self.esc.gain(),
                a: d.amplitude(),
                omega: d.base_rate(),
                relative_rates: d.relative_rates().iter().map(|r| [*r.numer(), *r.denom()]).collect(),
                relative_amplitudes: d.relative_amplitudes().to_vec(),
            },
            integrator: IntegratorFile {
                step: self.integrator.step,
                horizon: self.integrator.horizon,
                t0: self.integrator.start_time,
                record_every: self.integrator.record_every,
            },
            initial_estimate: self.initial_estimate.iter().copied().collect(),
            analysis_box: self.analysis_box.clone(),
            baselines: self.baselines.clone(),
        }
    }

    fn from_file(f: ScenarioFile) -> Result<Self, ScenarioError> {
        let n = f.cost.theta_star.len();
        if f.cost.h.len() != n || f.cost.h.iter().any(|r| r.len() != n) {
            return Err(ScenarioError::Schema {
                path: "problem.cost.H".into(),
                message: format!("expected a {n}x{n} matrix"),
            });
        }
        let hess = DMatrix::from_fn(n, n, |i, j| f.cost.h[i][j]);
        let cost = QuadraticCost::new(f.cost.j_star, DVector::from_vec(f.cost.theta_star), hess)?;
        let problem = if f.mu == 0.0 {
            Problem::unconstrained(cost, f.barrier)?
        } else {
            Problem::new(cost, f.barrier, f.mu)?
        };
        let rates = f
            .esc
            .relative_rates
            .iter()
            .map(|[num, den]| rational(*num, *den))
            .collect::<Result<Vec<Rational>, _>>()?;
        let dither = DitherSpec::new(rates, f.esc.relative_amplitudes, f.esc.a, f.esc.omega)?;
        let esc = EscParams::new(f.esc.k, dither)?;
        let integrator = IntegratorConfig::new(f.integrator.step, f.integrator.horizon, f.integrator.t0)?
            .recording_every(f.integrator.record_every);
        Self::new(
            f.name,
            problem,
            esc,
            integrator,
            DVector::from_vec(f.initial_estimate),
            f.analysis_box,
            f.baselines,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(schema_error)?;
        Self::from_file(file)
    }

    /// Parameter-overridden copy; each override replaces the scenario field.
    pub fn with_overrides(&self, o: &Overrides) -> Result<Self, ScenarioError> {
        let mut s = self.clone();
        if let Some(mu) = o.mu {
            s.problem = if mu == 0.0 {
                s.problem.without_barrier()
            } else {
                s.problem.with_mu(mu)?
            };
        }
        let mut dither = s.esc.dither().clone();
        if let Some(a) = o.a {
            dither = dither.with_amplitude(a)?;
        }
        if let Some(omega) = o.omega {
            dither = dither.with_base_rate(omega)?;
        }
        s.esc = s.esc.with_dither(dither);
        if let Some(k) = o.k {
            s.esc = s.esc.with_gain(k)?;
        }
        if let Some(h) = o.horizon {
            s.integrator.horizon = h;
        }
        if let Some(step) = o.step {
            s.integrator.step = step;
        }
        s.validate()?;
        Ok(s)
    }

    /// Uniform samples from the analysis box with `h ≥ margin`, kept away
    /// from points where the barrier is not smooth. Deterministic in `seed`.
    pub fn sample_safe_points(&self, count: usize, seed: u64, margin: f64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &self.analysis_box;
        let barrier = self.problem.barrier();
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count && attempts < 1_000_000 {
            attempts += 1;
            let x = DVector::from_iterator(
                b.dimension(),
                b.lower.iter().zip(&b.upper).map(|(l, u)| rng.gen_range(*l..*u)),
            );
            if barrier.value(&x) >= margin && barrier.smoothness_gap(&x) > 1e-3 {
                out.push(x);
            }
        }
        out
    }
}

/// Command-line parameter overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub mu: Option<f64>,
    pub a: Option<f64>,
    pub omega: Option<f64>,
    pub k: Option<f64>,
    pub horizon: Option<f64>,
    pub step: Option<f64>,
}

pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}

pub fn save(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    fs::write(path, scenario.to_json() + "\n").map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A builtin by name, or else a scenario JSON file at that path.
pub fn resolve(name_or_path: &str) -> Result<Scenario, ScenarioError> {
    if BUILTIN_NAMES.contains(&name_or_path) {
        return builtin(name_or_path);
    }
    if Path::new(name_or_path).is_file() {
        return load(name_or_path);
    }
    Err(ScenarioError::UnknownScenario(name_or_path.to_string()))
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn planar_dither(a: f64, omega: f64) -> Result<DitherSpec, ScenarioError> {
    Ok(DitherSpec::new(
        vec![rational(3, 4)?, rational(1, 1)?],
        vec![1.0, 1.0],
        a,
        omega,
    )?)
}

pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
    match name {
        "paper-1d" => {
            let cost = QuadraticCost::new(0.0, v(&[0.0]), DMatrix::from_element(1, 1, 2.0))?;
            let problem = Problem::new(cost, Barrier::half_space(vec![-1.0], -1.0)?, 3.0)?;
            let dither = DitherSpec::new(vec![rational(1, 1)?], vec![1.0], 0.25, 15.0)?;
            Scenario::new(
                name,
                problem,
                EscParams::new(0.2, dither)?,
                IntegratorConfig::new(1e-3, 100.0, 0.0)?.recording_every(10),
                v(&[-3.0]),
                AnalysisBox::new(vec![-4.0], vec![-1.0], 3001)?,
                vec![Layer::UnconstrainedBaseline],
            )
        }
        "paper-2d-trig" => {
            let problem = Problem::new(
                QuadraticCost::isotropic(v(&[4.0, 4.0])),
                Barrier::trig_field(0.2, 0.3)?,
                6.0,
            )?;
            Scenario::new(
                name,
                problem,
                EscParams::new(0.01, planar_dither(0.25, 100.0)?)?,
                IntegratorConfig::new(1e-3, 3000.0, 0.0)?.recording_every(100),
                v(&[0.0, -4.0]),
                // Covers the upper edge the trajectory settles against, away from the corners where ∇h = 0.
                AnalysisBox::new(vec![-1.0, -4.5], vec![2.0, -3.2], 201)?,
                vec![Layer::UnconstrainedBaseline],
            )
        }
        "paper-2d-corridor" => {
            let problem = Problem::new(
                QuadraticCost::isotropic(v(&[-3.0, 4.0])),
                Barrier::min_of_circles(vec![vec![-3.0, 1.0], vec![1.0, 3.0]], vec![2.0, 1.5])?,
                6.0,
            )?;
            Scenario::new(
                name,
                problem,
                EscParams::new(0.01, planar_dither(0.25, 100.0)?)?,
                IntegratorConfig::new(1e-3, 3000.0, 0.0)?.recording_every(100),
                v(&[0.0, -4.0]),
                AnalysisBox::new(vec![-6.0, -5.0], vec![4.0, 7.0], 201)?,
                vec![Layer::UnconstrainedBaseline],
            )
        }
        "interior-ball" => {
            let problem = Problem::new(
                QuadraticCost::isotropic(v(&[0.0, 0.0])),
                Barrier::ball(vec![1.0, 0.0], 2.0)?,
                0.4,
            )?;
            Scenario::new(
                name,
                problem,
                EscParams::new(0.5, planar_dither(0.2, 50.0)?)?,
                IntegratorConfig::new(5e-4, 40.0, 0.0)?.recording_every(10),
                v(&[1.5, 1.0]),
                AnalysisBox::new(vec![-1.0, -2.0], vec![3.0, 2.0], 201)?,
                Vec::new(),
            )
        }
        other => Err(ScenarioError::UnknownScenario(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_parameters() {
        let s = builtin("paper-1d").unwrap();
        assert_eq!(s.esc.gain(), 0.2);
        assert_eq!(s.esc.dither().amplitude(), 0.25);
        assert_eq!(s.esc.dither().base_rate(), 15.0);
        assert_eq!(s.problem.mu(), 3.0);
        assert_eq!(s.initial_estimate[0], -3.0);

        let c = builtin("paper-2d-corridor").unwrap();
        match c.problem.barrier() {
            Barrier::MinOfCircles { radii, .. } => assert_eq!(radii, &vec![2.0, 1.5]),
            other => panic!("unexpected barrier {other:?}"),
        }
        let t = builtin("paper-2d-trig").unwrap();
        let rates: Vec<f64> = t
            .esc
            .dither()
            .relative_rates()
            .iter()
            .map(|r| t.esc.dither().base_rate() * *r.numer() as f64 / *r.denom() as f64)
            .collect();
        assert_eq!(rates, vec![75.0, 100.0]);

        let b = builtin("interior-ball").unwrap();
        assert_eq!(b.problem.barrier().value(b.theta_star()), 3.0);
    }

    #[test]
    fn unknown_builtin() {
        assert!(matches!(builtin("paper-3d"), Err(ScenarioError::UnknownScenario(_))));
        assert!(matches!(resolve("no/such/file.json"), Err(ScenarioError::UnknownScenario(_))));
    }

    #[test]
    fn json_round_trip_is_identity() {
        for name in BUILTIN_NAMES {
            let s = builtin(name).unwrap();
            let back = Scenario::from_json(&s.to_json()).unwrap();
            assert_eq!(back, s, "{name}");
        }
    }

    fn json_without(key: &str) -> String {
        let mut value: serde_json::Value = serde_json::from_str(&builtin("paper-1d").unwrap().to_json()).unwrap();
        value.as_object_mut().unwrap().remove(key);
        value.to_string()
    }

    #[test]
    fn missing_mu_names_problem_path() {
        match Scenario::from_json(&json_without("mu")) {
            Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "problem.mu"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn nested_schema_path() {
        let mut value: serde_json::Value = serde_json::from_str(&builtin("paper-1d").unwrap().to_json()).unwrap();
        value["esc"]["a"] = serde_json::json!("wide");
        match Scenario::from_json(&value.to_string()) {
            Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "esc.a"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn negative_radius_rejected() {
        let mut value: serde_json::Value =
            serde_json::from_str(&builtin("paper-2d-corridor").unwrap().to_json()).unwrap();
        value["barrier"]["params"]["radii"][0] = serde_json::json!(-1.0);
        assert!(matches!(
            Scenario::from_json(&value.to_string()),
            Err(ScenarioError::Objective(ObjectiveError::InvalidBarrier(_)))
        ));
    }

    #[test]
    fn unsafe_initial_point_rejected() {
        let mut value: serde_json::Value = serde_json::from_str(&builtin("paper-1d").unwrap().to_json()).unwrap();
        value["initial_estimate"] = serde_json::json!([-1.1]);
        assert!(matches!(
            Scenario::from_json(&value.to_string()),
            Err(ScenarioError::UnsafeInitialPoint { .. })
        ));
    }

    #[test]
    fn baseline_label_alias() {
        let mut value: serde_json::Value = serde_json::from_str(&builtin("paper-1d").unwrap().to_json()).unwrap();
        value["baselines"] = serde_json::json!(["unconstrained-esc"]);
        let s = Scenario::from_json(&value.to_string()).unwrap();
        assert_eq!(s.baselines, vec![Layer::UnconstrainedBaseline]);
    }

    #[test]
    fn overrides_shadow_fields() {
        let s = builtin("paper-1d").unwrap();
        let o = Overrides {
            mu: Some(1.5),
            omega: Some(30.0),
            horizon: Some(10.0),
            ..Overrides::default()
        };
        let t = s.with_overrides(&o).unwrap();
        assert_eq!(t.problem.mu(), 1.5);
        assert_eq!(t.esc.dither().base_rate(), 30.0);
        assert_eq!(t.integrator.horizon, 10.0);
        assert_eq!(t.esc.gain(), s.esc.gain());
        let unconstrained = s.with_overrides(&Overrides { mu: Some(0.0), ..Overrides::default() }).unwrap();
        assert!(!unconstrained.problem.barrier_enabled());
    }

    #[test]
    fn sampler_is_deterministic_and_safe() {
        let s = builtin("paper-2d-corridor").unwrap();
        let a = s.sample_safe_points(50, 7, 1e-3);
        assert_eq!(a, s.sample_safe_points(50, 7, 1e-3));
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|x| s.problem.barrier().value(x) >= 1e-3));
    }
}
