//! Numerical checks of the barrier-ESC theory: period-averaged gradient,
//! equilibria and their `O(μ)` proximity to `θ*`, the boundary safety margin
//! constants, the repulsion inequality, and the sequential tuning study.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{integrate_model_free, DynamicsError, EscParams, IntegratorConfig, Layer, Trajectory};
use crate::objective::{fd_gradient, fd_jacobian, Barrier, ObjectiveError, Problem};
use crate::signals::{simpson_nodes, DitherSpec};

pub const NEWTON_MAX_ITERATIONS: usize = 100;
pub const NEWTON_TOLERANCE: f64 = 1e-10;
/// Forward-difference step for the averaged-mode Jacobian.
pub const AVERAGED_JACOBIAN_STEP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("probe left the safe set at tau = {tau}: {source}")]
    BarrierViolation { tau: f64, source: ObjectiveError },
    #[error("newton did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("backtracking could not keep the iterate inside the safe set")]
    LeftSafeSet,
    #[error("no sample falls in the boundary band |h| < {band}")]
    EmptyBoundaryBand { band: f64 },
    #[error("no safe samples below the boundary band; margin is degenerate")]
    DegenerateMargin,
    #[error("invalid analysis box: {0}")]
    InvalidBox(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("unconstrained minimizer is not strictly safe (h = {h})")]
    MinimizerUnsafe { h: f64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// `ḡ(θ̄, a) = (1/T) ∫_0^T m(τ, a) Ĵ(θ̄ + a s(τ)) dτ` by composite Simpson
/// over one common period.
pub fn averaged_gradient(
    problem: &Problem,
    dither: &DitherSpec,
    theta_bar: &DVector<f64>,
    quad_points: usize,
) -> Result<DVector<f64>, AnalysisError> {
    let period = dither.common_period();
    let mut acc = DVector::zeros(theta_bar.len());
    for (tau, w) in simpson_nodes(period, quad_points) {
        let probe = theta_bar + dither.probe_offset(tau);
        let jhat = problem
            .modified_cost(&probe)
            .map_err(|source| AnalysisError::BarrierViolation { tau, source })?;
        acc += dither.demod(tau) * (w * jhat);
    }
    Ok(acc / period)
}

/// Which vector field the equilibrium solver zeroes.
#[derive(Debug, Clone, PartialEq)]
pub enum EquilibriumMode {
    /// `∇Ĵ = 0`.
    ModelBased,
    /// `ḡ(·, a) = 0` for the given dither.
    Averaged { dither: DitherSpec, quad_points: usize },
}

/// Damped Newton on the chosen field with backtracking that never accepts an
/// unsafe iterate. In model-based mode the merit is `Ĵ` (so the iteration
/// seeks minima); a step is also accepted when it reduces the residual norm.
pub fn solve_equilibrium(
    problem: &Problem,
    initial_guess: &DVector<f64>,
    mode: &EquilibriumMode,
) -> Result<DVector<f64>, AnalysisError> {
    let residual = |x: &DVector<f64>| -> Result<DVector<f64>, AnalysisError> {
        match mode {
            EquilibriumMode::ModelBased => Ok(problem.modified_gradient(x)?),
            EquilibriumMode::Averaged { dither, quad_points } => averaged_gradient(problem, dither, x, *quad_points),
        }
    };
    let jacobian = |x: &DVector<f64>, g: &DVector<f64>| -> Result<DMatrix<f64>, AnalysisError> {
        match mode {
            EquilibriumMode::ModelBased => match problem.modified_hessian(x) {
                Ok(h) => Ok(h),
                Err(ObjectiveError::NonsmoothPoint { .. }) => {
                    fd_jacobian(|y| problem.modified_gradient(y), x).map_err(AnalysisError::from)
                }
                Err(e) => Err(e.into()),
            },
            EquilibriumMode::Averaged { .. } => {
                let n = x.len();
                let mut cols = Vec::with_capacity(n);
                for j in 0..n {
                    let mut y = x.clone();
                    y[j] += AVERAGED_JACOBIAN_STEP;
                    cols.push((residual(&y)? - g) / AVERAGED_JACOBIAN_STEP);
                }
                Ok(DMatrix::from_columns(&cols))
            }
        }
    };
    let merit = |x: &DVector<f64>| -> Option<f64> {
        match mode {
            EquilibriumMode::ModelBased => problem.modified_cost(x).ok(),
            EquilibriumMode::Averaged { .. } => None,
        }
    };

    problem.safe_barrier_value(initial_guess).map_err(|_| AnalysisError::LeftSafeSet)?;
    let mut x = initial_guess.clone();
    let mut g = residual(&x)?;
    for _ in 0..NEWTON_MAX_ITERATIONS {
        let g_norm = g.norm();
        if g_norm < NEWTON_TOLERANCE {
            return Ok(x);
        }
        let jac = jacobian(&x, &g)?;
        let newton = jac.lu().solve(&(-&g));
        let dir = match (mode, newton) {
            (EquilibriumMode::ModelBased, Some(d)) if d.dot(&g) < 0.0 => d,
            (EquilibriumMode::Averaged { .. }, Some(d)) => d,
            _ => -&g,
        };
        let f0 = merit(&x);
        let slope = g.dot(&dir);
        let mut accepted = None;
        let mut any_safe = false;
        let mut t = 1.0;
        for _ in 0..60 {
            let cand = &x + &dir * t;
            if problem.barrier().value(&cand) > 0.0 {
                if let Ok(g_new) = residual(&cand) {
                    any_safe = true;
                    let merit_ok = match (f0, merit(&cand)) {
                        (Some(f0), Some(f1)) => f1 <= f0 + 1e-4 * t * slope,
                        _ => false,
                    };
                    if merit_ok || g_new.norm() < (1.0 - 1e-4 * t) * g_norm {
                        accepted = Some((cand, g_new));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, g_new)) => {
                x = cand;
                g = g_new;
            }
            None if !any_safe => return Err(AnalysisError::LeftSafeSet),
            None => {
                return Err(AnalysisError::NoConvergence {
                    iterations: NEWTON_MAX_ITERATIONS,
                    residual: g_norm,
                })
            }
        }
    }
    let residual = g.norm();
    if residual < NEWTON_TOLERANCE {
        return Ok(x);
    }
    Err(AnalysisError::NoConvergence {
        iterations: NEWTON_MAX_ITERATIONS,
        residual,
    })
}

/// Result of sweeping `μ` towards zero and tracking `θ̂_μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub mu_values: Vec<f64>,
    pub equilibria: Vec<Vec<f64>>,
    /// `‖θ̂_μ − θ*‖`.
    pub distances: Vec<f64>,
    /// Slope of `log ‖θ̂_μ − θ*‖` against `log μ`; absent when degenerate.
    pub fitted_order: Option<f64>,
    /// Largest μ values dropped from the fit.
    pub discarded_from_fit: usize,
    /// `‖θ̂_μ − θ* − μ H⁻¹ ∇h(θ*)/h(θ*)‖ / μ²`.
    pub predicted_direction_error: Vec<f64>,
    /// `h(θ̂_μ) − h(θ*)`.
    pub barrier_gain: Vec<f64>,
    /// Smallest eigenvalue of `∇²Ĵ(θ̂_μ)`.
    pub min_hessian_eigenvalue: Vec<f64>,
    /// True when `∇h(θ*) = 0`, so the first-order term vanishes.
    pub degenerate_first_order: bool,
}

impl ProximityReport {
    pub fn order_within(&self, lo: f64, hi: f64) -> bool {
        self.fitted_order.is_some_and(|p| (lo..=hi).contains(&p))
    }

    /// Direction error nonincreasing across the two smallest μ.
    pub fn direction_error_settles(&self) -> bool {
        let e = &self.predicted_direction_error;
        e.len() >= 2 && e[e.len() - 1] <= e[e.len() - 2] * (1.0 + 1e-9) + 1e-12
    }

    pub fn pushes_inward(&self) -> bool {
        self.barrier_gain.iter().all(|&g| g > 0.0)
    }
}

/// Least-squares slope and RMS residual of `y` against `x`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    (slope, rms)
}

/// Solves `θ̂_μ` for each `μ` in a decreasing schedule of at least four values
/// and fits the proximity order.
pub fn proximity_study(problem: &Problem, mu_schedule: &[f64]) -> Result<ProximityReport, AnalysisError> {
    if mu_schedule.len() < 4 {
        return Err(AnalysisError::InvalidSchedule("need at least four mu values".into()));
    }
    if mu_schedule.iter().any(|&m| !(m > 0.0)) || mu_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(AnalysisError::InvalidSchedule("mu values must be positive and strictly decreasing".into()));
    }
    let theta_star = problem.cost().minimizer().clone();
    let h_star = problem.barrier().value(&theta_star);
    if !(h_star > 0.0) {
        return Err(AnalysisError::MinimizerUnsafe { h: h_star });
    }
    let h_inv = problem
        .cost()
        .hessian()
        .clone()
        .cholesky()
        .expect("validated positive definite")
        .inverse();
    let first_order = &h_inv * problem.barrier().gradient(&theta_star) / h_star;
    let degenerate = first_order.norm() < 1e-12;

    let mut report = ProximityReport {
        mu_values: mu_schedule.to_vec(),
        equilibria: Vec::new(),
        distances: Vec::new(),
        fitted_order: None,
        discarded_from_fit: 0,
        predicted_direction_error: Vec::new(),
        barrier_gain: Vec::new(),
        min_hessian_eigenvalue: Vec::new(),
        degenerate_first_order: degenerate,
    };
    for &mu in mu_schedule {
        let p = problem.with_mu(mu)?;
        let eq = solve_equilibrium(&p, &theta_star, &EquilibriumMode::ModelBased)?;
        let disp = &eq - &theta_star;
        report.distances.push(disp.norm());
        report
            .predicted_direction_error
            .push((&disp - &first_order * mu).norm() / (mu * mu));
        report.barrier_gain.push(p.barrier().value(&eq) - h_star);
        let lam = match p.modified_hessian(&eq) {
            Ok(h) => h.symmetric_eigen().eigenvalues.min(),
            Err(_) => f64::NAN,
        };
        report.min_hessian_eigenvalue.push(lam);
        report.equilibria.push(eq.iter().copied().collect());
    }

    if !degenerate && report.distances.iter().all(|&d| d > 0.0) {
        let lx: Vec<f64> = mu_schedule.iter().map(|m| m.ln()).collect();
        let ly: Vec<f64> = report.distances.iter().map(|d| d.ln()).collect();
        let (mut slope, rms) = linear_fit(&lx, &ly);
        if rms > 0.05 {
            let (s, _) = linear_fit(&lx[1..], &ly[1..]);
            slope = s;
            report.discarded_from_fit = 1;
        }
        report.fitted_order = Some(slope);
    }
    Ok(report)
}

/// Axis-aligned sampling box standing in for the compact sublevel sets of `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub samples_per_axis: usize,
}

impl AnalysisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, samples_per_axis: usize) -> Result<Self, AnalysisError> {
        let b = Self {
            lower,
            upper,
            samples_per_axis,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(AnalysisError::InvalidBox("lower and upper must have equal nonzero length".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(AnalysisError::InvalidBox("lower must be below upper componentwise".into()));
        }
        if self.samples_per_axis < 2 {
            return Err(AnalysisError::InvalidBox("need at least two samples per axis".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn diagonal(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.samples_per_axis.pow(self.dimension() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        let (l, u) = (self.lower[axis], self.upper[axis]);
        l + (u - l) * i as f64 / (self.samples_per_axis - 1) as f64
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let s = self.samples_per_axis;
        (0..self.dimension())
            .map(|_| {
                let i = flat % s;
                flat /= s;
                i
            })
            .collect()
    }

    pub fn point(&self, flat: usize) -> DVector<f64> {
        let idx = self.multi_index(flat);
        DVector::from_iterator(self.dimension(), idx.iter().enumerate().map(|(a, &i)| self.coord(a, i)))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dimension() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }

    fn nearest_flat(&self, x: &DVector<f64>) -> usize {
        let s = self.samples_per_axis;
        let mut flat = 0;
        for axis in (0..self.dimension()).rev() {
            let (l, u) = (self.lower[axis], self.upper[axis]);
            let i = (((x[axis] - l) / (u - l)) * (s - 1) as f64).round().clamp(0.0, (s - 1) as f64) as usize;
            flat = flat * s + i;
        }
        flat
    }

    /// Grid neighbors along each axis with larger index.
    fn forward_neighbors(&self, flat: usize) -> impl Iterator<Item = usize> + '_ {
        let idx = self.multi_index(flat);
        let s = self.samples_per_axis;
        (0..self.dimension()).filter_map(move |axis| (idx[axis] + 1 < s).then(|| flat + s.pow(axis as u32)))
    }

    fn all_neighbors(&self, flat: usize) -> Vec<usize> {
        let idx = self.multi_index(flat);
        let s = self.samples_per_axis;
        let mut out = Vec::new();
        for (axis, &i) in idx.iter().enumerate() {
            let stride = s.pow(axis as u32);
            if i > 0 {
                out.push(flat - stride);
            }
            if i + 1 < s {
                out.push(flat + stride);
            }
        }
        out
    }

    /// Points on `h = 0` found by bisecting every grid edge across which `h`
    /// changes sign. Each point is on the safe side within round-off.
    pub fn boundary_crossings(&self, barrier: &Barrier) -> Vec<DVector<f64>> {
        let values: Vec<f64> = (0..self.len()).map(|i| barrier.value(&self.point(i))).collect();
        let mut out = Vec::new();
        for i in 0..self.len() {
            for j in self.forward_neighbors(i) {
                let (hi, hj) = (values[i], values[j]);
                if (hi > 0.0) == (hj > 0.0) {
                    continue;
                }
                let (mut safe, mut unsafe_) = if hi > 0.0 {
                    (self.point(i), self.point(j))
                } else {
                    (self.point(j), self.point(i))
                };
                for _ in 0..60 {
                    let mid = (&safe + &unsafe_) * 0.5;
                    if barrier.value(&mid) > 0.0 {
                        safe = mid;
                    } else {
                        unsafe_ = mid;
                    }
                }
                out.push(safe);
            }
        }
        out
    }
}

/// Whether `a` and `b` lie in the same connected safe region of the grid.
pub fn same_safe_component(barrier: &Barrier, grid: &AnalysisBox, a: &DVector<f64>, b: &DVector<f64>) -> bool {
    if !(grid.contains(a) && grid.contains(b)) || barrier.value(a) <= 0.0 || barrier.value(b) <= 0.0 {
        return false;
    }
    let safe: Vec<bool> = (0..grid.len()).map(|i| barrier.value(&grid.point(i)) > 0.0).collect();
    let (start, goal) = (grid.nearest_flat(a), grid.nearest_flat(b));
    if !safe[start] || !safe[goal] {
        return false;
    }
    let mut seen = vec![false; grid.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        if i == goal {
            return true;
        }
        for j in grid.all_neighbors(i) {
            if safe[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    false
}

/// Boundary margin constants: `m` (minimum boundary gradient norm), `c0`,
/// bounds `M_h`, `M_J` over the band `h ∈ [0, c0]`, and `c1 = μ m² / (8 M_J M_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConstants {
    pub mu: f64,
    pub m: f64,
    pub c0: f64,
    #[serde(rename = "M_h")]
    pub m_h: f64,
    #[serde(rename = "M_J")]
    pub m_j: f64,
    pub c1: f64,
    /// Boundary-band tolerance used to estimate `m`.
    pub band: f64,
}

impl MarginConstants {
    /// `μ m² / (8 M_J M_h)` before clipping to `c0`.
    pub fn raw_c1(&self) -> f64 {
        self.mu * self.m * self.m / (8.0 * self.m_j * self.m_h)
    }
}

struct Sample {
    point: DVector<f64>,
    h: f64,
    grad_norm: f64,
}

fn sample(problem: &Problem, point: DVector<f64>) -> Sample {
    let b = problem.barrier();
    Sample {
        h: b.value(&point),
        grad_norm: b.gradient(&point).norm(),
        point,
    }
}

/// Estimates the margin constants over `grid`; `h_floor` caps `c0`.
pub fn margin_constants(problem: &Problem, grid: &AnalysisBox, h_floor: f64) -> Result<MarginConstants, AnalysisError> {
    grid.validate()?;
    let band = 1e-3 * grid.diagonal();
    let mut samples: Vec<Sample> = (0..grid.len()).map(|i| sample(problem, grid.point(i))).collect();
    samples.extend(
        grid.boundary_crossings(problem.barrier())
            .into_iter()
            .map(|p| sample(problem, p)),
    );

    let m = samples
        .iter()
        .filter(|s| s.h.abs() < band)
        .map(|s| s.grad_norm)
        .fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return Err(AnalysisError::EmptyBoundaryBand { band });
    }

    let mut safe: Vec<&Sample> = samples.iter().filter(|s| s.h >= 0.0).collect();
    safe.sort_by(|a, b| a.h.total_cmp(&b.h));
    let mut c0 = f64::NAN;
    for s in &safe {
        if s.grad_norm < 0.5 * m {
            break;
        }
        c0 = s.h;
    }
    let c0 = c0.min(h_floor);
    if !(c0 > 0.0) {
        return Err(AnalysisError::DegenerateMargin);
    }

    let cost = problem.cost();
    let (mut m_h, mut m_j) = (0.0_f64, 0.0_f64);
    for s in safe.iter().take_while(|s| s.h <= c0) {
        m_h = m_h.max(s.grad_norm);
        m_j = m_j.max(cost.gradient(&s.point).norm());
    }
    let mu = problem.mu();
    let raw = mu * m * m / (8.0 * m_j * m_h);
    Ok(MarginConstants {
        mu,
        m,
        c0,
        m_h,
        m_j,
        c1: if raw.is_finite() { raw.min(c0) } else { c0 },
        band,
    })
}

/// Band sample where `ḣ ≥ k μ m² / (8h)` fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepulsionWitness {
    pub point: Vec<f64>,
    pub h: f64,
    pub h_dot: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepulsionReport {
    pub passed: bool,
    pub samples: usize,
    pub failures: usize,
    /// Up to [`MAX_WITNESSES`] failing samples.
    pub witnesses: Vec<RepulsionWitness>,
}

pub const MAX_WITNESSES: usize = 32;

/// Levels, as fractions of `c1`, at which boundary crossings are pushed inward.
const BAND_LEVELS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 1.0 / 64.0];

/// Moves `start` along the inward normal until `h = level` (scalar Newton along the ray).
fn push_to_level(barrier: &Barrier, start: &DVector<f64>, level: f64) -> Option<DVector<f64>> {
    let grad = barrier.gradient(start);
    let gn = grad.norm();
    if gn == 0.0 {
        return None;
    }
    let normal = grad / gn;
    let mut s = (level - barrier.value(start)) / gn;
    for _ in 0..30 {
        let x = start + &normal * s;
        let r = barrier.value(&x) - level;
        if r.abs() <= 1e-12 * level.max(1e-300) {
            return Some(x);
        }
        let slope = barrier.gradient(&x).dot(&normal);
        if slope <= 0.0 {
            return None;
        }
        s -= r / slope;
    }
    let x = start + &normal * s;
    ((barrier.value(&x) - level).abs() <= 1e-9 * level).then_some(x)
}

/// Checks the repulsion inequality `ḣ ≥ k μ m² / (8h)` over the band
/// `h ∈ (0, c1]` of `margin`, with `ḣ` the exact Lie derivative along the
/// model-based flow of `problem`.
pub fn verify_repulsion(
    problem: &Problem,
    margin: &MarginConstants,
    grid: &AnalysisBox,
    gain: f64,
) -> Result<RepulsionReport, AnalysisError> {
    grid.validate()?;
    let barrier = problem.barrier();
    let c1 = margin.c1;
    let mut points: Vec<DVector<f64>> = (0..grid.len())
        .map(|i| grid.point(i))
        .filter(|x| {
            let h = barrier.value(x);
            h > 0.0 && h <= c1
        })
        .collect();
    for b in grid.boundary_crossings(barrier) {
        points.extend(BAND_LEVELS.iter().filter_map(|f| push_to_level(barrier, &b, f * c1)));
    }

    let mu = problem.mu();
    let mut report = RepulsionReport {
        passed: true,
        samples: 0,
        failures: 0,
        witnesses: Vec::new(),
    };
    for x in points {
        let h = barrier.value(&x);
        if !(h > 0.0 && h <= c1 * (1.0 + 1e-9)) {
            continue;
        }
        report.samples += 1;
        let h_dot = problem.barrier_lie_derivative(&x, gain)?;
        let bound = gain * mu * margin.m * margin.m / (8.0 * h);
        let tol = 1e-9 * h_dot.abs().max(bound.abs());
        if h_dot < bound - tol {
            report.passed = false;
            report.failures += 1;
            if report.witnesses.len() < MAX_WITNESSES {
                report.witnesses.push(RepulsionWitness {
                    point: x.iter().copied().collect(),
                    h,
                    h_dot,
                    bound,
                });
            }
        }
    }
    Ok(report)
}

/// One `(μ, a, ω)` tuple of a sequential tuning schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningPoint {
    pub mu: f64,
    pub a: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub mu: f64,
    pub a: f64,
    pub omega: f64,
    /// See [`asymptotic_error`]; NaN on breach.
    pub asymptotic_error: f64,
    /// Min of `h(probe)` over the run (the breach value if one occurred).
    pub min_h: f64,
    pub breached: bool,
}

/// Fraction of the horizon, counted from the end, over which the asymptotic error is taken.
pub const ASYMPTOTIC_WINDOW: f64 = 0.2;

/// Max of `‖θ̂(t) − θ*‖` over the recorded samples in the last
/// [`ASYMPTOTIC_WINDOW`] of the horizon.
pub fn asymptotic_error(traj: &Trajectory, theta_star: &DVector<f64>, cfg: &IntegratorConfig) -> f64 {
    let window_start = cfg.start_time + (1.0 - ASYMPTOTIC_WINDOW) * cfg.horizon;
    traj.times
        .iter()
        .zip(&traj.estimate)
        .filter(|(t, _)| **t >= window_start - 1e-9 * cfg.step)
        .map(|(_, e)| (e - theta_star).norm())
        .fold(0.0, f64::max)
}

/// Runs the model-free loop for one tuple (step refined to resolve the dither). Breaches are recorded in the row.
pub fn tuning_row(
    problem: &Problem,
    esc: &EscParams,
    cfg: &IntegratorConfig,
    initial_estimate: &DVector<f64>,
    point: TuningPoint,
) -> Result<TuningRow, AnalysisError> {
    let p = problem.with_mu(point.mu)?;
    let dither = esc
        .dither()
        .with_amplitude(point.a)
        .and_then(|d| d.with_base_rate(point.omega))
        .map_err(|e| AnalysisError::InvalidSchedule(e.to_string()))?;
    let params = esc.with_dither(dither);
    let run_cfg = cfg.resolving(params.dither());
    match integrate_model_free(&p, &params, &run_cfg, initial_estimate) {
        Ok(traj) => Ok(TuningRow {
            mu: point.mu,
            a: point.a,
            omega: point.omega,
            asymptotic_error: asymptotic_error(&traj, p.cost().minimizer(), &run_cfg),
            min_h: traj.min_barrier_probe,
            breached: false,
        }),
        Err(DynamicsError::SafetyBreach(b)) => Ok(TuningRow {
            mu: point.mu,
            a: point.a,
            omega: point.omega,
            asymptotic_error: f64::NAN,
            min_h: b.h.min(b.trajectory.min_barrier_probe),
            breached: true,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Integrates the model-free loop for each tuple of a jointly shrinking
/// `(μ, a, 1/ω)` schedule, `jobs` rows at a time. Rows come back in schedule order.
pub fn sequential_tuning_study(
    problem: &Problem,
    esc: &EscParams,
    cfg: &IntegratorConfig,
    initial_estimate: &DVector<f64>,
    schedule: &[TuningPoint],
    jobs: usize,
) -> Result<Vec<TuningRow>, AnalysisError> {
    if schedule.is_empty() {
        return Err(AnalysisError::InvalidSchedule("schedule is empty".into()));
    }
    for w in schedule.windows(2) {
        if w[1].mu > w[0].mu || w[1].a > w[0].a || w[1].omega < w[0].omega {
            return Err(AnalysisError::InvalidSchedule(
                "mu, a and 1/omega must be jointly nonincreasing".into(),
            ));
        }
    }
    parallel_rows(problem, esc, cfg, initial_estimate, schedule, jobs)
}

/// Evaluates arbitrary grid rows concurrently with no ordering precondition.
pub fn parallel_rows(
    problem: &Problem,
    esc: &EscParams,
    cfg: &IntegratorConfig,
    initial_estimate: &DVector<f64>,
    points: &[TuningPoint],
    jobs: usize,
) -> Result<Vec<TuningRow>, AnalysisError> {
    if points.iter().any(|p| !(p.mu > 0.0 && p.a > 0.0 && p.omega > 0.0)) {
        return Err(AnalysisError::InvalidSchedule("mu, a and omega must all be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| AnalysisError::InvalidSchedule(e.to_string()))?;
    pool.install(|| {
        points
            .par_iter()
            .map(|&pt| tuning_row(problem, esc, cfg, initial_estimate, pt))
            .collect()
    })
}

/// Max abs deviation of the sampled orthogonality matrix from `I/a`.
pub fn orthogonality_error(dither: &DitherSpec, quad_points: usize) -> f64 {
    let n = dither.dimension();
    let target = DMatrix::<f64>::identity(n, n) / dither.amplitude();
    (dither.verify_orthogonality(quad_points) - target).amax()
}

/// Worst relative errors of the analytic derivatives of `Ĵ` against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub points: usize,
    /// Points where the Hessian is defined (off the nonsmooth locus).
    pub smooth_points: usize,
    pub gradient_max_rel_error: f64,
    pub hessian_max_rel_error: f64,
}

pub const GRADIENT_REL_TOL: f64 = 1e-5;
pub const HESSIAN_REL_TOL: f64 = 1e-4;

impl DerivativeCheck {
    pub fn passed(&self) -> bool {
        self.points > 0
            && self.gradient_max_rel_error < GRADIENT_REL_TOL
            && self.hessian_max_rel_error < HESSIAN_REL_TOL
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    analytic / numeric.max(f64::MIN_POSITIVE)
}

/// Compares `∇Ĵ` with differences of `Ĵ`, and `∇²Ĵ` with differences of `∇Ĵ`.
pub fn derivative_check(problem: &Problem, points: &[DVector<f64>]) -> Result<DerivativeCheck, AnalysisError> {
    let mut out = DerivativeCheck {
        points: 0,
        smooth_points: 0,
        gradient_max_rel_error: 0.0,
        hessian_max_rel_error: 0.0,
    };
    for x in points {
        let g = problem.modified_gradient(x)?;
        let g_fd = fd_gradient(|y| problem.modified_cost(y), x)?;
        out.points += 1;
        out.gradient_max_rel_error = out
            .gradient_max_rel_error
            .max(rel_error((&g - &g_fd).norm(), g_fd.norm()));
        match problem.modified_hessian(x) {
            Ok(h) => {
                let h_fd = fd_jacobian(|y| problem.modified_gradient(y), x)?;
                out.smooth_points += 1;
                out.hessian_max_rel_error = out
                    .hessian_max_rel_error
                    .max(rel_error((&h - &h_fd).norm(), h_fd.norm()));
            }
            Err(ObjectiveError::NonsmoothPoint { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Breach event as reported in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreachEvent {
    pub time: f64,
    pub estimate: Vec<f64>,
    pub probe: Vec<f64>,
    /// Null in JSON when the state diverged.
    pub h: f64,
    pub diverged: bool,
}

/// Safety outcome of one layer of a scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub scenario: String,
    pub layer: Layer,
    pub parameters: RunParameters,
    pub min_h_probe: f64,
    pub min_h_estimate: f64,
    pub breach: Option<BreachEvent>,
    pub final_estimate: Vec<f64>,
    /// Model-free layers only; see [`asymptotic_error`].
    pub asymptotic_error: Option<f64>,
    pub margin: Option<MarginConstants>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunParameters {
    pub mu: f64,
    pub a: f64,
    pub omega: f64,
    pub k: f64,
    pub step: f64,
    pub horizon: f64,
}
