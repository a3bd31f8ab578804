//! Quadratic cost, barrier families and the barrier-augmented cost
//! `Ĵ(θ) = J(θ) − μ log h(θ)`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("barrier violated: h = {h} at {point:?}")]
    BarrierViolation { point: Vec<f64>, h: f64 },
    #[error("barrier is not twice differentiable at {point:?}")]
    NonsmoothPoint { point: Vec<f64> },
    #[error("hessian must be square and symmetric")]
    NotSymmetric,
    #[error("hessian must be positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid barrier parameters: {0}")]
    InvalidBarrier(String),
    #[error("barrier weight mu must be positive and finite, got {0}")]
    InvalidMu(f64),
}

/// `J(θ) = J* + ½ (θ − θ*)ᵀ H (θ − θ*)` with `H ≻ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    minimum_value: f64,
    minimizer: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn new(
        minimum_value: f64,
        minimizer: DVector<f64>,
        hessian: DMatrix<f64>,
    ) -> Result<Self, ObjectiveError> {
        let n = minimizer.len();
        if hessian.nrows() != n || hessian.ncols() != n {
            return Err(ObjectiveError::DimensionMismatch {
                expected: n,
                got: hessian.nrows(),
            });
        }
        let scale = hessian.amax().max(1.0);
        if (&hessian - hessian.transpose()).amax() > 1e-12 * scale {
            return Err(ObjectiveError::NotSymmetric);
        }
        if hessian.clone().cholesky().is_none() {
            return Err(ObjectiveError::NotPositiveDefinite);
        }
        Ok(Self {
            minimum_value,
            minimizer,
            hessian,
        })
    }

    /// `J = ‖θ − θ*‖²`, i.e. `H = 2I` and `J* = 0`.
    pub fn isotropic(minimizer: DVector<f64>) -> Self {
        let n = minimizer.len();
        Self::new(0.0, minimizer, DMatrix::identity(n, n) * 2.0).expect("2I is positive definite")
    }

    pub fn dimension(&self) -> usize {
        self.minimizer.len()
    }

    pub fn minimum_value(&self) -> f64 {
        self.minimum_value
    }

    pub fn minimizer(&self) -> &DVector<f64> {
        &self.minimizer
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.minimizer;
        self.minimum_value + 0.5 * d.dot(&(&self.hessian * &d))
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.hessian * (theta - &self.minimizer)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.hessian.clone().symmetric_eigen().eigenvalues.min()
    }
}

/// Concrete barrier family label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierFamily {
    HalfSpace,
    TrigField,
    MinOfCircles,
    Ball,
}

impl fmt::Display for BarrierFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BarrierFamily::HalfSpace => "half-space",
            BarrierFamily::TrigField => "trig-field",
            BarrierFamily::MinOfCircles => "min-of-circles",
            BarrierFamily::Ball => "ball",
        })
    }
}

/// Safety function `h`; the safe set is `{θ : h(θ) > 0}`.
///
/// Serialized as `{"family": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case")]
pub enum Barrier {
    /// `h(θ) = nᵀθ + b`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// `h(θ) = cos(c₁ π θ₁) · sin(c₂ π θ₂)`.
    TrigField { cos_coeff: f64, sin_coeff: f64 },
    /// `h(θ) = min_i ‖θ − c_i‖ − r_i`, the exterior of a union of disks.
    MinOfCircles { centers: Vec<Vec<f64>>, radii: Vec<f64> },
    /// `h(θ) = ρ² − ‖θ − c‖²`.
    Ball { center: Vec<f64>, radius: f64 },
}

/// Builds a validated barrier from a family label and its JSON parameters.
pub fn make_barrier(family: BarrierFamily, params: serde_json::Value) -> Result<Barrier, ObjectiveError> {
    let tagged = serde_json::json!({ "family": family, "params": params });
    let barrier: Barrier =
        serde_json::from_value(tagged).map_err(|e| ObjectiveError::InvalidBarrier(format!("{family}: {e}")))?;
    barrier.validate()?;
    Ok(barrier)
}

/// Relative tolerance on `|h_i − h_j|` below which two circles count as tied.
const MEDIAL_AXIS_TOL: f64 = 1e-10;

impl Barrier {
    pub fn half_space(normal: Vec<f64>, offset: f64) -> Result<Self, ObjectiveError> {
        let b = Barrier::HalfSpace { normal, offset };
        b.validate()?;
        Ok(b)
    }

    pub fn trig_field(cos_coeff: f64, sin_coeff: f64) -> Result<Self, ObjectiveError> {
        let b = Barrier::TrigField { cos_coeff, sin_coeff };
        b.validate()?;
        Ok(b)
    }

    pub fn min_of_circles(centers: Vec<Vec<f64>>, radii: Vec<f64>) -> Result<Self, ObjectiveError> {
        let b = Barrier::MinOfCircles { centers, radii };
        b.validate()?;
        Ok(b)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, ObjectiveError> {
        let b = Barrier::Ball { center, radius };
        b.validate()?;
        Ok(b)
    }

    /// Checks family parameters; deserialized barriers must pass this before use.
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |msg: &str| Err(ObjectiveError::InvalidBarrier(msg.to_string()));
        match self {
            Barrier::HalfSpace { normal, offset } => {
                if normal.is_empty() || normal.iter().all(|&x| x == 0.0) {
                    return bad("half-space normal must be nonzero");
                }
                if !offset.is_finite() || normal.iter().any(|x| !x.is_finite()) {
                    return bad("half-space parameters must be finite");
                }
            }
            Barrier::TrigField { cos_coeff, sin_coeff } => {
                if !(cos_coeff.is_finite() && sin_coeff.is_finite()) || *cos_coeff == 0.0 || *sin_coeff == 0.0 {
                    return bad("trig-field coefficients must be finite and nonzero");
                }
            }
            Barrier::MinOfCircles { centers, radii } => {
                if centers.is_empty() || centers.len() != radii.len() {
                    return bad("need one radius per circle center");
                }
                let n = centers[0].len();
                if n == 0 || centers.iter().any(|c| c.len() != n) {
                    return bad("circle centers must share one nonzero dimension");
                }
                if radii.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
                    return bad("circle radii must be positive");
                }
            }
            Barrier::Ball { center, radius } => {
                if center.is_empty() {
                    return bad("ball center must be nonempty");
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return bad("ball radius must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn family(&self) -> BarrierFamily {
        match self {
            Barrier::HalfSpace { .. } => BarrierFamily::HalfSpace,
            Barrier::TrigField { .. } => BarrierFamily::TrigField,
            Barrier::MinOfCircles { .. } => BarrierFamily::MinOfCircles,
            Barrier::Ball { .. } => BarrierFamily::Ball,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Barrier::HalfSpace { normal, .. } => normal.len(),
            Barrier::TrigField { .. } => 2,
            Barrier::MinOfCircles { centers, .. } => centers[0].len(),
            Barrier::Ball { center, .. } => center.len(),
        }
    }

    fn circle_values<'a>(
        centers: &'a [Vec<f64>],
        radii: &'a [f64],
        theta: &'a DVector<f64>,
    ) -> impl Iterator<Item = (f64, f64)> + 'a {
        centers.iter().zip(radii).map(move |(c, r)| {
            let dist = theta
                .iter()
                .zip(c)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            (dist - r, dist)
        })
    }

    /// Index of the circle attaining the minimum; ties go to the lower index.
    fn active_circle(centers: &[Vec<f64>], radii: &[f64], theta: &DVector<f64>) -> (usize, f64, f64) {
        let mut best = (0, f64::INFINITY, 0.0);
        for (i, (h, dist)) in Self::circle_values(centers, radii, theta).enumerate() {
            if h < best.1 {
                best = (i, h, dist);
            }
        }
        best
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        match self {
            Barrier::HalfSpace { normal, offset } => {
                normal.iter().zip(theta.iter()).map(|(n, x)| n * x).sum::<f64>() + offset
            }
            Barrier::TrigField { cos_coeff, sin_coeff } => {
                (cos_coeff * PI * theta[0]).cos() * (sin_coeff * PI * theta[1]).sin()
            }
            Barrier::MinOfCircles { centers, radii } => Self::active_circle(centers, radii, theta).1,
            Barrier::Ball { center, radius } => {
                let d2: f64 = theta.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum();
                radius * radius - d2
            }
        }
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Barrier::HalfSpace { normal, .. } => DVector::from_column_slice(normal),
            Barrier::TrigField { cos_coeff, sin_coeff } => {
                let (p, q) = (cos_coeff * PI, sin_coeff * PI);
                let (sx, cx) = (p * theta[0]).sin_cos();
                let (sy, cy) = (q * theta[1]).sin_cos();
                DVector::from_vec(vec![-p * sx * sy, q * cx * cy])
            }
            Barrier::MinOfCircles { centers, radii } => {
                let (i, _, dist) = Self::active_circle(centers, radii, theta);
                let c = DVector::from_column_slice(&centers[i]);
                (theta - c) / dist
            }
            Barrier::Ball { center, .. } => (theta - DVector::from_column_slice(center)) * -2.0,
        }
    }

    /// Hessian of `h`. For min-of-circles this is the active circle's Hessian;
    /// use [`Barrier::is_nonsmooth_at`] to detect the medial axis.
    pub fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dimension();
        match self {
            Barrier::HalfSpace { .. } => DMatrix::zeros(n, n),
            Barrier::TrigField { cos_coeff, sin_coeff } => {
                let (p, q) = (cos_coeff * PI, sin_coeff * PI);
                let (sx, cx) = (p * theta[0]).sin_cos();
                let (sy, cy) = (q * theta[1]).sin_cos();
                let off = -p * q * sx * cy;
                DMatrix::from_row_slice(2, 2, &[-p * p * cx * sy, off, off, -q * q * cx * sy])
            }
            Barrier::MinOfCircles { centers, radii } => {
                let (i, _, dist) = Self::active_circle(centers, radii, theta);
                let u = (theta - DVector::from_column_slice(&centers[i])) / dist;
                (DMatrix::identity(n, n) - &u * u.transpose()) / dist
            }
            Barrier::Ball { .. } => DMatrix::identity(n, n) * -2.0,
        }
    }

    /// True on the min-of-circles medial axis, where two circles tie for the minimum.
    pub fn is_nonsmooth_at(&self, theta: &DVector<f64>) -> bool {
        match self {
            Barrier::MinOfCircles { centers, radii } if centers.len() > 1 => {
                let mut vals: Vec<f64> = Self::circle_values(centers, radii, theta).map(|(h, _)| h).collect();
                vals.sort_by(f64::total_cmp);
                (vals[1] - vals[0]).abs() <= MEDIAL_AXIS_TOL * (1.0 + vals[0].abs())
            }
            _ => false,
        }
    }

    /// Gap between the smallest and second smallest circle value; infinite
    /// for smooth families.
    pub fn smoothness_gap(&self, theta: &DVector<f64>) -> f64 {
        match self {
            Barrier::MinOfCircles { centers, radii } if centers.len() > 1 => {
                let mut vals: Vec<f64> = Self::circle_values(centers, radii, theta).map(|(h, _)| h).collect();
                vals.sort_by(f64::total_cmp);
                vals[1] - vals[0]
            }
            _ => f64::INFINITY,
        }
    }
}

/// Barrier-augmented problem `Ĵ = J − μ log h`.
///
/// A problem with `μ = 0` is the unconstrained variant: `Ĵ = J`, no safety
/// errors are raised and `h` is only reported.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    cost: QuadraticCost,
    barrier: Barrier,
    mu: f64,
}

impl Problem {
    pub fn new(cost: QuadraticCost, barrier: Barrier, mu: f64) -> Result<Self, ObjectiveError> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(ObjectiveError::InvalidMu(mu));
        }
        Self::build(cost, barrier, mu)
    }

    /// The unconstrained counterpart of a problem: barrier kept for reporting only.
    pub fn unconstrained(cost: QuadraticCost, barrier: Barrier) -> Result<Self, ObjectiveError> {
        Self::build(cost, barrier, 0.0)
    }

    fn build(cost: QuadraticCost, barrier: Barrier, mu: f64) -> Result<Self, ObjectiveError> {
        barrier.validate()?;
        if barrier.dimension() != cost.dimension() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: cost.dimension(),
                got: barrier.dimension(),
            });
        }
        Ok(Self { cost, barrier, mu })
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self, ObjectiveError> {
        Self::new(self.cost.clone(), self.barrier.clone(), mu)
    }

    pub fn without_barrier(&self) -> Self {
        Self {
            mu: 0.0,
            ..self.clone()
        }
    }

    pub fn cost(&self) -> &QuadraticCost {
        &self.cost
    }

    pub fn barrier(&self) -> &Barrier {
        &self.barrier
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn dimension(&self) -> usize {
        self.cost.dimension()
    }

    pub fn barrier_enabled(&self) -> bool {
        self.mu > 0.0
    }

    /// `h(θ)` if strictly positive, otherwise a [`ObjectiveError::BarrierViolation`].
    pub fn safe_barrier_value(&self, theta: &DVector<f64>) -> Result<f64, ObjectiveError> {
        let h = self.barrier.value(theta);
        if h > 0.0 {
            Ok(h)
        } else {
            Err(ObjectiveError::BarrierViolation {
                point: theta.iter().copied().collect(),
                h,
            })
        }
    }

    fn check_dim(&self, theta: &DVector<f64>) -> Result<(), ObjectiveError> {
        if theta.len() != self.dimension() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.dimension(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// `Ĵ(θ) = J(θ) − μ log h(θ)`.
    pub fn modified_cost(&self, theta: &DVector<f64>) -> Result<f64, ObjectiveError> {
        self.check_dim(theta)?;
        let j = self.cost.value(theta);
        if !self.barrier_enabled() {
            return Ok(j);
        }
        let h = self.safe_barrier_value(theta)?;
        Ok(j - self.mu * h.ln())
    }

    /// `∇Ĵ(θ) = H(θ − θ*) − μ ∇h / h`.
    pub fn modified_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        self.check_dim(theta)?;
        let g = self.cost.gradient(theta);
        if !self.barrier_enabled() {
            return Ok(g);
        }
        let h = self.safe_barrier_value(theta)?;
        Ok(g - self.barrier.gradient(theta) * (self.mu / h))
    }

    /// `∇²Ĵ(θ) = H − (μ/h) ∇²h + (μ/h²) ∇h ∇hᵀ`.
    pub fn modified_hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>, ObjectiveError> {
        self.check_dim(theta)?;
        if !self.barrier_enabled() {
            return Ok(self.cost.hessian().clone());
        }
        let h = self.safe_barrier_value(theta)?;
        if self.barrier.is_nonsmooth_at(theta) {
            return Err(ObjectiveError::NonsmoothPoint {
                point: theta.iter().copied().collect(),
            });
        }
        let gh = self.barrier.gradient(theta);
        Ok(self.cost.hessian() - self.barrier.hessian(theta) * (self.mu / h)
            + &gh * gh.transpose() * (self.mu / (h * h)))
    }

    /// Lie derivative of `h` along the gradient flow `θ̇ = −k ∇Ĵ`:
    /// `k μ ‖∇h‖² / h − k ∇J · ∇h`.
    pub fn barrier_lie_derivative(&self, theta: &DVector<f64>, gain: f64) -> Result<f64, ObjectiveError> {
        let h = self.safe_barrier_value(theta)?;
        let gh = self.barrier.gradient(theta);
        Ok(gain * self.mu * gh.norm_squared() / h - gain * self.cost.gradient(theta).dot(&gh))
    }
}

/// Central-difference gradient of a scalar map with step `max(1e-6, 1e-6‖θ‖)`.
pub fn fd_gradient<F, E>(f: F, theta: &DVector<f64>) -> Result<DVector<f64>, E>
where
    F: Fn(&DVector<f64>) -> Result<f64, E>,
{
    let step = fd_step(theta);
    let mut out = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += step;
        minus[i] -= step;
        out[i] = (f(&plus)? - f(&minus)?) / (2.0 * step);
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector map, column `j` = ∂f/∂θ_j.
pub fn fd_jacobian<F, E>(f: F, theta: &DVector<f64>) -> Result<DMatrix<f64>, E>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, E>,
{
    let step = fd_step(theta);
    let n = theta.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += step;
        minus[j] -= step;
        cols.push((f(&plus)? - f(&minus)?) / (2.0 * step));
    }
    Ok(DMatrix::from_columns(&cols))
}

pub fn fd_step(theta: &DVector<f64>) -> f64 {
    (1e-6 * theta.norm()).max(1e-6)
}
