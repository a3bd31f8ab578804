//! Sinusoidal dither and demodulation signals for multivariable extremum seeking.
//!
//! Channel `i` probes with `s_i(τ) = r_i sin(ω'_i τ)` and demodulates with
//! `m_i(τ, a) = 2 / (a r_i) · sin(ω'_i τ)`, where `τ = ω t` is the fast time.
//! Relative rates are rational so that all channels share a common period.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_integer::Integer;
use num_rational::Rational64;
use thiserror::Error;

/// Exact relative dither rate `ω'_i`. Always kept in lowest terms with a
/// positive denominator.
pub type Rational = Rational64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("dither needs at least one channel")]
    Empty,
    #[error("{rates} relative rates but {amplitudes} relative amplitudes")]
    LengthMismatch { rates: usize, amplitudes: usize },
    #[error("relative rate {index} is zero")]
    ZeroRate { index: usize },
    #[error("relative rates {i} and {j} coincide")]
    RepeatedRate { i: usize, j: usize },
    #[error("relative rates violate decoupling: rate {i} + rate {j} = rate {k}")]
    SumCollision { i: usize, j: usize, k: usize },
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("rational with zero denominator")]
    ZeroDenominator,
}

/// Builds a rational rate, rejecting a zero denominator.
pub fn rational(numerator: i64, denominator: i64) -> Result<Rational, SignalError> {
    if denominator == 0 {
        return Err(SignalError::ZeroDenominator);
    }
    Ok(Rational::new(numerator, denominator))
}

/// Dither configuration: relative rates and amplitudes per channel, the global
/// amplitude `a` and the base rate `ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherSpec {
    relative_rates: Vec<Rational>,
    relative_amplitudes: Vec<f64>,
    amplitude: f64,
    base_rate: f64,
    rates_f64: Vec<f64>,
}

fn check_positive(name: &'static str, value: f64) -> Result<(), SignalError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(SignalError::NonPositive { name, value })
    }
}

impl DitherSpec {
    pub fn new(
        relative_rates: Vec<Rational>,
        relative_amplitudes: Vec<f64>,
        amplitude: f64,
        base_rate: f64,
    ) -> Result<Self, SignalError> {
        let n = relative_rates.len();
        if n == 0 {
            return Err(SignalError::Empty);
        }
        if relative_amplitudes.len() != n {
            return Err(SignalError::LengthMismatch {
                rates: n,
                amplitudes: relative_amplitudes.len(),
            });
        }
        check_positive("amplitude", amplitude)?;
        check_positive("base rate", base_rate)?;
        for &r in &relative_amplitudes {
            check_positive("relative amplitude", r)?;
        }
        for (index, rate) in relative_rates.iter().enumerate() {
            if *rate.numer() == 0 {
                return Err(SignalError::ZeroRate { index });
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if relative_rates[i] == relative_rates[j] {
                    return Err(SignalError::RepeatedRate { i, j });
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if j == i {
                    continue;
                }
                for k in 0..n {
                    if k != i && k != j && relative_rates[i] + relative_rates[j] == relative_rates[k] {
                        return Err(SignalError::SumCollision { i, j, k });
                    }
                }
            }
        }
        let rates_f64 = relative_rates
            .iter()
            .map(|q| *q.numer() as f64 / *q.denom() as f64)
            .collect();
        Ok(Self {
            relative_rates,
            relative_amplitudes,
            amplitude,
            base_rate,
            rates_f64,
        })
    }

    /// Unit relative amplitudes and the default rate set for `n` channels:
    /// `[1]` in 1D, `[3/4, 1]` in 2D, odd integers `[1, 3, 5, ...]` beyond
    /// (a sum of two odd rates is even, so decoupling holds).
    pub fn default_for(n: usize, amplitude: f64, base_rate: f64) -> Result<Self, SignalError> {
        let rates = match n {
            1 => vec![Rational::from_integer(1)],
            2 => vec![Rational::new(3, 4), Rational::from_integer(1)],
            _ => (0..n as i64)
                .map(|i| Rational::from_integer(2 * i + 1))
                .collect(),
        };
        Self::new(rates, vec![1.0; n], amplitude, base_rate)
    }

    pub fn dimension(&self) -> usize {
        self.relative_rates.len()
    }

    pub fn relative_rates(&self) -> &[Rational] {
        &self.relative_rates
    }

    pub fn relative_amplitudes(&self) -> &[f64] {
        &self.relative_amplitudes
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn base_rate(&self) -> f64 {
        self.base_rate
    }

    /// Same relative structure with a different amplitude `a`.
    pub fn with_amplitude(&self, amplitude: f64) -> Result<Self, SignalError> {
        check_positive("amplitude", amplitude)?;
        Ok(Self {
            amplitude,
            ..self.clone()
        })
    }

    /// Same relative structure with a different base rate `ω`.
    pub fn with_base_rate(&self, base_rate: f64) -> Result<Self, SignalError> {
        check_positive("base rate", base_rate)?;
        Ok(Self {
            base_rate,
            ..self.clone()
        })
    }

    /// `s(τ)`.
    pub fn dither(&self, tau: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.dimension(),
            self.rates_f64
                .iter()
                .zip(&self.relative_amplitudes)
                .map(|(w, r)| r * (w * tau).sin()),
        )
    }

    /// `m(τ, a)`.
    pub fn demod(&self, tau: f64) -> DVector<f64> {
        let a = self.amplitude;
        DVector::from_iterator(
            self.dimension(),
            self.rates_f64
                .iter()
                .zip(&self.relative_amplitudes)
                .map(|(w, r)| 2.0 / (a * r) * (w * tau).sin()),
        )
    }

    /// Probe offset `a·s(τ)`.
    pub fn probe_offset(&self, tau: f64) -> DVector<f64> {
        self.dither(tau) * self.amplitude
    }

    /// Upper bound `R = sqrt(Σ r_i²)` on `‖s(τ)‖`.
    pub fn amplitude_bound(&self) -> f64 {
        self.relative_amplitudes.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    /// Fastest absolute dither frequency `ω · max |ω'_i|` in rad per unit time.
    pub fn fastest_frequency(&self) -> f64 {
        self.base_rate * self.rates_f64.iter().fold(0.0_f64, |acc, w| acc.max(w.abs()))
    }

    /// Smallest `T > 0` in fast time `τ` at which every channel repeats.
    pub fn common_period(&self) -> f64 {
        // Rates were validated nonzero at construction.
        common_period_of(&self.relative_rates).expect("validated rates")
    }

    /// Matrix `G_ij = (1/T) ∫_0^T s_i(τ) m_j(τ, a) dτ` by composite Simpson
    /// over one common period. Ideally equals `I / a`.
    pub fn verify_orthogonality(&self, quad_points: usize) -> DMatrix<f64> {
        let n = self.dimension();
        let period = self.common_period();
        let mut g = DMatrix::zeros(n, n);
        periodic_simpson(period, quad_points, |tau| {
            let s = self.dither(tau);
            let m = self.demod(tau);
            s * m.transpose()
        }, &mut g);
        g
    }
}

/// Multiplier `q` such that the common period of sinusoids with the given
/// relative rates is `T = 2π q`.
///
/// The channel periods are `2π d_i / |p_i|`; the least common multiple of
/// the rationals `d_i / |p_i|` (each in lowest terms) is `lcm(d_i) / gcd(|p_i|)`.
pub fn common_period_multiple(rates: &[Rational]) -> Result<Rational, SignalError> {
    if rates.is_empty() {
        return Err(SignalError::Empty);
    }
    let mut lcm_den = 1_i64;
    let mut gcd_num = 0_i64;
    for (index, q) in rates.iter().enumerate() {
        if *q.numer() == 0 {
            return Err(SignalError::ZeroRate { index });
        }
        lcm_den = lcm_den.lcm(q.denom());
        gcd_num = gcd_num.gcd(&q.numer().abs());
    }
    Ok(Rational::new(lcm_den, gcd_num))
}

/// Common period in fast time of sinusoids with the given relative rates.
/// Only requires the rates to be nonzero; the decoupling condition is not checked.
pub fn common_period_of(rates: &[Rational]) -> Result<f64, SignalError> {
    let q = common_period_multiple(rates)?;
    Ok(2.0 * PI * (*q.numer() as f64) / (*q.denom() as f64))
}

/// Simpson weights on `intervals` (rounded up to even) uniform sub-intervals.
pub(crate) fn simpson_nodes(period: f64, intervals: usize) -> impl Iterator<Item = (f64, f64)> {
    let n = (intervals.max(2) + 1) & !1;
    let h = period / n as f64;
    (0..=n).map(move |j| {
        let w = if j == 0 || j == n {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        (j as f64 * h, w * h / 3.0)
    })
}

/// Accumulates the period-average `(1/T) ∫_0^T f(τ) dτ` into `out`.
pub(crate) fn periodic_simpson<F>(period: f64, intervals: usize, mut f: F, out: &mut DMatrix<f64>)
where
    F: FnMut(f64) -> DMatrix<f64>,
{
    out.fill(0.0);
    for (tau, w) in simpson_nodes(period, intervals) {
        *out += f(tau) * w;
    }
    *out /= period;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(rates: &[(i64, i64)], amps: &[f64], a: f64) -> DitherSpec {
        DitherSpec::new(
            rates.iter().map(|&(p, q)| Rational::new(p, q)).collect(),
            amps.to_vec(),
            a,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn dither_values() {
        let s1 = spec(&[(1, 1)], &[1.0], 1.0);
        assert_eq!(s1.dither(0.0)[0], 0.0);
        assert_abs_diff_eq!(s1.dither(PI / 2.0)[0], 1.0, epsilon = 1e-15);

        let s2 = spec(&[(3, 2), (2, 1)], &[1.0, 1.0], 1.0);
        let v = s2.dither(PI);
        assert_abs_diff_eq!(v[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn demod_values() {
        let s = spec(&[(1, 1)], &[1.0], 0.5);
        assert_abs_diff_eq!(s.demod(PI / 2.0)[0], 4.0, epsilon = 1e-14);
        let s = spec(&[(1, 1)], &[2.0], 0.25);
        assert_abs_diff_eq!(s.demod(PI / 2.0)[0], 4.0, epsilon = 1e-14);
        let s = spec(&[(3, 2), (2, 1)], &[1.0, 3.0], 0.1);
        assert!(s.demod(0.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn common_periods() {
        assert_abs_diff_eq!(spec(&[(1, 1)], &[1.0], 1.0).common_period(), 2.0 * PI);
        assert_abs_diff_eq!(
            spec(&[(3, 2), (2, 1)], &[1.0, 1.0], 1.0).common_period(),
            4.0 * PI
        );
        let ints: Vec<Rational> = [1, 2, 3].into_iter().map(Rational::from_integer).collect();
        assert_abs_diff_eq!(common_period_of(&ints).unwrap(), 2.0 * PI);
        assert_eq!(
            common_period_of(&[Rational::new(1, 2), Rational::from_integer(0)]).unwrap_err(),
            SignalError::ZeroRate { index: 1 }
        );
        assert_abs_diff_eq!(DitherSpec::default_for(2, 0.25, 100.0).unwrap().common_period(), 8.0 * PI);
    }

    #[test]
    fn rates_one_two_three_collide() {
        // 1 + 2 = 3 breaks the decoupling condition even though the period is 2π.
        let err = DitherSpec::new(
            vec![Rational::from_integer(1), Rational::from_integer(2), Rational::from_integer(3)],
            vec![1.0; 3],
            1.0,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, SignalError::SumCollision { .. }));
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(
            DitherSpec::new(vec![Rational::from_integer(0)], vec![1.0], 1.0, 1.0).unwrap_err(),
            SignalError::ZeroRate { index: 0 }
        );
        assert!(matches!(
            DitherSpec::new(vec![Rational::new(1, 2), Rational::new(2, 4)], vec![1.0; 2], 1.0, 1.0),
            Err(SignalError::RepeatedRate { i: 0, j: 1 })
        ));
        assert!(matches!(
            DitherSpec::new(vec![Rational::from_integer(1)], vec![1.0, 2.0], 1.0, 1.0),
            Err(SignalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            DitherSpec::new(vec![Rational::from_integer(1)], vec![1.0], -0.1, 1.0),
            Err(SignalError::NonPositive { .. })
        ));
        assert!(matches!(
            DitherSpec::new(vec![Rational::from_integer(1)], vec![0.0], 0.1, 1.0),
            Err(SignalError::NonPositive { .. })
        ));
        assert_eq!(rational(1, 0).unwrap_err(), SignalError::ZeroDenominator);
        assert_eq!(rational(-6, -4).unwrap(), Rational::new(3, 2));
    }

    #[test]
    fn orthogonality_matches_inverse_amplitude() {
        let g = spec(&[(1, 1)], &[1.0], 0.25).verify_orthogonality(64);
        assert_abs_diff_eq!(g[(0, 0)], 4.0, epsilon = 1e-9);
        let g = spec(&[(1, 1)], &[1.0], 1.0).verify_orthogonality(64);
        assert_abs_diff_eq!(g[(0, 0)], 1.0, epsilon = 1e-9);
        let g = spec(&[(3, 2), (2, 1)], &[1.0, 1.0], 0.5).verify_orthogonality(256);
        assert_abs_diff_eq!(g[(0, 1)], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[(1, 0)], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[(0, 0)], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[(1, 1)], 2.0, epsilon = 1e-9);
    }
}
