//! Gaussian random fields as truncated random Fourier series.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrfDomain {
    /// Periodic interval `[0, period)`; mode `k` has wavenumber `2πk/period`.
    PeriodicInterval { period: f64 },
    /// Unit circle parametrized by angle; mode `k` has wavenumber `k`.
    UnitCircle,
}

impl GrfDomain {
    pub fn period(&self) -> f64 {
        match self {
            GrfDomain::PeriodicInterval { period } => *period,
            GrfDomain::UnitCircle => std::f64::consts::TAU,
        }
    }
}

/// Covariance `scale · (−Δ + shift·I)^(−exponent)`, truncated at `max_mode`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfSpec {
    pub scale: f64,
    pub shift: f64,
    pub exponent: f64,
    pub max_mode: usize,
    pub domain: GrfDomain,
}

impl GrfSpec {
    /// `N(0, 100 (−Δ + 9I)^(−3))` on the unit periodic interval.
    pub fn burgers() -> Self {
        Self {
            scale: 100.0,
            shift: 9.0,
            exponent: 3.0,
            max_mode: 64,
            domain: GrfDomain::PeriodicInterval { period: 1.0 },
        }
    }

    /// `N(0, 100 (−Δ + 25I)^(−2.5))`, the out-of-distribution initial data.
    pub fn burgers_extrapolation() -> Self {
        Self {
            shift: 25.0,
            exponent: 2.5,
            ..Self::burgers()
        }
    }

    /// `N(0, 10^{3/2} (−Δ + 100I)^(−3))` on the unit circle.
    pub fn laplace_circle() -> Self {
        Self {
            scale: 10f64.powf(1.5),
            shift: 100.0,
            exponent: 3.0,
            max_mode: 32,
            domain: GrfDomain::UnitCircle,
        }
    }

    pub fn wavenumber(&self, k: usize) -> f64 {
        match self.domain {
            GrfDomain::PeriodicInterval { period } => std::f64::consts::TAU * k as f64 / period,
            GrfDomain::UnitCircle => k as f64,
        }
    }

    /// Standard deviation of the mode-`k` coefficients.
    pub fn mode_std(&self, k: usize) -> f64 {
        let kk = self.wavenumber(k);
        self.scale.sqrt() * (kk * kk + self.shift).powf(-self.exponent / 2.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.scale > 0.0 && self.shift > 0.0 && self.exponent > 0.0) {
            return Err("GRF scale, shift and exponent must be positive".into());
        }
        if self.domain.period() <= 0.0 {
            return Err("GRF period must be positive".into());
        }
        Ok(())
    }
}

/// `a0 + Σ_k a_k cos(2πk x/P) + b_k sin(2πk x/P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSeries {
    pub period: f64,
    pub a0: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FourierSeries {
    pub fn zero(period: f64, modes: usize) -> Self {
        Self {
            period,
            a0: 0.0,
            cos: vec![0.0; modes],
            sin: vec![0.0; modes],
        }
    }

    pub fn modes(&self) -> usize {
        self.cos.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let w = std::f64::consts::TAU / self.period * x;
        let (s1, c1) = w.sin_cos();
        // Chebyshev-style rotation keeps the sum at one sin_cos per point.
        let (mut s, mut c) = (0.0, 1.0);
        let mut acc = self.a0;
        for (a, b) in self.cos.iter().zip(&self.sin) {
            let (ns, nc) = (s * c1 + c * s1, c * c1 - s * s1);
            s = ns;
            c = nc;
            acc += a * c + b * s;
        }
        acc
    }

    pub fn sample_grid(&self, n: usize) -> Vec<f64> {
        (0..n).map(|j| self.eval(self.period * j as f64 / n as f64)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.a0.is_finite() && self.cos.iter().chain(&self.sin).all(|v| v.is_finite())
    }
}

/// Draws one field: independent Gaussians for mode 0 and for each
/// (cos, sin) pair, scaled by the per-mode standard deviation.
pub fn grf_sample<R: Rng + ?Sized>(spec: &GrfSpec, rng: &mut R) -> FourierSeries {
    let mut f = FourierSeries::zero(spec.domain.period(), spec.max_mode);
    let z: f64 = rng.sample(StandardNormal);
    f.a0 = spec.mode_std(0) * z;
    for k in 1..=spec.max_mode {
        let s = spec.mode_std(k);
        let zc: f64 = rng.sample(StandardNormal);
        let zs: f64 = rng.sample(StandardNormal);
        f.cos[k - 1] = s * zc;
        f.sin[k - 1] = s * zs;
    }
    f
}
