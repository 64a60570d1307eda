//! Viscous Burgers' equation on the periodic unit interval and its
//! pseudo-spectral reference solver.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Jet2, NodeId};
use crate::{Error, Result};

use super::grf::FourierSeries;

/// Field sampled on `nt` uniform times in `[0, 1]` × `nx` periodic points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    pub nx: usize,
    pub nt: usize,
    /// Row `i` holds time `i / (nt - 1)`.
    pub values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn slice(&self, i: usize) -> &[f64] {
        &self.values[i * self.nx..(i + 1) * self.nx]
    }

    pub fn time(&self, i: usize) -> f64 {
        if self.nt == 1 {
            0.0
        } else {
            i as f64 / (self.nt - 1) as f64
        }
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 / self.nx as f64
    }

    /// Bilinear interpolation, periodic in `x`.
    pub fn interpolate(&self, x: f64, t: f64) -> f64 {
        let xs = x.rem_euclid(1.0) * self.nx as f64;
        let j0 = (xs.floor() as usize) % self.nx;
        let j1 = (j0 + 1) % self.nx;
        let fx = xs - xs.floor();
        let ts = (t.clamp(0.0, 1.0)) * (self.nt - 1) as f64;
        let i0 = (ts.floor() as usize).min(self.nt - 1);
        let i1 = (i0 + 1).min(self.nt - 1);
        let ft = ts - i0 as f64;
        let at = |i: usize| {
            let row = self.slice(i);
            row[j0] * (1.0 - fx) + row[j1] * fx
        };
        at(i0) * (1.0 - ft) + at(i1) * ft
    }
}

/// Settings of the split-step reference solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersSolverConfig {
    pub nx: usize,
    pub nt: usize,
    /// RK4 substeps between consecutive recorded slices.
    pub steps_per_slice: usize,
}

impl Default for BurgersSolverConfig {
    fn default() -> Self {
        Self {
            nx: 1024,
            nt: 101,
            steps_per_slice: 100,
        }
    }
}

/// Pseudo-spectral solve of `u_t + u u_x = ν u_xx` on `[0,1)×[0,1]`.
///
/// Spatial derivatives through the FFT with 2/3 dealiasing of the
/// nonlinear flux; the diffusion term is integrated exactly by an
/// integrating factor and the advection term by classical RK4.
pub fn burgers_reference(u0: &[f64], nu: f64, cfg: &BurgersSolverConfig) -> Result<SpaceTimeField> {
    let nx = cfg.nx;
    if !nx.is_power_of_two() || nx < 4 {
        return Err(Error::InvalidConfig(format!("nx must be a power of two >= 4, got {nx}")));
    }
    if u0.len() != nx {
        return Err(Error::Shape(format!("initial condition has {} points, expected {nx}", u0.len())));
    }
    if !(nu > 0.0) {
        return Err(Error::InvalidConfig(format!("viscosity must be positive, got {nu}")));
    }
    if cfg.nt < 2 || cfg.steps_per_slice < 1 {
        return Err(Error::InvalidConfig("need nt >= 2 and steps_per_slice >= 1".into()));
    }

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nx);
    let inv = planner.plan_fft_inverse(nx);
    let dt = 1.0 / ((cfg.nt - 1) * cfg.steps_per_slice) as f64;

    let cutoff = nx / 3;
    let mut ik = vec![Complex64::new(0.0, 0.0); nx];
    let mut e_full = vec![0.0; nx];
    let mut e_half = vec![0.0; nx];
    for j in 0..nx {
        let m = if j <= nx / 2 { j as i64 } else { j as i64 - nx as i64 };
        let k = std::f64::consts::TAU * m as f64;
        let keep = m.unsigned_abs() as usize <= cutoff && j != nx / 2;
        if keep {
            ik[j] = Complex64::new(0.0, k);
        }
        e_full[j] = (-nu * k * k * dt).exp();
        e_half[j] = (-nu * k * k * dt * 0.5).exp();
    }

    let scale = 1.0 / nx as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); nx];
    // N(v) = -ik · FFT(u²/2), u = IFFT(v), dealiased through `ik`.
    let mut flux = |v: &[Complex64], out: &mut [Complex64]| {
        buf.copy_from_slice(v);
        inv.process(&mut buf);
        for c in buf.iter_mut() {
            let u = c.re * scale;
            *c = Complex64::new(0.5 * u * u, 0.0);
        }
        fwd.process(&mut buf);
        for j in 0..nx {
            out[j] = -ik[j] * buf[j];
        }
    };

    let mut v: Vec<Complex64> = u0.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fwd.process(&mut v);
    let zero = Complex64::new(0.0, 0.0);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![zero; nx], vec![zero; nx], vec![zero; nx], vec![zero; nx]);
    let mut tmp = vec![zero; nx];

    let mut values = Vec::with_capacity(nx * cfg.nt);
    values.extend_from_slice(u0);
    let mut step = 0usize;
    for _slice in 1..cfg.nt {
        for _ in 0..cfg.steps_per_slice {
            step += 1;
            flux(&v, &mut k1);
            for j in 0..nx {
                tmp[j] = e_half[j] * (v[j] + 0.5 * dt * k1[j]);
            }
            flux(&tmp, &mut k2);
            for j in 0..nx {
                tmp[j] = e_half[j] * v[j] + 0.5 * dt * k2[j];
            }
            flux(&tmp, &mut k3);
            for j in 0..nx {
                tmp[j] = e_full[j] * v[j] + dt * e_half[j] * k3[j];
            }
            flux(&tmp, &mut k4);
            for j in 0..nx {
                v[j] = e_full[j] * v[j]
                    + dt / 6.0 * (e_full[j] * k1[j] + 2.0 * e_half[j] * (k2[j] + k3[j]) + k4[j]);
            }
            if !v.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
                return Err(Error::Solver(format!("Burgers solver produced non-finite values at step {step}")));
            }
        }
        tmp.copy_from_slice(&v);
        inv.process(&mut tmp);
        values.extend(tmp.iter().map(|c| c.re * scale));
    }
    Ok(SpaceTimeField {
        nx,
        nt: cfg.nt,
        values,
    })
}

/// One Burgers instance: initial condition `u0` and viscosity `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct BurgersProblem {
    pub u0: FourierSeries,
    pub nu: f64,
    /// Append `ν` to the descriptor (heterogeneous-viscosity family).
    pub heterogeneous: bool,
    pub reference: Option<Arc<SpaceTimeField>>,
}

pub const DESCRIPTOR_POINTS: usize = 128;

impl BurgersProblem {
    pub fn new(u0: FourierSeries, nu: f64, heterogeneous: bool) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::InvalidConfig(format!("viscosity must be positive, got {nu}")));
        }
        Ok(Self {
            u0,
            nu,
            heterogeneous,
            reference: None,
        })
    }

    pub fn descriptor(&self) -> Vec<f64> {
        let mut d = self.u0.sample_grid(DESCRIPTOR_POINTS);
        if self.heterogeneous {
            d.push(self.nu);
        }
        d
    }

    pub fn solve_reference(&mut self, cfg: &BurgersSolverConfig) -> Result<Arc<SpaceTimeField>> {
        let u0 = self.u0.sample_grid(cfg.nx);
        let field = Arc::new(burgers_reference(&u0, self.nu, cfg)?);
        self.reference = Some(field.clone());
        Ok(field)
    }

    /// `u_t + u u_x − ν u_xx` with coordinates `(x, t)`.
    pub fn residual(&self, g: &mut Graph, u: &Jet2) -> NodeId {
        let adv = g.mul(u.val, u.d1[0]);
        let diff = g.scale(-self.nu, u.d2[0]);
        let s = g.add(u.d1[1], adv);
        g.add(s, diff)
    }

    /// `u(x, 0) − u0(x)`.
    pub fn boundary(&self, g: &mut Graph, u: NodeId, x: &[f64]) -> NodeId {
        let target = g.constant(-self.u0.eval(x[0]));
        g.add(u, target)
    }
}
