//! Error metrics, confidence intervals, PCA projections of solution
//! families and the empirical latent-manifold gap.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::network::{batch, NetworkWeights};
use crate::training::{adam_step, csv_err, AdamState, RunTrace};
use crate::{Error, Result};

/// `‖pred − ref‖₂ / ‖ref‖₂`.
pub fn relative_l2(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        num += (p - r) * (p - r);
        den += r * r;
    }
    if !(den > 0.0) {
        return Err(Error::InvalidConfig("reference has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Sample mean and Student-t 95% half-width with `N − 1` degrees of freedom.
pub fn mean_and_ci(errors: &[f64]) -> Result<(f64, f64)> {
    let n = errors.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("confidence interval needs at least 2 values, got {n}")));
    }
    let mean = errors.iter().sum::<f64>() / n as f64;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * (var / n as f64).sqrt()))
}

/// Per-task final errors with their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub tasks: Vec<String>,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
}

impl ErrorReport {
    pub fn new(tasks: Vec<String>, errors: Vec<f64>) -> Result<Self> {
        if tasks.len() != errors.len() {
            return Err(Error::Shape("one task name per error".into()));
        }
        if errors.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::InvalidConfig("errors must be non-negative".into()));
        }
        let (mean, half_width) = match errors.len() {
            0 => return Err(Error::InvalidConfig("error report needs at least one task".into())),
            1 => (errors[0], 0.0),
            _ => mean_and_ci(&errors)?,
        };
        Ok(Self {
            tasks,
            errors,
            mean,
            half_width,
        })
    }

    /// `task,error` rows.
    pub fn write_table<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task", "error"]).map_err(csv_err)?;
        for (t, e) in self.tasks.iter().zip(&self.errors) {
            w.write_record([t.clone(), format!("{e:e}")]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `n,mean,ci95_half_width`.
    pub fn write_summary<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "mean", "ci95_half_width"]).map_err(csv_err)?;
        w.write_record([
            self.errors.len().to_string(),
            format!("{:e}", self.mean),
            format!("{:e}", self.half_width),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

/// First recorded iteration whose relative L2 is at most `tau`.
pub fn iterations_to_threshold(trace: &RunTrace, tau: f64) -> Option<usize> {
    trace
        .rows
        .iter()
        .find(|r| r.relative_l2.is_some_and(|e| e <= tau))
        .map(|r| r.iteration)
}

/// Top-two principal coordinates of a set of discretized functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldProjection {
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance carried by each of the two components.
    pub explained: [f64; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Principal directions on the grid, sign-normalized.
    pub components: [Vec<f64>; 2],
    pub labels: Vec<String>,
    /// Fewer than two nonzero principal directions; missing coordinates are 0.
    pub rank_deficient: bool,
}

impl ManifoldProjection {
    /// `sample_id,pc1,pc2,label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "pc1", "pc2", "label"]).map_err(csv_err)?;
        for (i, (c, l)) in self.coords.iter().zip(&self.labels).enumerate() {
            w.write_record([i.to_string(), format!("{:e}", c[0]), format!("{:e}", c[1]), l.clone()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// PCA of mean-centered samples (rows) through a symmetric eigensolve of
/// the smaller of the covariance and Gram matrices. Each direction is
/// flipped so that its first nonzero grid component is positive.
pub fn pca_project(samples: &[Vec<f64>], labels: Vec<String>) -> Result<ManifoldProjection> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::InvalidConfig(format!("PCA needs at least 3 samples, got {n}")));
    }
    let g = samples[0].len();
    if g == 0 || samples.iter().any(|s| s.len() != g) {
        return Err(Error::Shape("samples must share a nonempty grid".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape("one label per sample".into()));
    }
    let mut x = DMatrix::from_fn(n, g, |i, j| samples[i][j]);
    for j in 0..g {
        let m = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-m);
    }
    let denom = (n - 1) as f64;

    // Eigenpairs sorted by decreasing eigenvalue, directions on the grid.
    let (vals, dirs): (Vec<f64>, Vec<Vec<f64>>) = if n < g {
        let gram = &x * x.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let dirs = idx
            .iter()
            .take(2)
            .map(|&i| {
                let u = eig.eigenvectors.column(i);
                let v = x.transpose() * u;
                let nv = v.norm();
                if nv > 0.0 {
                    (v / nv).iter().copied().collect()
                } else {
                    vec![0.0; g]
                }
            })
            .collect();
        (vals, dirs)
    } else {
        let cov = x.transpose() * &x / denom;
        let eig = SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..g).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let dirs = idx.iter().take(2).map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
        (vals, dirs)
    };

    let total: f64 = vals.iter().sum();
    let tol = 1e-12 * vals[0].max(f64::MIN_POSITIVE);
    let mut comps: [Vec<f64>; 2] = [vec![0.0; g], vec![0.0; g]];
    let mut rank_deficient = false;
    for k in 0..2 {
        if vals.get(k).copied().unwrap_or(0.0) <= tol {
            rank_deficient = true;
            continue;
        }
        let mut v = dirs[k].clone();
        if let Some(f) = v.iter().find(|c| c.abs() > 1e-14) {
            if *f < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        comps[k] = v;
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [dot(&comps[0]), dot(&comps[1])]
        })
        .collect();
    let frac = |k: usize| {
        if total > 0.0 && vals.get(k).copied().unwrap_or(0.0) > tol {
            vals[k] / total
        } else {
            0.0
        }
    };
    Ok(ManifoldProjection {
        coords,
        explained: [frac(0), frac(1)],
        eigenvalues: vals,
        components: comps,
        labels,
        rank_deficient,
    })
}

/// Optimizer settings of the manifold-gap search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSettings {
    pub iterations: usize,
    pub lr: f64,
    /// Learning rate halves every `half_life` iterations; 0 keeps it constant.
    pub half_life: usize,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 1e-2,
            half_life: 250,
        }
    }
}

/// Result for one reference field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub gap: f64,
    pub z: Vec<f64>,
    pub iterations: usize,
}

/// Estimates `inf_{‖z‖≤1} ‖u_θ(·, z) − u‖ / ‖u‖` on `grid` for each
/// reference field: Adam on the squared relative error from `z = 0`, with
/// projection onto the unit ball after every step and best-so-far tracking.
pub fn empirical_manifold_gap(
    weights: &NetworkWeights,
    references: &[Vec<f64>],
    grid: &[f64],
    settings: &GapSettings,
) -> Result<Vec<GapResult>> {
    let n = weights.config.latent_dim;
    let d = weights.config.spatial_dim;
    if grid.len() % d != 0 {
        return Err(Error::Shape("grid length is not a multiple of the spatial dimension".into()));
    }
    let layout = batch::LaneLayout::value_only(d);
    let mut out = Vec::with_capacity(references.len());
    for u in references {
        if u.len() * d != grid.len() {
            return Err(Error::Shape("reference field does not match the grid".into()));
        }
        let norm2: f64 = u.iter().map(|v| v * v).sum();
        if !(norm2 > 0.0) {
            return Err(Error::InvalidConfig("reference field has zero norm".into()));
        }
        let mut z = vec![0.0; n];
        let mut best = GapResult {
            gap: f64::INFINITY,
            z: z.clone(),
            iterations: 0,
        };
        let mut adam = AdamState::new(n);
        for k in 0..=settings.iterations {
            let tape = batch::forward(weights, grid, &z, &layout)?;
            let mut err2 = 0.0;
            let mut seed = tape.zero_output_grad();
            for (b, &ub) in u.iter().enumerate() {
                let r = tape.output(0, b, 0) - ub;
                err2 += r * r;
                seed[tape.output_index(0, b, 0)] = 2.0 * r / norm2;
            }
            let rel = (err2 / norm2).sqrt();
            if rel < best.gap {
                best = GapResult {
                    gap: rel,
                    z: z.clone(),
                    iterations: k,
                };
            }
            if n == 0 || k == settings.iterations {
                break;
            }
            let grads = batch::backward(weights, &z, &tape, &seed, false)?;
            let lr = match settings.half_life {
                0 => settings.lr,
                h => settings.lr * 0.5f64.powi((k / h) as i32),
            };
            adam_step(&mut adam, &mut z, &grads.latent, lr)?;
            let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nz > 1.0 {
                z.iter_mut().for_each(|v| *v /= nz);
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// `field,gap,z_norm` rows.
pub fn write_gap_table<W: Write>(gaps: &[GapResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["field", "gap", "z_norm"]).map_err(csv_err)?;
    for (i, g) in gaps.iter().enumerate() {
        let zn = g.z.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.write_record([i.to_string(), format!("{:e}", g.gap), format!("{zn:e}")])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{RunStatus, TraceRow};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn relative_l2_basics() {
        let r = vec![1.0, -2.0, 3.0];
        assert_eq!(relative_l2(&r, &r).unwrap(), 0.0);
        let p: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert!((relative_l2(&p, &r).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_l2(&r, &[0.0; 3]).is_err());
        assert!(relative_l2(&r, &[1.0]).is_err());
        let a = relative_l2(&[1.1, -2.0, 2.5], &r).unwrap();
        let b = relative_l2(&[-3.3, 6.0, -7.5], &[-3.0, 6.0, -9.0]).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn unit_basis_perturbation() {
        // ref = all ones in R^N, pred = ref + ‖ref‖ e₁ → error exactly 1
        for n in [4usize, 16, 100] {
            let r = vec![1.0; n];
            let mut p = r.clone();
            p[0] += (n as f64).sqrt();
            assert!((relative_l2(&p, &r).unwrap() - 1.0).abs() < 1e-14);
            // a unit bump has error 1/√N
            let mut q = r.clone();
            q[0] += 1.0;
            assert!((relative_l2(&q, &r).unwrap() - 1.0 / (n as f64).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn ci_basics() {
        assert_eq!(mean_and_ci(&[0.3, 0.3, 0.3]).unwrap(), (0.3, 0.0));
        assert_eq!(mean_and_ci(&[0.0, 1.0]).unwrap().0, 0.5);
        assert!(mean_and_ci(&[1.0]).is_err());
    }

    #[test]
    fn ci_coverage_near_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000;
        let mut covered = 0;
        for _ in 0..trials {
            let s: Vec<f64> = (0..5).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); 2.0 + 0.5 * e }).collect();
            let (m, h) = mean_and_ci(&s).unwrap();
            if (m - 2.0).abs() <= h {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        assert!((rate - 0.95).abs() < 0.01, "coverage {rate}");
    }

    #[test]
    fn report_mean_is_recomputable() {
        let e = vec![0.1, 0.2, 0.4];
        let r = ErrorReport::new(vec!["a".into(), "b".into(), "c".into()], e.clone()).unwrap();
        assert_eq!(r.mean, e.iter().sum::<f64>() / 3.0);
        assert!(ErrorReport::new(vec!["a".into()], vec![-1.0]).is_err());
    }

    fn trace(errs: &[Option<f64>]) -> RunTrace {
        RunTrace {
            rows: errs
                .iter()
                .enumerate()
                .map(|(i, e)| TraceRow {
                    iteration: i,
                    loss: 1.0,
                    relative_l2: *e,
                    lr: 1e-3,
                    elapsed_ms: 0,
                    phase: "x".into(),
                })
                .collect(),
            status: RunStatus::Completed,
        }
    }

    #[test]
    fn threshold_iterations() {
        assert_eq!(iterations_to_threshold(&trace(&[Some(0.01), Some(0.5)]), 0.1), Some(0));
        assert_eq!(
            iterations_to_threshold(&trace(&[Some(0.9), None, Some(0.3), Some(0.05), Some(0.01)]), 0.1),
            Some(3)
        );
        assert_eq!(iterations_to_threshold(&trace(&[Some(0.9), Some(0.8)]), 0.1), None);
    }

    fn random_samples(n: usize, g: usize, rank: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let basis: Vec<Vec<f64>> = (0..rank).map(|_| (0..g).map(|_| normal()).collect()).collect();
        (0..n)
            .map(|_| {
                let c: Vec<f64> = (0..rank).map(|_| normal()).collect();
                (0..g).map(|j| (0..rank).map(|r| c[r] * basis[r][j]).sum::<f64>() + 0.5).collect()
            })
            .collect()
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn pca_on_a_line() {
        let s = random_samples(10, 6, 1, 1);
        let p = pca_project(&s, labels(10)).unwrap();
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-10));
        assert!(p.rank_deficient);
    }

    #[test]
    fn pca_preserves_rank_two_distances() {
        for (n, g) in [(8, 20), (30, 5)] {
            let s = random_samples(n, g, 2, 2);
            let p = pca_project(&s, labels(n)).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let dx: f64 = s[i].iter().zip(&s[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    let dp = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
                    assert!((dx - dp).abs() < 1e-9 * (1.0 + dx));
                }
            }
            assert!(p.explained[0] + p.explained[1] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn pca_reconstruction_error_is_trailing_spectrum() {
        for (n, g) in [(12, 30), (40, 6)] {
            let s = random_samples(n, g, 5, 3);
            let p = pca_project(&s, labels(n)).unwrap();
            let mean: Vec<f64> = (0..g).map(|j| s.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
            let mut recon = 0.0;
            for (i, row) in s.iter().enumerate() {
                for j in 0..g {
                    let approx = mean[j] + p.coords[i][0] * p.components[0][j] + p.coords[i][1] * p.components[1][j];
                    recon += (row[j] - approx).powi(2);
                }
            }
            let trailing: f64 = p.eigenvalues[2..].iter().sum::<f64>() * (n - 1) as f64;
            assert!((recon - trailing).abs() < 1e-9 * (1.0 + trailing), "{recon} vs {trailing}");
        }
    }

    #[test]
    fn pca_is_deterministic_and_sign_normalized() {
        let s = random_samples(9, 12, 3, 4);
        let a = pca_project(&s, labels(9)).unwrap();
        let b = pca_project(&s, labels(9)).unwrap();
        assert_eq!(a, b);
        for c in &a.components {
            assert!(*c.iter().find(|v| v.abs() > 1e-14).unwrap() > 0.0);
        }
        assert!(pca_project(&s[..2], labels(2)).is_err());
    }
}
