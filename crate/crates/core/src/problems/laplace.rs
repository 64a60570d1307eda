//! Laplace's equation on convex subdomains of the unit disk, with boundary
//! data restricted from a harmonic function on the disk.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Jet2, NodeId};
use crate::{Error, Result};

use super::grf::FourierSeries;

const MIN_ANGLE_GAP: f64 = 1e-3;

/// Convex polygon with vertices on the unit circle, counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn from_angles(mut angles: Vec<f64>) -> Result<Self> {
        if !(3..=10).contains(&angles.len()) {
            return Err(Error::InvalidConfig(format!("polygon needs 3..=10 vertices, got {}", angles.len())));
        }
        angles.sort_by(f64::total_cmp);
        let p = Self {
            vertices: angles.iter().map(|a| [a.cos(), a.sin()]).collect(),
        };
        if !p.is_strictly_convex() {
            return Err(Error::InvalidConfig("polygon is degenerate".into()));
        }
        Ok(p)
    }

    pub fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn is_strictly_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            cross(sub(b, a), sub(c, b)) > 0.0
        })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.edges().all(|(a, b)| cross(sub(b, a), sub(p, a)) > 0.0)
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| norm(sub(b, a))).sum()
    }

    pub fn area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| cross(a, b)).sum::<f64>()
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Random convex polygon inscribed in the unit circle.
pub fn polygon_sample<R: Rng + ?Sized>(rng: &mut R) -> ConvexPolygon {
    let k = rng.random_range(3..=10usize);
    loop {
        let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let wrap = angles[0] + TAU - angles[k - 1];
        let ok = wrap >= MIN_ANGLE_GAP && angles.windows(2).all(|w| w[1] - w[0] >= MIN_ANGLE_GAP);
        if ok {
            if let Ok(p) = ConvexPolygon::from_angles(angles) {
                return p;
            }
        }
    }
}

/// Ellipse with center `c`, semi-axes `(a, b)` and rotation angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub rotation: f64,
}

const ARC_TABLE: usize = 2048;

impl Ellipse {
    pub fn new(center: [f64; 2], semi_axes: [f64; 2], rotation: f64) -> Result<Self> {
        if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) {
            return Err(Error::InvalidConfig("ellipse semi-axes must be positive".into()));
        }
        let e = Self {
            center,
            semi_axes,
            rotation,
        };
        if e.max_radius() > 1.0 {
            return Err(Error::InvalidConfig("ellipse leaves the unit disk".into()));
        }
        Ok(e)
    }

    pub fn point(&self, t: f64) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (px, py) = (self.semi_axes[0] * t.cos(), self.semi_axes[1] * t.sin());
        [self.center[0] + c * px - s * py, self.center[1] + s * px + c * py]
    }

    /// Largest distance from the origin over the boundary, on a dense sweep
    /// refined by a local golden-section search.
    pub fn max_radius(&self) -> f64 {
        let n = 720;
        let r = |t: f64| norm(self.point(t));
        let (mut best_t, mut best) = (0.0, r(0.0));
        for i in 1..n {
            let t = TAU * i as f64 / n as f64;
            if r(t) > best {
                best = r(t);
                best_t = t;
            }
        }
        let h = TAU / n as f64;
        let (mut lo, mut hi) = (best_t - h, best_t + h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if r(m1) > r(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        best.max(r(0.5 * (lo + hi)))
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let d = sub(p, self.center);
        let u = (c * d[0] + s * d[1]) / self.semi_axes[0];
        let v = (-s * d[0] + c * d[1]) / self.semi_axes[1];
        u * u + v * v < 1.0
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = (self.semi_axes[0], self.semi_axes[1]);
        let hx = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
        let hy = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
        (
            [self.center[0] - hx, self.center[1] - hy],
            [self.center[0] + hx, self.center[1] + hy],
        )
    }

    fn arc_table(&self) -> Vec<f64> {
        let mut cum = Vec::with_capacity(ARC_TABLE + 1);
        cum.push(0.0);
        let mut prev = self.point(0.0);
        let mut acc = 0.0;
        for i in 1..=ARC_TABLE {
            let p = self.point(TAU * i as f64 / ARC_TABLE as f64);
            acc += norm(sub(p, prev));
            cum.push(acc);
            prev = p;
        }
        cum
    }
}

/// Center uniform in the disk of radius 0.3, semi-axes uniform in
/// `[0.3, 0.6]`, rotation uniform; redrawn until the ellipse fits in the disk.
pub fn ellipse_sample<R: Rng + ?Sized>(rng: &mut R) -> Ellipse {
    loop {
        let r = 0.3 * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..TAU);
        let a = rng.random_range(0.3..=0.6);
        let b = rng.random_range(0.3..=0.6);
        let rot = rng.random_range(0.0..TAU);
        if let Ok(e) = Ellipse::new([r * phi.cos(), r * phi.sin()], [a, b], rot) {
            return e;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaplaceDomain {
    Polygon(ConvexPolygon),
    Ellipse(Ellipse),
}

impl LaplaceDomain {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            LaplaceDomain::Polygon(q) => q.contains(p),
            LaplaceDomain::Ellipse(e) => e.contains(p),
        }
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            LaplaceDomain::Polygon(q) => q.bounding_box(),
            LaplaceDomain::Ellipse(e) => e.bounding_box(),
        }
    }
}

/// `a0 + Σ r^k (a_k cos kφ + b_k sin kφ)` for `r ≤ 1`.
pub fn disk_harmonic_extension(h: &FourierSeries, r: f64, phi: f64) -> Result<f64> {
    if !(r <= 1.0 + 1e-12) || r < 0.0 {
        return Err(Error::InvalidConfig(format!("disk harmonic extension needs 0 <= r <= 1, got r={r}")));
    }
    Ok(harmonic_cartesian(h, [r * phi.cos(), r * phi.sin()]))
}

/// Same polynomial in Cartesian form, `Re/Im (x + iy)^k`; no radius check.
pub fn harmonic_cartesian(h: &FourierSeries, p: [f64; 2]) -> f64 {
    let (mut re, mut im) = (1.0, 0.0);
    let mut acc = h.a0;
    for (a, b) in h.cos.iter().zip(&h.sin) {
        let nre = re * p[0] - im * p[1];
        im = re * p[1] + im * p[0];
        re = nre;
        acc += a * re + b * im;
    }
    acc
}

/// Harmonic polynomial on coordinate jets.
pub fn harmonic_jets(g: &mut Graph, h: &FourierSeries, coords: &[Jet2]) -> Result<Jet2> {
    let (x, y) = (&coords[0], &coords[1]);
    let mut acc = g.lift_constant(h.a0, 2)?;
    let mut re = g.lift_constant(1.0, 2)?;
    let mut im = g.lift_constant(0.0, 2)?;
    for (&a, &b) in h.cos.iter().zip(&h.sin) {
        let rx = g.jet_mul(&re, x);
        let iy = g.jet_mul(&im, y);
        let ry = g.jet_mul(&re, y);
        let ix = g.jet_mul(&im, x);
        re = g.jet_sub(&rx, &iy);
        im = g.jet_add(&ry, &ix);
        let ta = g.jet_scale(a, &re);
        let tb = g.jet_scale(b, &im);
        acc = g.jet_add(&acc, &ta);
        acc = g.jet_add(&acc, &tb);
    }
    Ok(acc)
}

/// Laplace instance: domain plus disk boundary data `h` (a circle GRF draw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceProblem {
    pub domain: LaplaceDomain,
    pub h: FourierSeries,
    #[serde(skip)]
    arc: Option<Vec<f64>>,
}

impl LaplaceProblem {
    pub fn new(domain: LaplaceDomain, h: FourierSeries) -> Result<Self> {
        if !h.all_finite() {
            return Err(Error::InvalidConfig("boundary coefficients must be finite".into()));
        }
        if let LaplaceDomain::Polygon(p) = &domain {
            if !p.is_strictly_convex() {
                return Err(Error::InvalidConfig("polygon is not strictly convex".into()));
            }
        }
        let arc = match &domain {
            LaplaceDomain::Ellipse(e) => Some(e.arc_table()),
            LaplaceDomain::Polygon(_) => None,
        };
        Ok(Self { domain, h, arc })
    }

    pub fn exact(&self, p: [f64; 2]) -> f64 {
        harmonic_cartesian(&self.h, p)
    }

    pub fn residual(&self, g: &mut Graph, u: &Jet2) -> NodeId {
        g.add(u.d2[0], u.d2[1])
    }

    pub fn boundary(&self, g: &mut Graph, u: NodeId, x: &[f64]) -> NodeId {
        let target = g.constant(-self.exact([x[0], x[1]]));
        g.add(u, target)
    }

    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        let (lo, hi) = self.domain.bounding_box();
        let mut out = Vec::with_capacity(2 * m);
        while out.len() < 2 * m {
            let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
            if self.domain.contains(p) {
                out.extend_from_slice(&p);
            }
        }
        out
    }

    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * m);
        match &self.domain {
            LaplaceDomain::Polygon(poly) => {
                let lens: Vec<f64> = poly.edges().map(|(a, b)| norm(sub(b, a))).collect();
                let total: f64 = lens.iter().sum();
                let edges: Vec<_> = poly.edges().collect();
                for _ in 0..m {
                    let mut s = rng.random_range(0.0..total);
                    let mut i = 0;
                    while i + 1 < lens.len() && s >= lens[i] {
                        s -= lens[i];
                        i += 1;
                    }
                    let t = (s / lens[i]).clamp(0.0, 1.0);
                    let (a, b) = edges[i];
                    out.push(a[0] + t * (b[0] - a[0]));
                    out.push(a[1] + t * (b[1] - a[1]));
                }
            }
            LaplaceDomain::Ellipse(e) => {
                let owned;
                let cum = match &self.arc {
                    Some(c) => c,
                    None => {
                        owned = e.arc_table();
                        &owned
                    }
                };
                let total = cum[ARC_TABLE];
                for _ in 0..m {
                    let s = rng.random_range(0.0..total);
                    let i = cum.partition_point(|&c| c <= s).clamp(1, ARC_TABLE);
                    let f = (s - cum[i - 1]) / (cum[i] - cum[i - 1]);
                    let t = TAU * ((i - 1) as f64 + f) / ARC_TABLE as f64;
                    out.extend_from_slice(&e.point(t));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::grf::{grf_sample, GrfSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_mode(k: usize, cos: bool) -> FourierSeries {
        let mut h = FourierSeries::zero(TAU, 4);
        if cos {
            h.cos[k - 1] = 1.0;
        } else {
            h.sin[k - 1] = 1.0;
        }
        h
    }

    #[test]
    fn degree_one_and_two_harmonics() {
        let (r, phi) = (0.7f64, 0.4f64);
        let (x, y) = (r * phi.cos(), r * phi.sin());
        let u1 = disk_harmonic_extension(&single_mode(1, true), r, phi).unwrap();
        assert!((u1 - x).abs() < 1e-15);
        let u2 = disk_harmonic_extension(&single_mode(2, true), r, phi).unwrap();
        assert!((u2 - (x * x - y * y)).abs() < 1e-15);
    }

    #[test]
    fn extension_rejects_outside_points() {
        assert!(disk_harmonic_extension(&single_mode(1, true), 1.5, 0.0).is_err());
    }

    #[test]
    fn extension_matches_polar_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = grf_sample(&GrfSpec::laplace_circle(), &mut rng);
        let (r, phi) = (0.83f64, 2.1f64);
        let mut polar = h.a0;
        for k in 1..=h.modes() {
            let kk = k as f64;
            polar += r.powi(k as i32) * (h.cos[k - 1] * (kk * phi).cos() + h.sin[k - 1] * (kk * phi).sin());
        }
        assert!((disk_harmonic_extension(&h, r, phi).unwrap() - polar).abs() < 1e-12);
        // on the circle the extension reproduces the boundary series
        assert!((disk_harmonic_extension(&h, 1.0, phi).unwrap() - h.eval(phi)).abs() < 1e-12);
    }

    #[test]
    fn reference_laplacian_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = grf_sample(&GrfSpec::laplace_circle(), &mut rng);
        for dom in [LaplaceDomain::Polygon(polygon_sample(&mut rng)), LaplaceDomain::Ellipse(ellipse_sample(&mut rng))] {
            let prob = LaplaceProblem::new(dom, h.clone()).unwrap();
            let pts = prob.sample_interior(&mut rng, 100);
            for p in pts.chunks(2) {
                let mut g = Graph::new();
                let c = [g.lift_coordinate(p[0], 0, 2).unwrap(), g.lift_coordinate(p[1], 1, 2).unwrap()];
                let u = harmonic_jets(&mut g, &h, &c).unwrap();
                let r = prob.residual(&mut g, &u);
                assert!(g.value(r).abs() < 1e-8, "laplacian {}", g.value(r));
                assert!((g.value(u.val) - prob.exact([p[0], p[1]])).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn polygon_invariants_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut seen = [false; 11];
        for _ in 0..10_000 {
            let p = polygon_sample(&mut rng);
            let k = p.vertices.len();
            assert!((3..=10).contains(&k));
            seen[k] = true;
            assert!(p.is_strictly_convex());
            assert!(p.vertices.iter().all(|v| (norm(*v) - 1.0).abs() < 1e-12));
        }
        assert!(seen[3..=10].iter().all(|&s| s));
    }

    #[test]
    fn samples_lie_in_domain_and_on_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = FourierSeries::zero(TAU, 2);
        let poly = polygon_sample(&mut rng);
        let prob = LaplaceProblem::new(LaplaceDomain::Polygon(poly.clone()), h.clone()).unwrap();
        for p in prob.sample_interior(&mut rng, 500).chunks(2) {
            assert!(poly.contains([p[0], p[1]]));
        }
        for p in prob.sample_boundary(&mut rng, 500).chunks(2) {
            let on_edge = poly.edges().any(|(a, b)| {
                let e = sub(b, a);
                cross(e, sub([p[0], p[1]], a)).abs() / norm(e) < 1e-12
            });
            assert!(on_edge);
        }
        let e = ellipse_sample(&mut rng);
        let prob = LaplaceProblem::new(LaplaceDomain::Ellipse(e.clone()), h).unwrap();
        for p in prob.sample_interior(&mut rng, 500).chunks(2) {
            assert!(e.contains([p[0], p[1]]));
        }
        let (s, c) = e.rotation.sin_cos();
        for p in prob.sample_boundary(&mut rng, 500).chunks(2) {
            let d = [p[0] - e.center[0], p[1] - e.center[1]];
            let u = (c * d[0] + s * d[1]) / e.semi_axes[0];
            let v = (-s * d[0] + c * d[1]) / e.semi_axes[1];
            assert!((u * u + v * v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ellipses_fit_in_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let e = ellipse_sample(&mut rng);
            assert!(e.semi_axes.iter().all(|&a| a > 0.0));
            let worst = (0..4000).map(|i| norm(e.point(TAU * i as f64 / 4000.0))).fold(0.0, f64::max);
            assert!(worst <= 1.0);
        }
    }

    // Exact area of `poly ∩ [lo, hi]` by Sutherland-Hodgman clipping.
    fn clipped_area(poly: &ConvexPolygon, lo: [f64; 2], hi: [f64; 2]) -> f64 {
        let mut pts = poly.vertices.clone();
        let planes: [(usize, f64, f64); 4] = [(0, lo[0], 1.0), (0, hi[0], -1.0), (1, lo[1], 1.0), (1, hi[1], -1.0)];
        for (axis, bound, sign) in planes {
            let inside = |p: &[f64; 2]| sign * (p[axis] - bound) >= 0.0;
            let mut out = Vec::new();
            for i in 0..pts.len() {
                let a = pts[i];
                let b = pts[(i + 1) % pts.len()];
                if inside(&a) {
                    out.push(a);
                }
                if inside(&a) != inside(&b) {
                    let t = (bound - a[axis]) / (b[axis] - a[axis]);
                    out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                }
            }
            pts = out;
            if pts.is_empty() {
                return 0.0;
            }
        }
        let n = pts.len();
        0.5 * (0..n).map(|i| cross(pts[i], pts[(i + 1) % n])).sum::<f64>()
    }

    #[test]
    fn interior_sampling_is_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let poly = ConvexPolygon::from_angles(vec![0.1, 1.7, 2.9, 4.0, 5.5]).unwrap();
        let prob = LaplaceProblem::new(LaplaceDomain::Polygon(poly.clone()), FourierSeries::zero(TAU, 1)).unwrap();
        let n = 100_000;
        let (lo, hi) = poly.bounding_box();
        let (dx, dy) = ((hi[0] - lo[0]) / 4.0, (hi[1] - lo[1]) / 4.0);
        let mut counts = [0usize; 16];
        for p in prob.sample_interior(&mut rng, n).chunks(2) {
            let i = (((p[0] - lo[0]) / dx) as usize).min(3);
            let j = (((p[1] - lo[1]) / dy) as usize).min(3);
            counts[4 * j + i] += 1;
        }
        let area = poly.area();
        let mut stat = 0.0;
        let mut cells = 0;
        for j in 0..4 {
            for i in 0..4 {
                let c_lo = [lo[0] + i as f64 * dx, lo[1] + j as f64 * dy];
                let c_hi = [c_lo[0] + dx, c_lo[1] + dy];
                let expected = n as f64 * clipped_area(&poly, c_lo, c_hi) / area;
                if expected > 5.0 {
                    stat += (counts[4 * j + i] as f64 - expected).powi(2) / expected;
                    cells += 1;
                }
            }
        }
        let crit = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "chi-square {stat} >= {crit}");
    }
}
