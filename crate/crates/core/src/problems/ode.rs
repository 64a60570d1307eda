//! `du/dx = 2(x−η)cos((x−η)²)` on `(−π, π)` with `u(±π) = sin((±π−η)²)`.

use std::f64::consts::PI;

use crate::diffcore::{Graph, Jet2, JetOp, NodeId};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeProblem {
    pub eta: f64,
}

pub const DOMAIN: (f64, f64) = (-PI, PI);

impl OdeProblem {
    pub fn new(eta: f64) -> crate::Result<Self> {
        if !eta.is_finite() {
            return Err(crate::Error::InvalidConfig(format!("η must be finite, got {eta}")));
        }
        Ok(Self { eta })
    }

    pub fn forcing(&self, x: f64) -> f64 {
        let s = x - self.eta;
        2.0 * s * (s * s).cos()
    }

    pub fn exact(&self, x: f64) -> f64 {
        let s = x - self.eta;
        (s * s).sin()
    }

    pub fn residual(&self, g: &mut Graph, u: &Jet2, x: &[f64]) -> NodeId {
        let f = g.constant(-self.forcing(x[0]));
        g.add(u.d1[0], f)
    }

    pub fn boundary(&self, g: &mut Graph, u: NodeId, x: &[f64]) -> NodeId {
        let target = g.constant(-self.exact(x[0]));
        g.add(u, target)
    }

    pub fn exact_jets(&self, g: &mut Graph, coords: &[Jet2]) -> Result<Jet2> {
        let shift = g.lift_constant(-self.eta, 1)?;
        let s = g.jet_add(&coords[0], &shift);
        let q = g.jet_mul(&s, &s);
        Ok(g.jet_unary(JetOp::Sin, &q)?)
    }
}

/// `count` equidistant values on `[lo, hi]`.
pub fn equidistant(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_solution_zero_at_root_pi() {
        let p = OdeProblem::new(0.0).unwrap();
        assert!(p.exact(PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exact_solution_satisfies_equation() {
        let p = OdeProblem::new(1.0).unwrap();
        let mut g = Graph::new();
        let x = g.lift_coordinate(0.3, 0, 1).unwrap();
        let u = p.exact_jets(&mut g, &[x]).unwrap();
        let r = p.residual(&mut g, &u, &[0.3]);
        assert!(g.value(r).abs() < 1e-15);
        assert_eq!(g.value(u.val), p.exact(0.3));
    }

    #[test]
    fn grid_of_twenty() {
        let g = equidistant(0.0, 2.0, 20);
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[19], 2.0);
        assert!((g[1] - 2.0 / 19.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_eta() {
        assert!(OdeProblem::new(f64::NAN).is_err());
    }
}
