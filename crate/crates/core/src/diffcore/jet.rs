//! Second-order diagonal jets whose lanes are graph nodes.
//!
//! A [`Jet2`] carries `u`, `∂u/∂x_k` and `∂²u/∂x_k²` for each spatial
//! coordinate. Because every lane is a [`NodeId`], a loss assembled from jet
//! lanes can be differentiated with respect to network parameters by a
//! single call to [`Graph::backward`].

use super::graph::{Graph, NodeId};
use super::GraphError;

#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub val: NodeId,
    pub d1: Vec<NodeId>,
    pub d2: Vec<NodeId>,
}

impl Jet2 {
    pub fn dim(&self) -> usize {
        self.d1.len()
    }
}

/// Operation tags accepted by [`Graph::jet_arith`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JetOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Exp,
    Powi(u32),
    Reciprocal,
}

impl JetOp {
    fn is_binary(self) -> bool {
        matches!(self, JetOp::Add | JetOp::Sub | JetOp::Mul | JetOp::Div)
    }
}

/// `(f, f′, f″)` evaluated at a node, as nodes.
struct Taylor2 {
    f: NodeId,
    f1: NodeId,
    f2: NodeId,
}

impl Graph {
    pub fn lift_constant(&mut self, c: f64, dim: usize) -> Result<Jet2, GraphError> {
        if !c.is_finite() {
            return Err(GraphError::NonFiniteInput(c));
        }
        let val = self.constant(c);
        let zero = self.constant(0.0);
        Ok(Jet2 {
            val,
            d1: vec![zero; dim],
            d2: vec![zero; dim],
        })
    }

    pub fn lift_coordinate(&mut self, x: f64, k: usize, dim: usize) -> Result<Jet2, GraphError> {
        if k >= dim {
            return Err(GraphError::CoordinateOutOfRange { k, dim });
        }
        if !x.is_finite() {
            return Err(GraphError::NonFiniteInput(x));
        }
        let val = self.constant(x);
        let zero = self.constant(0.0);
        let one = self.constant(1.0);
        let mut d1 = vec![zero; dim];
        d1[k] = one;
        Ok(Jet2 {
            val,
            d1,
            d2: vec![zero; dim],
        })
    }

    /// A node that is constant in space but may still be a parameter leaf
    /// (used for latent codes).
    pub fn lift_node(&mut self, val: NodeId, dim: usize) -> Jet2 {
        let zero = self.constant(0.0);
        Jet2 {
            val,
            d1: vec![zero; dim],
            d2: vec![zero; dim],
        }
    }

    pub fn jet_add(&mut self, a: &Jet2, b: &Jet2) -> Jet2 {
        Jet2 {
            val: self.add(a.val, b.val),
            d1: (0..a.dim()).map(|k| self.add(a.d1[k], b.d1[k])).collect(),
            d2: (0..a.dim()).map(|k| self.add(a.d2[k], b.d2[k])).collect(),
        }
    }

    pub fn jet_neg(&mut self, a: &Jet2) -> Jet2 {
        Jet2 {
            val: self.neg(a.val),
            d1: a.d1.iter().map(|&n| self.neg(n)).collect(),
            d2: a.d2.iter().map(|&n| self.neg(n)).collect(),
        }
    }

    pub fn jet_sub(&mut self, a: &Jet2, b: &Jet2) -> Jet2 {
        let nb = self.jet_neg(b);
        self.jet_add(a, &nb)
    }

    /// Product rule to second order (diagonal).
    pub fn jet_mul(&mut self, a: &Jet2, b: &Jet2) -> Jet2 {
        let val = self.mul(a.val, b.val);
        let mut d1 = Vec::with_capacity(a.dim());
        let mut d2 = Vec::with_capacity(a.dim());
        for k in 0..a.dim() {
            let l = self.mul(a.d1[k], b.val);
            let r = self.mul(a.val, b.d1[k]);
            d1.push(self.add(l, r));

            let t0 = self.mul(a.d2[k], b.val);
            let cross = self.mul(a.d1[k], b.d1[k]);
            let t1 = self.scale(2.0, cross);
            let t2 = self.mul(a.val, b.d2[k]);
            let s = self.add(t0, t1);
            d2.push(self.add(s, t2));
        }
        Jet2 { val, d1, d2 }
    }

    /// Multiplies every lane by a node that carries no spatial derivatives
    /// (a weight, a latent component, a constant).
    pub fn jet_scale_by(&mut self, w: NodeId, a: &Jet2) -> Jet2 {
        Jet2 {
            val: self.mul(w, a.val),
            d1: a.d1.iter().map(|&n| self.mul(w, n)).collect(),
            d2: a.d2.iter().map(|&n| self.mul(w, n)).collect(),
        }
    }

    pub fn jet_scale(&mut self, c: f64, a: &Jet2) -> Jet2 {
        let w = self.constant(c);
        self.jet_scale_by(w, a)
    }

    fn taylor(&mut self, op: JetOp, x: NodeId) -> Taylor2 {
        match op {
            JetOp::Sin => {
                let f = self.sin(x);
                let f1 = self.cos(x);
                let f2 = self.neg(f);
                Taylor2 { f, f1, f2 }
            }
            JetOp::Cos => {
                let f = self.cos(x);
                let s = self.sin(x);
                let f1 = self.neg(s);
                let f2 = self.neg(f);
                Taylor2 { f, f1, f2 }
            }
            JetOp::Exp => {
                let f = self.exp(x);
                Taylor2 { f, f1: f, f2: f }
            }
            JetOp::Powi(n) => {
                let f = self.powi(x, n);
                let f1 = if n == 0 {
                    self.constant(0.0)
                } else {
                    let p = self.powi(x, n - 1);
                    self.scale(n as f64, p)
                };
                let f2 = if n < 2 {
                    self.constant(0.0)
                } else {
                    let p = self.powi(x, n - 2);
                    self.scale((n * (n - 1)) as f64, p)
                };
                Taylor2 { f, f1, f2 }
            }
            JetOp::Reciprocal => {
                // f = 1/x, f′ = -f², f″ = 2f³
                let f = self.recip(x);
                let sq = self.mul(f, f);
                let f1 = self.neg(sq);
                let cube = self.mul(sq, f);
                let f2 = self.scale(2.0, cube);
                Taylor2 { f, f1, f2 }
            }
            JetOp::Neg => {
                let f = self.neg(x);
                let f1 = self.constant(-1.0);
                let f2 = self.constant(0.0);
                Taylor2 { f, f1, f2 }
            }
            _ => unreachable!("binary op passed to taylor"),
        }
    }

    /// Chain rule to second order for a scalar unary function.
    pub fn jet_unary(&mut self, op: JetOp, a: &Jet2) -> Result<Jet2, GraphError> {
        if op.is_binary() {
            return Err(GraphError::UnsupportedOp(op));
        }
        let t = self.taylor(op, a.val);
        let mut d1 = Vec::with_capacity(a.dim());
        let mut d2 = Vec::with_capacity(a.dim());
        for k in 0..a.dim() {
            d1.push(self.mul(t.f1, a.d1[k]));
            let sq = self.mul(a.d1[k], a.d1[k]);
            let l = self.mul(t.f2, sq);
            let r = self.mul(t.f1, a.d2[k]);
            d2.push(self.add(l, r));
        }
        Ok(Jet2 { val: t.f, d1, d2 })
    }

    /// Tag-dispatched jet arithmetic. Binary ops need `b`; unary ops reject it.
    pub fn jet_arith(&mut self, a: &Jet2, b: Option<&Jet2>, op: JetOp) -> Result<Jet2, GraphError> {
        match (op.is_binary(), b) {
            (true, Some(b)) => {
                if a.dim() != b.dim() {
                    return Err(GraphError::DimensionMismatch {
                        left: a.dim(),
                        right: b.dim(),
                    });
                }
                Ok(match op {
                    JetOp::Add => self.jet_add(a, b),
                    JetOp::Sub => self.jet_sub(a, b),
                    JetOp::Mul => self.jet_mul(a, b),
                    JetOp::Div => {
                        let r = self.jet_unary(JetOp::Reciprocal, b)?;
                        self.jet_mul(a, &r)
                    }
                    _ => unreachable!(),
                })
            }
            (false, None) => self.jet_unary(op, a),
            _ => Err(GraphError::UnsupportedOp(op)),
        }
    }

    pub fn jet_values(&self, j: &Jet2) -> (f64, Vec<f64>, Vec<f64>) {
        (
            self.value(j.val),
            j.d1.iter().map(|&n| self.value(n)).collect(),
            j.d2.iter().map(|&n| self.value(n)).collect(),
        )
    }
}
