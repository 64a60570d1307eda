//! Scalar computation graph with reverse accumulation.
//!
//! Nodes are appended in evaluation order, so the arena index is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::GraphError;

/// Index of a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Index of a parameter leaf, in creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpTag {
    Constant,
    Parameter(LeafId),
    Add,
    Mul,
    Neg,
    Sin,
    Cos,
    Exp,
    Abs,
    /// Integer power with exponent >= 0.
    Powi(u32),
    Reciprocal,
    /// Left fold over an arbitrary number of inputs, starting from 0.0.
    Sum,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: OpTag,
    a: u32,
    b: u32,
    value: f64,
}

/// Read-only view of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    pub op: OpTag,
    pub inputs: Vec<NodeId>,
    pub value: f64,
}

/// Gradient of a scalar root with respect to the parameter leaves it reaches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<LeafId, f64>,
}

impl GradientMap {
    pub fn get(&self, leaf: LeafId) -> Option<f64> {
        self.entries.get(&leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LeafId, f64)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    sum_inputs: Vec<u32>,
    leaves: Vec<NodeId>,
    adjoint: Vec<f64>,
    reach: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node but keeps the allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.sum_inputs.clear();
        self.leaves.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_node(&self, leaf: LeafId) -> NodeId {
        self.leaves[leaf.0 as usize]
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.index()].value
    }

    pub fn node(&self, id: NodeId) -> GraphNode {
        let n = &self.nodes[id.index()];
        let inputs = match n.op {
            OpTag::Constant | OpTag::Parameter(_) => vec![],
            OpTag::Add | OpTag::Mul => vec![NodeId(n.a), NodeId(n.b)],
            OpTag::Sum => self.sum_inputs[n.a as usize..(n.a + n.b) as usize]
                .iter()
                .map(|&i| NodeId(i))
                .collect(),
            _ => vec![NodeId(n.a)],
        };
        GraphNode {
            id,
            op: n.op,
            inputs,
            value: n.value,
        }
    }

    fn push(&mut self, op: OpTag, a: u32, b: u32, value: f64) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, a, b, value });
        id
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.push(OpTag::Constant, 0, 0, c)
    }

    pub fn parameter(&mut self, value: f64) -> NodeId {
        let leaf = LeafId(self.leaves.len() as u32);
        let id = self.push(OpTag::Parameter(leaf), 0, 0, value);
        self.leaves.push(id);
        id
    }

    /// Leaf id of a parameter node, `None` for any other node.
    pub fn leaf_of(&self, id: NodeId) -> Option<LeafId> {
        match self.nodes[id.index()].op {
            OpTag::Parameter(l) => Some(l),
            _ => None,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(OpTag::Add, a.0, b.0, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(OpTag::Mul, a.0, b.0, v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        self.push(OpTag::Neg, a.0, 0, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sin();
        self.push(OpTag::Sin, a.0, 0, v)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).cos();
        self.push(OpTag::Cos, a.0, 0, v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).exp();
        self.push(OpTag::Exp, a.0, 0, v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).abs();
        self.push(OpTag::Abs, a.0, 0, v)
    }

    pub fn powi(&mut self, a: NodeId, n: u32) -> NodeId {
        let v = self.value(a).powi(n as i32);
        self.push(OpTag::Powi(n), a.0, 0, v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = 1.0 / self.value(a);
        self.push(OpTag::Reciprocal, a.0, 0, v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.recip(b);
        self.mul(a, r)
    }

    /// Multiplies by a fresh constant node.
    pub fn scale(&mut self, c: f64, a: NodeId) -> NodeId {
        let k = self.constant(c);
        self.mul(k, a)
    }

    pub fn sum(&mut self, inputs: &[NodeId]) -> NodeId {
        let mut acc = 0.0;
        let start = self.sum_inputs.len() as u32;
        for &i in inputs {
            acc += self.value(i);
            self.sum_inputs.push(i.0);
        }
        self.push(OpTag::Sum, start, inputs.len() as u32, acc)
    }

    /// Reverse sweep from `root`. Leaves the adjoint of every node `<= root`
    /// in the internal buffer.
    fn sweep(&mut self, root: NodeId) -> Result<(), GraphError> {
        let n = root.index() + 1;
        self.adjoint.clear();
        self.adjoint.resize(n, 0.0);
        self.reach.clear();
        self.reach.resize(n, false);
        self.adjoint[root.index()] = 1.0;
        self.reach[root.index()] = true;

        for i in (0..n).rev() {
            if !self.reach[i] {
                continue;
            }
            let g = self.adjoint[i];
            if !g.is_finite() {
                return Err(GraphError::NonFiniteAdjoint { node: i });
            }
            let node = self.nodes[i];
            let (a, b) = (node.a as usize, node.b as usize);
            match node.op {
                OpTag::Constant | OpTag::Parameter(_) => {}
                OpTag::Add => {
                    self.adjoint[a] += g;
                    self.adjoint[b] += g;
                    self.reach[a] = true;
                    self.reach[b] = true;
                }
                OpTag::Mul => {
                    let (va, vb) = (self.nodes[a].value, self.nodes[b].value);
                    self.adjoint[a] += g * vb;
                    self.adjoint[b] += g * va;
                    self.reach[a] = true;
                    self.reach[b] = true;
                }
                OpTag::Sum => {
                    for k in a..a + b {
                        let j = self.sum_inputs[k] as usize;
                        self.adjoint[j] += g;
                        self.reach[j] = true;
                    }
                }
                unary => {
                    let x = self.nodes[a].value;
                    let d = match unary {
                        OpTag::Neg => -1.0,
                        OpTag::Sin => x.cos(),
                        OpTag::Cos => -x.sin(),
                        OpTag::Exp => node.value,
                        OpTag::Abs => {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        OpTag::Powi(0) => 0.0,
                        OpTag::Powi(k) => k as f64 * x.powi(k as i32 - 1),
                        OpTag::Reciprocal => -node.value * node.value,
                        _ => unreachable!(),
                    };
                    self.adjoint[a] += g * d;
                    self.reach[a] = true;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `root` with respect to every parameter leaf it depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<GradientMap, GraphError> {
        self.sweep(root)?;
        let mut entries = BTreeMap::new();
        for (l, &node) in self.leaves.iter().enumerate() {
            let i = node.index();
            if i < self.reach.len() && self.reach[i] {
                entries.insert(LeafId(l as u32), self.adjoint[i]);
            }
        }
        Ok(GradientMap { entries })
    }

    /// Dense variant of [`Graph::backward`]: one slot per leaf, zero for
    /// leaves the root does not reach.
    pub fn backward_dense(&mut self, root: NodeId, out: &mut Vec<f64>) -> Result<(), GraphError> {
        self.sweep(root)?;
        out.clear();
        out.extend(self.leaves.iter().map(|&node| {
            let i = node.index();
            if i < self.adjoint.len() {
                self.adjoint[i]
            } else {
                0.0
            }
        }));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_gradient() {
        let mut g = Graph::new();
        let w = g.parameter(2.0);
        let b = g.parameter(1.0);
        let wx = g.scale(3.0, w);
        let root = g.add(wx, b);
        assert_eq!(g.value(root), 7.0);
        let grad = g.backward(root).unwrap();
        assert_eq!(grad.get(LeafId(0)), Some(3.0));
        assert_eq!(grad.get(LeafId(1)), Some(1.0));
    }

    #[test]
    fn sine_at_zero() {
        let mut g = Graph::new();
        let w = g.parameter(0.0);
        let root = g.sin(w);
        assert_eq!(g.backward(root).unwrap().get(LeafId(0)), Some(1.0));
    }

    #[test]
    fn unreachable_leaves_are_absent() {
        let mut g = Graph::new();
        let a = g.parameter(1.0);
        let _b = g.parameter(5.0);
        let root = g.exp(a);
        let grad = g.backward(root).unwrap();
        assert_eq!(grad.len(), 1);
        assert!(grad.get(LeafId(1)).is_none());
    }

    #[test]
    fn nan_reports_node() {
        let mut g = Graph::new();
        let a = g.parameter(0.0);
        let r = g.recip(a);
        let root = g.sin(r);
        match g.backward(root) {
            Err(GraphError::NonFiniteAdjoint { node }) => assert_eq!(node, r.index()),
            other => panic!("expected NaN error, got {other:?}"),
        }
    }

    #[test]
    fn sum_rule_exact_when_contributions_meet_at_leaves() {
        let mut g = Graph::new();
        let x = g.parameter(0.7);
        let y = g.parameter(-1.3);
        let a = g.mul(x, y);
        let sx = g.sin(x);
        let b = g.mul(sx, y);
        let ab = g.add(a, b);
        let ga = g.backward(a).unwrap();
        let gb = g.backward(b).unwrap();
        let gab = g.backward(ab).unwrap();
        for (leaf, v) in gab.iter() {
            assert_eq!(v, ga.get(leaf).unwrap_or(0.0) + gb.get(leaf).unwrap_or(0.0));
        }
    }

    #[test]
    fn sum_rule_through_shared_interior_node() {
        // Adjoints merge at `s` before reaching x, so agreement is to rounding.
        let mut g = Graph::new();
        let x = g.parameter(0.7);
        let y = g.parameter(-1.3);
        let s = g.sin(x);
        let a = g.mul(s, y);
        let b = g.mul(s, x);
        let ab = g.add(a, b);
        let ga = g.backward(a).unwrap();
        let gb = g.backward(b).unwrap();
        let gab = g.backward(ab).unwrap();
        for (leaf, v) in gab.iter() {
            let sum = ga.get(leaf).unwrap_or(0.0) + gb.get(leaf).unwrap_or(0.0);
            assert!((v - sum).abs() <= 4.0 * f64::EPSILON * sum.abs());
        }
    }

    #[test]
    fn node_view_lists_inputs() {
        let mut g = Graph::new();
        let a = g.constant(1.0);
        let b = g.constant(2.0);
        let c = g.constant(3.0);
        let s = g.sum(&[a, b, c]);
        let view = g.node(s);
        assert_eq!(view.op, OpTag::Sum);
        assert_eq!(view.inputs, vec![a, b, c]);
        assert_eq!(view.value, 6.0);
    }
}
