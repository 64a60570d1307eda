use crate::diffcore::{Graph, Jet2, JetOp, LeafId, NodeId};
use crate::{Error, Result};

use super::{NetworkConfig, NetworkWeights};

/// Network weights registered as parameter leaves of a [`Graph`].
///
/// Leaves are created in the same layer-major order as
/// [`NetworkWeights::flatten`], so leaf `first_leaf + i` is flat parameter `i`.
#[derive(Debug, Clone)]
pub struct GraphNetwork {
    pub config: NetworkConfig,
    weights: Vec<Vec<NodeId>>,
    biases: Vec<Vec<NodeId>>,
    pub first_leaf: LeafId,
    pub num_leaves: usize,
}

impl GraphNetwork {
    pub fn register(g: &mut Graph, w: &NetworkWeights) -> Self {
        let first_leaf = LeafId(g.num_leaves() as u32);
        let mut weights = Vec::with_capacity(w.layers.len());
        let mut biases = Vec::with_capacity(w.layers.len());
        for l in &w.layers {
            weights.push(l.weight.iter().map(|&v| g.parameter(v)).collect());
            biases.push(l.bias.iter().map(|&v| g.parameter(v)).collect());
        }
        Self {
            config: w.config.clone(),
            weights,
            biases,
            first_leaf,
            num_leaves: w.num_params(),
        }
    }

    /// Output jets at `x`. `z` are latent nodes (leaves or constants) with
    /// zero spatial derivatives.
    pub fn forward_with_jets(&self, g: &mut Graph, x: &[f64], z: &[NodeId]) -> Result<Vec<Jet2>> {
        let cfg = &self.config;
        let d = cfg.spatial_dim;
        if x.len() != d || z.len() != cfg.latent_dim {
            return Err(Error::Shape(format!(
                "expected {d} coordinates and {} latents, got {} and {}",
                cfg.latent_dim,
                x.len(),
                z.len()
            )));
        }
        let mut coords = Vec::with_capacity(d);
        for (k, &xk) in x.iter().enumerate() {
            coords.push(g.lift_coordinate(xk, k, d)?);
        }
        self.forward_jets_from(g, &coords, z)
    }

    /// Same as [`Self::forward_with_jets`] but starting from caller-built
    /// coordinate jets.
    pub fn forward_jets_from(&self, g: &mut Graph, coords: &[Jet2], z: &[NodeId]) -> Result<Vec<Jet2>> {
        let cfg = &self.config;
        let d = cfg.spatial_dim;
        let mut h: Vec<Jet2> = Vec::with_capacity(cfg.embedded_dim());
        for (k, c) in coords.iter().enumerate() {
            match cfg.periodic_embedding {
                Some(p) if p.coordinate == k => {
                    let a = g.jet_scale(p.frequency(), c);
                    h.push(g.jet_unary(JetOp::Sin, &a)?);
                    h.push(g.jet_unary(JetOp::Cos, &a)?);
                }
                _ => h.push(c.clone()),
            }
        }

        let shapes = cfg.layer_shapes();
        let last = shapes.len() - 1;
        for (l, s) in shapes.iter().enumerate() {
            let w = &self.weights[l];
            let mut next = Vec::with_capacity(s.out_dim);
            for o in 0..s.out_dim {
                let row = &w[o * s.in_dim..(o + 1) * s.in_dim];
                let mut terms = Vec::with_capacity(s.in_dim);
                for (i, hi) in h.iter().enumerate() {
                    terms.push(g.mul(row[i], hi.val));
                }
                for (j, &zj) in z.iter().enumerate().take(s.latent_cols) {
                    terms.push(g.mul(row[s.hidden_in() + j], zj));
                }
                let acc = g.sum(&terms);
                let val = g.add(acc, self.biases[l][o]);
                let mut d1 = Vec::with_capacity(d);
                let mut d2 = Vec::with_capacity(d);
                for k in 0..d {
                    let t1: Vec<NodeId> = h.iter().enumerate().map(|(i, hi)| g.mul(row[i], hi.d1[k])).collect();
                    d1.push(g.sum(&t1));
                    let t2: Vec<NodeId> = h.iter().enumerate().map(|(i, hi)| g.mul(row[i], hi.d2[k])).collect();
                    d2.push(g.sum(&t2));
                }
                let pre = Jet2 { val, d1, d2 };
                if l == last {
                    next.push(if cfg.output_scale == 1.0 { pre } else { g.jet_scale(cfg.output_scale, &pre) });
                } else {
                    let scaled = g.jet_scale(cfg.layer_scale(l), &pre);
                    next.push(g.jet_unary(JetOp::Sin, &scaled)?);
                }
            }
            h = next;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, second_difference};
    use crate::network::{forward, init_weights, LatentOwner, LatentVector, PeriodicEmbedding};

    fn cfg(periodic: bool) -> NetworkConfig {
        NetworkConfig {
            depth: 3,
            width: 6,
            spatial_dim: 2,
            output_dim: 1,
            latent_dim: 2,
            first_layer_scale: 1.5,
            periodic_embedding: periodic.then_some(PeriodicEmbedding {
                coordinate: 0,
                period: 1.0,
            }),
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn depth_two_sine_closed_form() {
        // u = a sin(x) + b with a single hidden unit
        let c = NetworkConfig {
            depth: 2,
            width: 1,
            spatial_dim: 1,
            output_dim: 1,
            latent_dim: 0,
            ..NetworkConfig::default()
        };
        let mut w = init_weights(&c, 0).unwrap();
        w.layers[0].weight = vec![1.0];
        w.layers[0].bias = vec![0.0];
        w.layers[1].weight = vec![2.5];
        w.layers[1].bias = vec![0.3];
        let mut g = Graph::new();
        let net = GraphNetwork::register(&mut g, &w);
        let x = 0.8f64;
        let u = net.forward_with_jets(&mut g, &[x], &[]).unwrap();
        let (v, d1, d2) = g.jet_values(&u[0]);
        assert!((v - (2.5 * x.sin() + 0.3)).abs() < 1e-15);
        assert!((d1[0] - 2.5 * x.cos()).abs() < 1e-15);
        assert!((d2[0] + 2.5 * x.sin()).abs() < 1e-15);
    }

    #[test]
    fn values_match_plain_forward_bitwise() {
        for periodic in [false, true] {
            let c = cfg(periodic);
            let w = init_weights(&c, 5).unwrap();
            let zv = vec![0.4, -0.7];
            let mut g = Graph::new();
            let net = GraphNetwork::register(&mut g, &w);
            let z: Vec<_> = zv.iter().map(|&v| g.constant(v)).collect();
            for x in [[0.1, 0.2], [0.9, -0.5], [0.33, 0.77]] {
                let u = net.forward_with_jets(&mut g, &x, &z).unwrap();
                let plain = forward(&w, &x, &LatentVector::new(zv.clone(), LatentOwner::New)).unwrap();
                assert_eq!(g.value(u[0].val), plain[0]);
            }
        }
    }

    #[test]
    fn jets_match_finite_differences() {
        for periodic in [false, true] {
            let c = cfg(periodic);
            let w = init_weights(&c, 9).unwrap();
            let z = LatentVector::new(vec![0.2, 0.1], LatentOwner::New);
            let f = |x: &[f64]| forward(&w, x, &z).unwrap()[0];
            let mut g = Graph::new();
            let net = GraphNetwork::register(&mut g, &w);
            let zn: Vec<_> = z.components.iter().map(|&v| g.constant(v)).collect();
            let x0 = [0.37, -0.21];
            let u = net.forward_with_jets(&mut g, &x0, &zn).unwrap();
            let (_, d1, d2) = g.jet_values(&u[0]);
            let rep = finite_diff_check(f, &x0, 1e-5, &d1, 1e-8);
            assert!(rep.max_rel_err < 1e-5, "{rep:?}");
            for k in 0..2 {
                let fd = second_difference(f, &x0, k, 1e-4);
                let rel = (fd - d2[k]).abs() / d2[k].abs().max(1e-6);
                assert!(rel < 1e-4, "k={k} fd={fd} jet={}", d2[k]);
            }
        }
    }

    #[test]
    fn periodic_derivative_is_periodic() {
        let c = cfg(true);
        let w = init_weights(&c, 2).unwrap();
        let mut g = Graph::new();
        let net = GraphNetwork::register(&mut g, &w);
        let z: Vec<_> = [0.3, 0.3].iter().map(|&v| g.constant(v)).collect();
        let a = net.forward_with_jets(&mut g, &[0.0, 0.5], &z).unwrap();
        let b = net.forward_with_jets(&mut g, &[1.0, 0.5], &z).unwrap();
        assert!((g.value(a[0].d1[0]) - g.value(b[0].d1[0])).abs() < 1e-10);
    }
}
