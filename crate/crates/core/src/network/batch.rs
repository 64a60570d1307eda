//! Dense batched evaluation of the decoder with derivative lanes and a
//! hand-written reverse pass.
//!
//! Every layer keeps one row-major matrix with `lanes × batch` rows: rows
//! `[λB, (λ+1)B)` hold lane `λ` for the whole batch. Lane 0 is the value,
//! followed by first derivatives and the requested diagonal second
//! derivatives. One GEMM per layer advances all lanes at once; the latent
//! code only touches the value lane, so its contribution is folded into an
//! effective bias.

use crate::{Error, Result};

use super::NetworkWeights;

/// Which derivative lanes a batch carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneLayout {
    dim: usize,
    first: bool,
    second: Vec<bool>,
}

impl LaneLayout {
    pub fn value_only(dim: usize) -> Self {
        Self {
            dim,
            first: false,
            second: vec![false; dim],
        }
    }

    pub fn first_order(dim: usize) -> Self {
        Self {
            dim,
            first: true,
            second: vec![false; dim],
        }
    }

    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            first: true,
            second: vec![true; dim],
        }
    }

    /// First derivatives for every coordinate, second derivatives where
    /// `second[k]` is set.
    pub fn with_second(second: Vec<bool>) -> Self {
        Self {
            dim: second.len(),
            first: true,
            second,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lanes(&self) -> usize {
        1 + if self.first { self.dim } else { 0 } + self.second.iter().filter(|&&s| s).count()
    }

    pub fn d1_lane(&self, k: usize) -> Option<usize> {
        self.first.then_some(1 + k)
    }

    pub fn d2_lane(&self, k: usize) -> Option<usize> {
        if !self.first || !self.second[k] {
            return None;
        }
        Some(1 + self.dim + self.second[..k].iter().filter(|&&s| s).count())
    }
}

/// `C (m×n) = alpha·A (m×k)·B (k×n) + beta·C` on strided slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Activations saved by [`forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct BatchTape {
    pub layout: LaneLayout,
    pub batch: usize,
    /// `acts[l]` is the (non-latent) input matrix of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Scaled pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    sin0: Vec<Vec<f64>>,
    cos0: Vec<Vec<f64>>,
    output: Vec<f64>,
    out_dim: usize,
}

impl BatchTape {
    /// Output `o` on lane `lane` for point `b`.
    #[inline]
    pub fn output(&self, lane: usize, b: usize, o: usize) -> f64 {
        self.output[(lane * self.batch + b) * self.out_dim + o]
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Zeroed buffer shaped like the output lanes, for seeding [`backward`].
    pub fn zero_output_grad(&self) -> Vec<f64> {
        vec![0.0; self.output.len()]
    }

    #[inline]
    pub fn output_index(&self, lane: usize, b: usize, o: usize) -> usize {
        (lane * self.batch + b) * self.out_dim + o
    }
}

fn embed_lanes(w: &NetworkWeights, xs: &[f64], layout: &LaneLayout, batch: usize) -> Vec<f64> {
    let cfg = &w.config;
    let d = cfg.spatial_dim;
    let e = cfg.embedded_dim();
    let lanes = layout.lanes();
    let mut h = vec![0.0; lanes * batch * e];
    for b in 0..batch {
        let x = &xs[b * d..(b + 1) * d];
        let mut col = 0;
        for (k, &xk) in x.iter().enumerate() {
            match cfg.periodic_embedding {
                Some(p) if p.coordinate == k => {
                    let om = p.frequency();
                    let a = om * xk;
                    let (s, c) = (a.sin(), a.cos());
                    h[b * e + col] = s;
                    h[b * e + col + 1] = c;
                    if let Some(l1) = layout.d1_lane(k) {
                        let r = (l1 * batch + b) * e + col;
                        h[r] = om * c;
                        h[r + 1] = -om * s;
                    }
                    if let Some(l2) = layout.d2_lane(k) {
                        let r = (l2 * batch + b) * e + col;
                        h[r] = -om * om * s;
                        h[r + 1] = -om * om * c;
                    }
                    col += 2;
                }
                _ => {
                    h[b * e + col] = xk;
                    if let Some(l1) = layout.d1_lane(k) {
                        h[(l1 * batch + b) * e + col] = 1.0;
                    }
                    col += 1;
                }
            }
        }
    }
    h
}

/// Forward pass for `batch = xs.len() / spatial_dim` points sharing latent `z`.
pub fn forward(w: &NetworkWeights, xs: &[f64], z: &[f64], layout: &LaneLayout) -> Result<BatchTape> {
    let cfg = &w.config;
    let d = cfg.spatial_dim;
    if layout.dim() != d || xs.len() % d != 0 || z.len() != cfg.latent_dim {
        return Err(Error::Shape(format!(
            "batch forward: layout dim {}, {} coordinates, {} latents for a network with d={d}, n={}",
            layout.dim(),
            xs.len(),
            z.len(),
            cfg.latent_dim
        )));
    }
    let batch = xs.len() / d;
    let lanes = layout.lanes();
    let rows = lanes * batch;
    let last = w.layers.len() - 1;

    let mut acts = Vec::with_capacity(w.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut sin0 = Vec::with_capacity(last);
    let mut cos0 = Vec::with_capacity(last);
    let mut h = embed_lanes(w, xs, layout, batch);

    for (l, layer) in w.layers.iter().enumerate() {
        let s = layer.shape;
        let k = s.hidden_in();
        let out = s.out_dim;
        let mut p = vec![0.0; rows * out];
        // P = H · W_hᵀ
        gemm(rows, k, out, 1.0, &h, (k, 1), &layer.weight, (1, s.in_dim), 0.0, &mut p, (out, 1));
        let mut eff_bias = layer.bias.clone();
        if s.latent_cols > 0 {
            for (o, bo) in eff_bias.iter_mut().enumerate() {
                let row = &layer.weight[o * s.in_dim + k..(o + 1) * s.in_dim];
                *bo += row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for b in 0..batch {
            for (o, bo) in eff_bias.iter().enumerate() {
                p[b * out + o] += bo;
            }
        }
        if l == last {
            if cfg.output_scale != 1.0 {
                p.iter_mut().for_each(|v| *v *= cfg.output_scale);
            }
            acts.push(h);
            return Ok(BatchTape {
                layout: layout.clone(),
                batch,
                acts,
                pre,
                sin0,
                cos0,
                output: p,
                out_dim: out,
            });
        }

        let scale = cfg.layer_scale(l);
        if scale != 1.0 {
            p.iter_mut().for_each(|v| *v *= scale);
        }
        let mut next = vec![0.0; rows * out];
        let mut sv = vec![0.0; batch * out];
        let mut cv = vec![0.0; batch * out];
        for i in 0..batch * out {
            let (si, ci) = p[i].sin_cos();
            sv[i] = si;
            cv[i] = ci;
            next[i] = si;
        }
        for kk in 0..d {
            let Some(l1) = layout.d1_lane(kk) else { continue };
            let o1 = l1 * batch * out;
            for i in 0..batch * out {
                next[o1 + i] = cv[i] * p[o1 + i];
            }
            if let Some(l2) = layout.d2_lane(kk) {
                let o2 = l2 * batch * out;
                for i in 0..batch * out {
                    let p1 = p[o1 + i];
                    next[o2 + i] = -sv[i] * p1 * p1 + cv[i] * p[o2 + i];
                }
            }
        }
        acts.push(h);
        pre.push(p);
        sin0.push(sv);
        cos0.push(cv);
        h = next;
    }
    unreachable!("network has at least one layer")
}

/// Gradients produced by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    /// Flat weight gradient (layer-major, as [`NetworkWeights::flatten`]).
    pub weights: Option<Vec<f64>>,
    pub latent: Vec<f64>,
}

/// Reverse pass. `grad_out` has the layout of the tape's outputs.
pub fn backward(
    w: &NetworkWeights,
    z: &[f64],
    tape: &BatchTape,
    grad_out: &[f64],
    want_weights: bool,
) -> Result<BatchGrads> {
    if grad_out.len() != tape.output.len() {
        return Err(Error::Shape("output gradient has the wrong length".into()));
    }
    let cfg = &w.config;
    let d = cfg.spatial_dim;
    let layout = &tape.layout;
    let batch = tape.batch;
    let rows = layout.lanes() * batch;

    let mut offsets = Vec::with_capacity(w.layers.len());
    let mut off = 0;
    for l in &w.layers {
        offsets.push(off);
        off += l.weight.len() + l.bias.len();
    }
    let mut gw = want_weights.then(|| vec![0.0; off]);
    let mut gz = vec![0.0; cfg.latent_dim];

    let last = w.layers.len() - 1;
    let mut g_a: Vec<f64> = grad_out.iter().map(|g| g * cfg.output_scale).collect();
    for l in (0..=last).rev() {
        let layer = &w.layers[l];
        let s = layer.shape;
        let k = s.hidden_in();
        let out = s.out_dim;
        if l < last {
            // g_a currently holds dL/dH for this layer's activation output.
            let p = &tape.pre[l];
            let sv = &tape.sin0[l];
            let cv = &tape.cos0[l];
            let n = batch * out;
            let mut gp = vec![0.0; rows * out];
            for i in 0..n {
                gp[i] = g_a[i] * cv[i];
            }
            for kk in 0..d {
                let Some(l1) = layout.d1_lane(kk) else { continue };
                let o1 = l1 * n;
                for i in 0..n {
                    let gh1 = g_a[o1 + i];
                    gp[o1 + i] += gh1 * cv[i];
                    gp[i] -= gh1 * sv[i] * p[o1 + i];
                }
                if let Some(l2) = layout.d2_lane(kk) {
                    let o2 = l2 * n;
                    for i in 0..n {
                        let gh2 = g_a[o2 + i];
                        let p1 = p[o1 + i];
                        gp[o2 + i] = gh2 * cv[i];
                        gp[o1 + i] -= 2.0 * gh2 * sv[i] * p1;
                        gp[i] -= gh2 * (cv[i] * p1 * p1 + sv[i] * p[o2 + i]);
                    }
                }
            }
            let scale = cfg.layer_scale(l);
            if scale != 1.0 {
                gp.iter_mut().for_each(|v| *v *= scale);
            }
            g_a = gp;
        }

        // Value-lane column sums feed the bias and the latent columns.
        let mut gsum = vec![0.0; out];
        for b in 0..batch {
            for o in 0..out {
                gsum[o] += g_a[b * out + o];
            }
        }
        let h = &tape.acts[l];
        if let Some(gw) = gw.as_mut() {
            let base = offsets[l];
            let (wpart, bpart) = gw[base..base + layer.weight.len() + out].split_at_mut(layer.weight.len());
            // dW_h (out × k) = G_aᵀ · H
            gemm(out, rows, k, 1.0, &g_a, (1, out), h, (k, 1), 0.0, wpart, (s.in_dim, 1));
            for o in 0..out {
                for j in 0..s.latent_cols {
                    wpart[o * s.in_dim + k + j] = gsum[o] * z[j];
                }
            }
            bpart.copy_from_slice(&gsum);
        }
        if s.latent_cols > 0 {
            for o in 0..out {
                let row = &layer.weight[o * s.in_dim + k..(o + 1) * s.in_dim];
                for (j, gzj) in gz.iter_mut().enumerate() {
                    *gzj += row[j] * gsum[o];
                }
            }
        }
        if l > 0 {
            // dH (rows × k) = G_a · W_h
            let mut gh = vec![0.0; rows * k];
            gemm(rows, out, k, 1.0, &g_a, (out, 1), &layer.weight, (s.in_dim, 1), 0.0, &mut gh, (k, 1));
            g_a = gh;
        }
    }
    Ok(BatchGrads { weights: gw, latent: gz })
}

/// Value-only evaluation of many points, chunked to bound memory.
/// Returns `points × output_dim` values.
pub fn evaluate(w: &NetworkWeights, xs: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    const CHUNK: usize = 4096;
    let d = w.config.spatial_dim;
    let layout = LaneLayout::value_only(d);
    let mut out = Vec::with_capacity(xs.len() / d * w.config.output_dim);
    for chunk in xs.chunks(CHUNK * d) {
        let tape = forward(w, chunk, z, &layout)?;
        out.extend_from_slice(&tape.output);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Graph;
    use crate::network::{
        forward as plain_forward, init_weights, GraphNetwork, LatentOwner, LatentVector, NetworkConfig,
        PeriodicEmbedding,
    };

    fn configs() -> Vec<NetworkConfig> {
        let base = NetworkConfig {
            depth: 4,
            width: 7,
            spatial_dim: 2,
            output_dim: 2,
            latent_dim: 3,
            first_layer_scale: 2.0,
            ..NetworkConfig::default()
        };
        vec![
            base.clone(),
            NetworkConfig {
                periodic_embedding: Some(PeriodicEmbedding {
                    coordinate: 0,
                    period: 1.0,
                }),
                ..base.clone()
            },
            NetworkConfig {
                insert_latent_at: Some(1),
                ..base.clone()
            },
            NetworkConfig {
                latent_dim: 0,
                ..base
            },
        ]
    }

    fn points(n: usize) -> Vec<f64> {
        (0..2 * n).map(|i| ((i as f64) * 0.371).sin() * 0.9).collect()
    }

    #[test]
    fn lane_layout_indices() {
        let l = LaneLayout::with_second(vec![true, false, true]);
        assert_eq!(l.lanes(), 6);
        assert_eq!(l.d1_lane(2), Some(3));
        assert_eq!(l.d2_lane(0), Some(4));
        assert_eq!(l.d2_lane(1), None);
        assert_eq!(l.d2_lane(2), Some(5));
        assert_eq!(LaneLayout::value_only(2).lanes(), 1);
    }

    #[test]
    fn lanes_agree_with_graph_jets() {
        for cfg in configs() {
            let w = init_weights(&cfg, 21).unwrap();
            let z: Vec<f64> = (0..cfg.latent_dim).map(|j| 0.3 - 0.2 * j as f64).collect();
            let xs = points(5);
            let tape = forward(&w, &xs, &z, &LaneLayout::full(2)).unwrap();
            let mut g = Graph::new();
            let net = GraphNetwork::register(&mut g, &w);
            let zn: Vec<_> = z.iter().map(|&v| g.constant(v)).collect();
            for b in 0..5 {
                let u = net.forward_with_jets(&mut g, &xs[2 * b..2 * b + 2], &zn).unwrap();
                let plain = plain_forward(&w, &xs[2 * b..2 * b + 2], &LatentVector::new(z.clone(), LatentOwner::New)).unwrap();
                for o in 0..2 {
                    let (v, d1, d2) = g.jet_values(&u[o]);
                    assert!((tape.output(0, b, o) - v).abs() < 1e-13);
                    assert!((tape.output(0, b, o) - plain[o]).abs() < 1e-13);
                    for k in 0..2 {
                        assert!((tape.output(1 + k, b, o) - d1[k]).abs() < 1e-12);
                        assert!((tape.output(3 + k, b, o) - d2[k]).abs() < 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn reverse_pass_matches_graph_backward() {
        for cfg in configs() {
            let w = init_weights(&cfg, 4).unwrap();
            let z: Vec<f64> = (0..cfg.latent_dim).map(|j| 0.1 + 0.25 * j as f64).collect();
            let xs = points(3);
            let layout = LaneLayout::with_second(vec![true, false]);
            let tape = forward(&w, &xs, &z, &layout).unwrap();
            // loss = Σ c_i · lane outputs, with fixed pseudo-random weights c
            let mut seed = tape.zero_output_grad();
            for (i, s) in seed.iter_mut().enumerate() {
                *s = ((i as f64) * 1.7).cos();
            }
            let grads = backward(&w, &z, &tape, &seed, true).unwrap();

            let mut g = Graph::new();
            let net = GraphNetwork::register(&mut g, &w);
            let zn: Vec<_> = z.iter().map(|&v| g.parameter(v)).collect();
            let mut terms = vec![];
            for b in 0..3 {
                let u = net.forward_with_jets(&mut g, &xs[2 * b..2 * b + 2], &zn).unwrap();
                for o in 0..2 {
                    let lanes = [u[o].val, u[o].d1[0], u[o].d1[1], u[o].d2[0]];
                    for (lane, &node) in lanes.iter().enumerate() {
                        let c = seed[tape.output_index(lane, b, o)];
                        terms.push(g.scale(c, node));
                    }
                }
            }
            let root = g.sum(&terms);
            let mut dense = vec![];
            g.backward_dense(root, &mut dense).unwrap();
            let gw = grads.weights.unwrap();
            for (i, (a, b)) in gw.iter().zip(&dense[..net.num_leaves]).enumerate() {
                assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()), "param {i}: {a} vs {b}");
            }
            for (j, a) in grads.latent.iter().enumerate() {
                let b = dense[net.num_leaves + j];
                assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()), "latent {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn evaluate_matches_plain_forward() {
        let cfg = &configs()[1];
        let w = init_weights(cfg, 8).unwrap();
        let z = vec![0.5, -0.5, 0.25];
        let xs = points(10);
        let vals = evaluate(&w, &xs, &z).unwrap();
        for b in 0..10 {
            let p = plain_forward(&w, &xs[2 * b..2 * b + 2], &LatentVector::new(z.clone(), LatentOwner::New)).unwrap();
            for o in 0..2 {
                assert!((vals[b * 2 + o] - p[o]).abs() < 1e-13);
            }
        }
    }
}
