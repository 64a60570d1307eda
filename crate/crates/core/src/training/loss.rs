//! Monte Carlo physics-informed objective, as an explicit graph and as a
//! fused batched evaluator that shares the per-point residual definitions.

use crate::diffcore::{Graph, Jet2, NodeId};
use crate::network::batch::{self, BatchTape, LaneLayout};
use crate::network::{GraphNetwork, NetworkWeights};
use crate::problems::ProblemInstance;
use crate::{Error, Result};

/// Interior and boundary points of one Monte Carlo batch, flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub interior: Vec<f64>,
    pub boundary: Vec<f64>,
}

impl Batch {
    pub fn sample<R: rand::Rng + ?Sized>(inst: &ProblemInstance, rng: &mut R, m_r: usize, m_bc: usize) -> Self {
        let interior = inst.sample_interior(rng, m_r);
        let boundary = inst.sample_boundary(rng, m_bc);
        Self { interior, boundary }
    }
}

/// Boundary weight and loss exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda_bc: f64,
    pub p: u32,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self { lambda_bc: 1.0, p: 2 }
    }
}

/// Something that produces solution jets from coordinate jets.
pub trait Ansatz {
    fn jets(&self, g: &mut Graph, coords: &[Jet2]) -> Result<Vec<Jet2>>;
}

/// Decoder with latent nodes.
pub struct NetworkAnsatz<'a> {
    pub net: &'a GraphNetwork,
    pub z: &'a [NodeId],
}

impl Ansatz for NetworkAnsatz<'_> {
    fn jets(&self, g: &mut Graph, coords: &[Jet2]) -> Result<Vec<Jet2>> {
        self.net.forward_jets_from(g, coords, self.z)
    }
}

/// Analytic solution of an instance.
pub struct ReferenceAnsatz<'a>(pub &'a ProblemInstance);

impl Ansatz for ReferenceAnsatz<'_> {
    fn jets(&self, g: &mut Graph, coords: &[Jet2]) -> Result<Vec<Jet2>> {
        match self.0.reference_jets(g, coords) {
            Some(j) => Ok(vec![j?]),
            None => Err(Error::InvalidConfig(format!("{:?} has no analytic reference", self.0.family()))),
        }
    }
}

/// `Σ_c |r_c|^p` as a node.
fn point_term(g: &mut Graph, comps: &[NodeId], p: u32) -> NodeId {
    let terms: Vec<NodeId> = comps
        .iter()
        .map(|&r| {
            if p % 2 == 0 {
                g.powi(r, p)
            } else {
                let a = g.abs(r);
                g.powi(a, p)
            }
        })
        .collect();
    if terms.len() == 1 {
        terms[0]
    } else {
        g.sum(&terms)
    }
}

fn check_batch(inst: &ProblemInstance, batch: &Batch) -> Result<(usize, usize)> {
    let d = inst.spatial_dim();
    if batch.interior.is_empty() || batch.boundary.is_empty() {
        return Err(Error::Shape("loss batches must be nonempty".into()));
    }
    if batch.interior.len() % d != 0 || batch.boundary.len() % d != 0 {
        return Err(Error::Shape(format!("batch coordinates are not a multiple of {d}")));
    }
    Ok((batch.interior.len() / d, batch.boundary.len() / d))
}

/// `(1/M_r) Σ ‖r‖_p^p + (λ_bc/M_bc) Σ ‖b‖_p^p` built on `g`.
pub fn mc_physics_loss(
    g: &mut Graph,
    u: &dyn Ansatz,
    inst: &ProblemInstance,
    batch: &Batch,
    settings: LossSettings,
) -> Result<NodeId> {
    let (m_r, m_bc) = check_batch(inst, batch)?;
    let d = inst.spatial_dim();
    let lift = |g: &mut Graph, x: &[f64]| -> Result<Vec<Jet2>> {
        x.iter()
            .enumerate()
            .map(|(k, &xk)| g.lift_coordinate(xk, k, d).map_err(Error::from))
            .collect()
    };
    let mut interior = Vec::with_capacity(m_r);
    for x in batch.interior.chunks(d) {
        let coords = lift(g, x)?;
        let jets = u.jets(g, &coords)?;
        let r = inst.residual(g, &jets, x)?;
        if r.iter().any(|&n| !g.value(n).is_finite()) {
            return Err(Error::NonFinite {
                what: "residual",
                point: x.to_vec(),
            });
        }
        interior.push(point_term(g, &r, settings.p));
    }
    let mut boundary = Vec::with_capacity(m_bc);
    for x in batch.boundary.chunks(d) {
        let coords = lift(g, x)?;
        let vals: Vec<NodeId> = u.jets(g, &coords)?.iter().map(|j| j.val).collect();
        let b = inst.boundary(g, &vals, x)?;
        if b.iter().any(|&n| !g.value(n).is_finite()) {
            return Err(Error::NonFinite {
                what: "boundary mismatch",
                point: x.to_vec(),
            });
        }
        boundary.push(point_term(g, &b, settings.p));
    }
    let si = g.sum(&interior);
    let sb = g.sum(&boundary);
    let li = g.scale(1.0 / m_r as f64, si);
    let lb = g.scale(settings.lambda_bc / m_bc as f64, sb);
    Ok(g.add(li, lb))
}

/// `loss + (1/σ²)‖z‖²`.
pub fn regularized_loss(g: &mut Graph, loss: NodeId, z: &[NodeId], sigma: f64) -> Result<NodeId> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("σ must be positive, got {sigma}")));
    }
    let sq: Vec<NodeId> = z.iter().map(|&zj| g.mul(zj, zj)).collect();
    let s = g.sum(&sq);
    let pen = g.scale(1.0 / (sigma * sigma), s);
    Ok(g.add(loss, pen))
}

/// Loss value with optional gradients from the fused evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub weight_grad: Option<Vec<f64>>,
    pub latent_grad: Vec<f64>,
}

/// Per-point residual scratch space, reused across points.
struct PointKernel {
    g: Graph,
    grad: Vec<f64>,
}

impl PointKernel {
    fn new() -> Self {
        Self {
            g: Graph::new(),
            grad: Vec::new(),
        }
    }

    /// Value of the point term and its gradient w.r.t. the lanes read from
    /// `tape` at point `b`, written into `seed` scaled by `scale`.
    #[allow(clippy::too_many_arguments)]
    fn interior(
        &mut self,
        inst: &ProblemInstance,
        tape: &BatchTape,
        layout: &LaneLayout,
        b: usize,
        x: &[f64],
        p: u32,
        scale: f64,
        seed: Option<&mut [f64]>,
    ) -> Result<f64> {
        let g = &mut self.g;
        g.clear();
        let d = layout.dim();
        let mut lanes = Vec::with_capacity(layout.lanes());
        let mut jets = Vec::with_capacity(tape.out_dim());
        for o in 0..tape.out_dim() {
            let val = g.parameter(tape.output(0, b, o));
            lanes.push((0, o));
            let mut d1 = Vec::with_capacity(d);
            let mut d2 = Vec::with_capacity(d);
            for k in 0..d {
                d1.push(match layout.d1_lane(k) {
                    Some(l) => {
                        lanes.push((l, o));
                        g.parameter(tape.output(l, b, o))
                    }
                    None => g.constant(0.0),
                });
            }
            for k in 0..d {
                d2.push(match layout.d2_lane(k) {
                    Some(l) => {
                        lanes.push((l, o));
                        g.parameter(tape.output(l, b, o))
                    }
                    None => g.constant(0.0),
                });
            }
            jets.push(Jet2 { val, d1, d2 });
        }
        let r = inst.residual(g, &jets, x)?;
        if r.iter().any(|&n| !g.value(n).is_finite()) {
            return Err(Error::NonFinite {
                what: "residual",
                point: x.to_vec(),
            });
        }
        let t = point_term(g, &r, p);
        let v = g.value(t);
        if let Some(seed) = seed {
            g.backward_dense(t, &mut self.grad)?;
            for (&(l, o), &gv) in lanes.iter().zip(&self.grad) {
                seed[tape.output_index(l, b, o)] += scale * gv;
            }
        }
        Ok(v)
    }

    #[allow(clippy::too_many_arguments)]
    fn boundary(
        &mut self,
        inst: &ProblemInstance,
        tape: &BatchTape,
        b: usize,
        x: &[f64],
        p: u32,
        scale: f64,
        seed: Option<&mut [f64]>,
    ) -> Result<f64> {
        let g = &mut self.g;
        g.clear();
        let vals: Vec<NodeId> = (0..tape.out_dim()).map(|o| g.parameter(tape.output(0, b, o))).collect();
        let r = inst.boundary(g, &vals, x)?;
        if r.iter().any(|&n| !g.value(n).is_finite()) {
            return Err(Error::NonFinite {
                what: "boundary mismatch",
                point: x.to_vec(),
            });
        }
        let t = point_term(g, &r, p);
        let v = g.value(t);
        if let Some(seed) = seed {
            g.backward_dense(t, &mut self.grad)?;
            for (o, &gv) in self.grad.iter().enumerate() {
                seed[tape.output_index(0, b, o)] += scale * gv;
            }
        }
        Ok(v)
    }
}

/// Physics loss (plus `penalty·‖z‖²` when given) through the batched
/// engine. Gradients are produced when `want_weights` or `want_latent` is set.
#[allow(clippy::too_many_arguments)]
pub fn physics_loss_fast(
    w: &NetworkWeights,
    z: &[f64],
    inst: &ProblemInstance,
    batch: &Batch,
    settings: LossSettings,
    penalty: Option<f64>,
    want_weights: bool,
    want_latent: bool,
) -> Result<LossEval> {
    let (m_r, m_bc) = check_batch(inst, batch)?;
    let d = inst.spatial_dim();
    let want_grad = want_weights || want_latent;
    let layout = inst.family().lane_layout();
    let mut kernel = PointKernel::new();

    let tape_i = batch::forward(w, &batch.interior, z, &layout)?;
    let mut seed_i = want_grad.then(|| tape_i.zero_output_grad());
    let si = 1.0 / m_r as f64;
    let mut sum_i = 0.0;
    for (b, x) in batch.interior.chunks(d).enumerate() {
        sum_i += kernel.interior(inst, &tape_i, &layout, b, x, settings.p, si, seed_i.as_deref_mut())?;
    }

    let vlayout = LaneLayout::value_only(d);
    let tape_b = batch::forward(w, &batch.boundary, z, &vlayout)?;
    let mut seed_b = want_grad.then(|| tape_b.zero_output_grad());
    let sb = settings.lambda_bc / m_bc as f64;
    let mut sum_b = 0.0;
    for (b, x) in batch.boundary.chunks(d).enumerate() {
        sum_b += kernel.boundary(inst, &tape_b, b, x, settings.p, sb, seed_b.as_deref_mut())?;
    }

    let mut loss = sum_i * si + sum_b * sb;
    if let Some(c) = penalty {
        loss += c * z.iter().fold(0.0, |acc, v| acc + v * v);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            point: Vec::new(),
        });
    }

    let mut out = LossEval {
        loss,
        weight_grad: None,
        latent_grad: vec![0.0; z.len()],
    };
    if want_grad {
        let gi = batch::backward(w, z, &tape_i, seed_i.as_deref().unwrap_or_default(), want_weights)?;
        let gb = batch::backward(w, z, &tape_b, seed_b.as_deref().unwrap_or_default(), want_weights)?;
        if let (Some(mut a), Some(bw)) = (gi.weights, gb.weights) {
            for (x, y) in a.iter_mut().zip(&bw) {
                *x += y;
            }
            out.weight_grad = Some(a);
        }
        for (j, gz) in out.latent_grad.iter_mut().enumerate() {
            *gz = gi.latent[j] + gb.latent[j];
            if let Some(c) = penalty {
                *gz += 2.0 * c * z[j];
            }
        }
    }
    Ok(out)
}
