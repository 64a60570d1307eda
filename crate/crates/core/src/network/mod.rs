//! Latent-conditioned sine decoder `u(x, z)`.
//!
//! Three evaluation paths share one weight layout:
//! * [`forward`], plain `f64` evaluation at one point;
//! * [`GraphNetwork::forward_with_jets`], graph nodes with second-order jets,
//!   used as the reference path for gradients;
//! * [`batch`], the dense lane engine the trainers run on.

pub mod batch;
mod graph_path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use graph_path::GraphNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Sine,
}

/// Replace one input coordinate by `(sin 2πx/P, cos 2πx/P)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicEmbedding {
    pub coordinate: usize,
    pub period: f64,
}

impl PeriodicEmbedding {
    pub fn frequency(&self) -> f64 {
        std::f64::consts::TAU / self.period
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of affine layers, output layer included.
    pub depth: usize,
    pub width: usize,
    pub spatial_dim: usize,
    pub output_dim: usize,
    pub latent_dim: usize,
    pub activation: Activation,
    pub first_layer_scale: f64,
    /// Constant factor on the output layer. Lets a network whose init
    /// produces O(1) values start near small-amplitude targets.
    #[serde(default = "unit")]
    pub output_scale: f64,
    pub insert_latent_at: Option<usize>,
    pub periodic_embedding: Option<PeriodicEmbedding>,
}

fn unit() -> f64 {
    1.0
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 7,
            width: 128,
            spatial_dim: 1,
            output_dim: 1,
            latent_dim: 128,
            activation: Activation::Sine,
            first_layer_scale: 1.0,
            output_scale: 1.0,
            insert_latent_at: None,
            periodic_embedding: None,
        }
    }
}

/// Shape of one affine layer. Latent columns, when present, sit after the
/// regular input columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub latent_cols: usize,
}

impl LayerShape {
    pub fn hidden_in(&self) -> usize {
        self.in_dim - self.latent_cols
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("network depth must be >= 2, got {}", self.depth));
        }
        if self.width < 1 {
            return bad("network width must be >= 1".into());
        }
        if self.spatial_dim < 1 || self.output_dim < 1 {
            return bad("spatial_dim and output_dim must be >= 1".into());
        }
        if !(self.first_layer_scale.is_finite() && self.first_layer_scale > 0.0) {
            return bad("first_layer_scale must be positive".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad("output_scale must be positive".into());
        }
        if let Some(j) = self.insert_latent_at {
            if j < 1 || j + 2 > self.depth {
                return bad(format!(
                    "insert_latent_at must lie in [1, {}], got {j}",
                    self.depth as isize - 2
                ));
            }
            if self.width <= self.latent_dim {
                return bad("insert_latent_at requires width > latent_dim".into());
            }
        }
        if let Some(p) = self.periodic_embedding {
            if p.coordinate >= self.spatial_dim {
                return bad("periodic_embedding coordinate out of range".into());
            }
            if !(p.period.is_finite() && p.period > 0.0) {
                return bad("periodic_embedding period must be positive".into());
            }
        }
        Ok(())
    }

    pub fn embedded_dim(&self) -> usize {
        self.spatial_dim + usize::from(self.periodic_embedding.is_some())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let n = self.latent_dim;
        let mut shapes = Vec::with_capacity(self.depth);
        let mut prev = self.embedded_dim();
        for l in 0..self.depth {
            let latent_cols = if l == 0 || self.insert_latent_at == Some(l - 1) { n } else { 0 };
            let out_dim = if l + 1 == self.depth {
                self.output_dim
            } else if self.insert_latent_at == Some(l) {
                self.width - n
            } else {
                self.width
            };
            shapes.push(LayerShape {
                in_dim: prev + latent_cols,
                out_dim,
                latent_cols,
            });
            prev = out_dim;
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|s| s.in_dim * s.out_dim + s.out_dim).sum()
    }

    pub fn layer_scale(&self, l: usize) -> f64 {
        if l == 0 {
            self.first_layer_scale
        } else {
            1.0
        }
    }

    /// Stable 64-bit fingerprint of the configuration.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&json);
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Same architecture without latent inputs.
    pub fn without_latent(&self) -> Self {
        Self {
            latent_dim: 0,
            insert_latent_at: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `out_dim × in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub shape: LayerShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|shape| Layer {
                weight: vec![0.0; shape.in_dim * shape.out_dim],
                bias: vec![0.0; shape.out_dim],
                shape,
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Layer-major flattening: weights then biases of each layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.clear();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn from_flat(config: &NetworkConfig, flat: &[f64]) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        w.assign_flat(flat)?;
        Ok(w)
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// SHA-256 over the config fingerprint and the little-endian parameters.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.config.fingerprint().to_le_bytes());
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniform initialization on `±sqrt(6/fan_in)/s`, `s = first_layer_scale`
/// on the first layer and 1 elsewhere. Biases use the same law.
pub fn init_weights(config: &NetworkConfig, seed: u64) -> Result<NetworkWeights> {
    let mut w = NetworkWeights::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, layer) in w.layers.iter_mut().enumerate() {
        let bound = (6.0 / layer.shape.in_dim as f64).sqrt() / config.layer_scale(l);
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentOwner {
    Task(usize),
    New,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub components: Vec<f64>,
    pub owner: LatentOwner,
}

impl LatentVector {
    pub fn new(components: Vec<f64>, owner: LatentOwner) -> Self {
        Self { components, owner }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n], LatentOwner::New)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Embedded input features for one point.
pub fn embed_input(x: &[f64], config: &NetworkConfig) -> Vec<f64> {
    match config.periodic_embedding {
        None => x.to_vec(),
        Some(p) => {
            let w = p.frequency();
            let mut out = Vec::with_capacity(x.len() + 1);
            for (k, &xk) in x.iter().enumerate() {
                if k == p.coordinate {
                    let a = w * xk;
                    out.push(a.sin());
                    out.push(a.cos());
                } else {
                    out.push(xk);
                }
            }
            out
        }
    }
}

fn check_shapes(w: &NetworkWeights, x: &[f64], z: &[f64]) -> Result<()> {
    if x.len() != w.config.spatial_dim {
        return Err(Error::Shape(format!(
            "input has {} coordinates, network expects {}",
            x.len(),
            w.config.spatial_dim
        )));
    }
    if z.len() != w.config.latent_dim {
        return Err(Error::Shape(format!(
            "latent has {} components, network expects {}",
            z.len(),
            w.config.latent_dim
        )));
    }
    Ok(())
}

/// Plain evaluation at one point.
pub fn forward(w: &NetworkWeights, x: &[f64], z: &LatentVector) -> Result<Vec<f64>> {
    check_shapes(w, x, &z.components)?;
    let mut h = embed_input(x, &w.config);
    let last = w.layers.len() - 1;
    for (l, layer) in w.layers.iter().enumerate() {
        let s = layer.shape;
        let mut next = Vec::with_capacity(s.out_dim);
        for o in 0..s.out_dim {
            let row = &layer.weight[o * s.in_dim..(o + 1) * s.in_dim];
            let mut acc = 0.0;
            for (i, &hi) in h.iter().enumerate() {
                acc += row[i] * hi;
            }
            if s.latent_cols > 0 {
                for (j, &zj) in z.components.iter().enumerate() {
                    acc += row[s.hidden_in() + j] * zj;
                }
            }
            let a = acc + layer.bias[o];
            next.push(if l == last {
                w.config.output_scale * a
            } else {
                (w.config.layer_scale(l) * a).sin()
            });
        }
        h = next;
    }
    Ok(h)
}
