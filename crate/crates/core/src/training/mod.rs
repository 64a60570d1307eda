//! Physics-informed objectives and training regimes: multi-task
//! pre-training with per-task latents, latent-only and joint fine-tuning,
//! and the from-scratch, transfer and Reptile baselines.

mod adam;
pub mod loss;
mod regimes;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{LatentOwner, LatentVector, NetworkWeights};
use crate::problems::{Family, InstanceSpec};
use crate::{Error, Result};

pub use adam::{adam_step, lr_at, AdamState};
pub use loss::{mc_physics_loss, physics_loss_fast, regularized_loss, Ansatz, Batch, LossEval, LossSettings, NetworkAnsatz, ReferenceAnsatz};
pub use regimes::{
    finetune, from_scratch, latent_init, pretrain, reptile_pretrain, stream_rng, train_weights, transfer_learning,
    EvalData, FinetuneOutput, WeightsOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    /// Latent only, weights frozen.
    #[serde(rename = "mad-l")]
    LatentOnly,
    /// Latent and weights jointly.
    #[serde(rename = "mad-lm")]
    LatentAndWeights,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mad-l" => Ok(Self::LatentOnly),
            "mad-lm" => Ok(Self::LatentAndWeights),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}, expected mad-l or mad-lm"))),
        }
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LatentOnly => "mad-l",
            Self::LatentAndWeights => "mad-lm",
        })
    }
}

/// Optimization settings shared by all regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `M_r`, interior samples per iteration and task.
    pub interior_samples: usize,
    /// `M_bc`, boundary samples per iteration and task.
    pub boundary_samples: usize,
    pub lambda_bc: f64,
    /// Latent penalty weight is `1/σ²`.
    pub sigma: f64,
    pub p: u32,
    /// Learning rate for weights.
    pub lr: f64,
    /// Learning rate for latents; defaults to `lr`.
    pub lr_latent: Option<f64>,
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub mode: FinetuneMode,
    /// Std of the Gaussian latent initialization at pre-training.
    pub latent_init_std: f64,
    /// Keep the `‖z‖²/σ²` term while fine-tuning.
    pub finetune_penalty: bool,
    pub reptile_inner_steps: usize,
    pub reptile_meta_step: f64,
    /// Relative L2 is recorded every `eval_every` iterations.
    pub eval_every: usize,
    pub seed: u64,
    /// Single-threaded, timestamps zeroed; outputs are byte-reproducible.
    pub strict: bool,
    /// Worker threads for the per-task loss in pre-training; 0 = available cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            interior_samples: 1024,
            boundary_samples: 128,
            lambda_bc: 1.0,
            sigma: 100.0,
            p: 2,
            lr: 1e-3,
            lr_latent: None,
            milestones: vec![0.4, 0.6, 0.8],
            decay: 0.5,
            pretrain_iters: 1000,
            finetune_iters: 1000,
            mode: FinetuneMode::LatentAndWeights,
            latent_init_std: 1e-2,
            finetune_penalty: true,
            reptile_inner_steps: 8,
            reptile_meta_step: 0.1,
            eval_every: 10,
            seed: 0,
            strict: false,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.interior_samples < 1 || self.boundary_samples < 1 {
            return bad("interior_samples and boundary_samples must be >= 1");
        }
        if !(self.lambda_bc > 0.0) {
            return bad("lambda_bc must be positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if self.p < 1 {
            return bad("p must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if let Some(l) = self.lr_latent {
            if !(l >= 0.0) {
                return bad("lr_latent must be non-negative");
            }
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("milestones must lie in [0, 1]");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if !(self.latent_init_std >= 0.0) {
            return bad("latent_init_std must be non-negative");
        }
        if self.reptile_inner_steps < 1 {
            return bad("reptile_inner_steps must be >= 1");
        }
        if !(self.reptile_meta_step >= 0.0 && self.reptile_meta_step <= 1.0) {
            return bad("reptile_meta_step must lie in [0, 1]");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1");
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda_bc: self.lambda_bc,
            p: self.p,
        }
    }

    pub fn penalty(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }

    pub fn latent_lr(&self) -> f64 {
        self.lr_latent.unwrap_or(self.lr)
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        lr_at(step, total, self.lr, &self.milestones, self.decay)
    }

    pub fn latent_lr_at(&self, step: usize, total: usize) -> f64 {
        lr_at(step, total, self.latent_lr(), &self.milestones, self.decay)
    }

    pub fn worker_threads(&self) -> usize {
        if self.strict {
            1
        } else if self.threads == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.threads
        }
    }
}

/// One trace row. Loss and relative error are measured at the parameters
/// before the update of that iteration; the last row holds the final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub relative_l2: Option<f64>,
    pub lr: f64,
    pub elapsed_ms: u64,
    pub phase: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    /// Loss or gradient became non-finite; parameters were reset to the
    /// best-loss state seen.
    Diverged { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub status: RunStatus,
}

impl Default for RunTrace {
    fn default() -> Self {
        Self {
            rows: Vec::new(),
            status: RunStatus::Completed,
        }
    }
}

impl RunTrace {
    pub fn final_relative_l2(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.relative_l2)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn rows_in_phase<'a>(&'a self, phase: &'a str) -> impl Iterator<Item = &'a TraceRow> + 'a {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "loss", "relative_l2", "lr", "elapsed_ms", "phase"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.loss),
                r.relative_l2.map(|v| format!("{v:e}")).unwrap_or_default(),
                format!("{:e}", r.lr),
                r.elapsed_ms.to_string(),
                r.phase.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("trace column {i}: {e}")))
            };
            let rel = match rec.get(2).unwrap_or("") {
                "" => None,
                _ => Some(num(2)?),
            };
            rows.push(TraceRow {
                iteration: num(0)? as usize,
                loss: num(1)?,
                relative_l2: rel,
                lr: num(3)?,
                elapsed_ms: num(4)? as u64,
                phase: rec.get(5).unwrap_or("").to_string(),
            });
        }
        Ok(Self {
            rows,
            status: RunStatus::Completed,
        })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv: {other:?}")),
    }
}

/// Latents found in pre-training, with the task descriptors used for
/// nearest-neighbor initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBank {
    pub dim: usize,
    pub latents: Vec<Vec<f64>>,
    pub descriptors: Option<Vec<Vec<f64>>>,
}

impl LatentBank {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn latent(&self, i: usize) -> LatentVector {
        LatentVector::new(self.latents[i].clone(), LatentOwner::Task(i))
    }
}

/// Run provenance stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: TrainConfig,
    pub seed: u64,
    pub iterations: usize,
    pub status: RunStatus,
    pub code_version: String,
}

/// Shared weights plus the per-task latent bank from pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedModel {
    pub weights: NetworkWeights,
    pub bank: LatentBank,
    pub family: Family,
    pub instances: Vec<InstanceSpec>,
    pub manifest: Manifest,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                interior_samples: 0,
                ..Default::default()
            },
            TrainConfig {
                sigma: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lambda_bc: -1.0,
                ..Default::default()
            },
            TrainConfig {
                p: 0,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mad-l".parse::<FinetuneMode>().unwrap(), FinetuneMode::LatentOnly);
        assert_eq!("mad-lm".parse::<FinetuneMode>().unwrap(), FinetuneMode::LatentAndWeights);
        assert!("mad-lx".parse::<FinetuneMode>().is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = RunTrace {
            rows: vec![
                TraceRow {
                    iteration: 0,
                    loss: 1.5,
                    relative_l2: Some(0.25),
                    lr: 1e-3,
                    elapsed_ms: 0,
                    phase: "finetune".into(),
                },
                TraceRow {
                    iteration: 1,
                    loss: 0.1 + 0.2,
                    relative_l2: None,
                    lr: 1e-3,
                    elapsed_ms: 3,
                    phase: "finetune".into(),
                },
            ],
            status: RunStatus::Completed,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.save_csv(&p).unwrap();
        assert_eq!(RunTrace::read_csv(&p).unwrap(), t);
    }
}
