use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eval::relative_l2;
use crate::network::{batch, init_weights, LatentOwner, LatentVector, NetworkConfig, NetworkWeights};
use crate::problems::ProblemInstance;
use crate::{Error, Result};

use super::{
    adam_step, physics_loss_fast, AdamState, Batch, FinetuneMode, LatentBank, LossEval, Manifest, PretrainedModel,
    RunStatus, RunTrace, TraceRow, TrainConfig,
};

/// Stream reserved for latent initialization.
const LATENT_STREAM: u64 = u64::MAX;
/// Stream reserved for task selection in Reptile and Transfer-Learning.
const CHOICE_STREAM: u64 = u64::MAX - 1;

/// Independent ChaCha stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Evaluation points and reference values for relative L2 tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalData {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

impl EvalData {
    pub fn new(points: Vec<f64>, values: Vec<f64>) -> Self {
        Self { points, values }
    }

    pub fn error(&self, w: &NetworkWeights, z: &[f64]) -> Result<f64> {
        let pred = batch::evaluate(w, &self.points, z)?;
        relative_l2(&pred, &self.values)
    }
}

struct Clock {
    start: Instant,
    strict: bool,
}

impl Clock {
    fn new(strict: bool) -> Self {
        Self {
            start: Instant::now(),
            strict,
        }
    }

    fn ms(&self) -> u64 {
        if self.strict {
            0
        } else {
            self.start.elapsed().as_millis() as u64
        }
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Weights and trace of a weights-training regime.
#[derive(Debug, Clone)]
pub struct WeightsOutput {
    pub weights: NetworkWeights,
    pub trace: RunTrace,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub weights: NetworkWeights,
    pub latent: LatentVector,
    pub trace: RunTrace,
}

struct SingleTask<'a> {
    cfg: &'a TrainConfig,
    inst: &'a ProblemInstance,
    eval: Option<&'a EvalData>,
    train_weights: bool,
    train_latent: bool,
    penalty: Option<f64>,
    phase: &'a str,
}

impl SingleTask<'_> {
    /// Runs `iters` Adam steps with fresh optimizer states, appending rows
    /// to `trace`. On divergence the parameters are reset to the best-loss
    /// state and the trace status is set.
    fn run(
        &self,
        w: &mut NetworkWeights,
        z: &mut [f64],
        iters: usize,
        rng: &mut ChaCha8Rng,
        clock: &Clock,
        trace: &mut RunTrace,
    ) -> Result<()> {
        let cfg = self.cfg;
        let settings = cfg.loss_settings();
        let mut flat = w.flatten();
        let mut adam_w = AdamState::new(if self.train_weights { flat.len() } else { 0 });
        let mut adam_z = AdamState::new(z.len());
        let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;

        for k in 0..=iters {
            let lr = cfg.lr_at(k.min(iters), iters);
            let b = Batch::sample(self.inst, rng, cfg.interior_samples, cfg.boundary_samples);
            let grads = k < iters;
            let res = physics_loss_fast(
                w,
                z,
                self.inst,
                &b,
                settings,
                self.penalty,
                grads && self.train_weights,
                grads && self.train_latent,
            );
            let le = match res {
                Ok(le) => le,
                Err(e) if is_divergence(&e) => return self.diverge(w, z, k, best, trace),
                Err(e) => return Err(e),
            };
            let rel = match self.eval {
                Some(ev) if k % cfg.eval_every == 0 || k == iters => Some(ev.error(w, z)?),
                _ => None,
            };
            trace.rows.push(TraceRow {
                iteration: k,
                loss: le.loss,
                relative_l2: rel,
                lr,
                elapsed_ms: clock.ms(),
                phase: self.phase.to_string(),
            });
            if best.as_ref().is_none_or(|(l, _, _)| le.loss < *l) {
                best = Some((le.loss, if self.train_weights { flat.clone() } else { Vec::new() }, z.to_vec()));
            }
            if !grads {
                break;
            }
            if self.train_weights {
                let g = le.weight_grad.as_deref().unwrap_or_default();
                if let Err(e) = adam_step(&mut adam_w, &mut flat, g, lr) {
                    if is_divergence(&e) {
                        return self.diverge(w, z, k, best, trace);
                    }
                    return Err(e);
                }
                w.assign_flat(&flat)?;
            }
            if self.train_latent {
                let lrz = cfg.latent_lr_at(k, iters);
                if let Err(e) = adam_step(&mut adam_z, z, &le.latent_grad, lrz) {
                    if is_divergence(&e) {
                        return self.diverge(w, z, k, best, trace);
                    }
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    fn diverge(
        &self,
        w: &mut NetworkWeights,
        z: &mut [f64],
        k: usize,
        best: Option<(f64, Vec<f64>, Vec<f64>)>,
        trace: &mut RunTrace,
    ) -> Result<()> {
        if let Some((_, bw, bz)) = best {
            if self.train_weights {
                w.assign_flat(&bw)?;
            }
            z.copy_from_slice(&bz);
        }
        log::warn!("{} diverged at iteration {k}; keeping best-loss state", self.phase);
        trace.status = RunStatus::Diverged { iteration: k };
        Ok(())
    }
}

/// Plain physics-informed training of all weights from `init` with the
/// latent held at `z`. Batches come from stream 0 of `cfg.seed`.
pub fn train_weights(
    cfg: &TrainConfig,
    init: NetworkWeights,
    z: &[f64],
    inst: &ProblemInstance,
    iters: usize,
    eval: Option<&EvalData>,
    phase: &str,
) -> Result<WeightsOutput> {
    cfg.validate()?;
    inst.family().check_network(&init.config)?;
    let mut w = init;
    let mut z = z.to_vec();
    let mut trace = RunTrace::default();
    let task = SingleTask {
        cfg,
        inst,
        eval,
        train_weights: true,
        train_latent: false,
        penalty: None,
        phase,
    };
    let mut rng = stream_rng(cfg.seed, 0);
    task.run(&mut w, &mut z, iters, &mut rng, &Clock::new(cfg.strict), &mut trace)?;
    Ok(WeightsOutput { weights: w, trace })
}

/// Latent-free network trained from a seeded random initialization.
pub fn from_scratch(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    inst: &ProblemInstance,
    eval: Option<&EvalData>,
) -> Result<WeightsOutput> {
    let c = net.without_latent();
    let init = init_weights(&c, cfg.seed)?;
    train_weights(cfg, init, &[], inst, cfg.finetune_iters, eval, "scratch")
}

/// From-scratch training on `source` for `pretrain_iters`, then all weights
/// fine-tuned on `target` for `finetune_iters`. Phases are marked
/// `source` and `target` in the trace.
pub fn transfer_learning(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    source: &ProblemInstance,
    target: &ProblemInstance,
    eval: Option<&EvalData>,
) -> Result<WeightsOutput> {
    let c = net.without_latent();
    let init = init_weights(&c, cfg.seed)?;
    let src = train_weights(cfg, init, &[], source, cfg.pretrain_iters, None, "source")?;
    if src.trace.diverged() {
        return Ok(src);
    }
    let tgt = train_weights(cfg, src.weights, &[], target, cfg.finetune_iters, eval, "target")?;
    let mut trace = src.trace;
    trace.rows.extend(tgt.trace.rows);
    trace.status = tgt.trace.status;
    Ok(WeightsOutput {
        weights: tgt.weights,
        trace,
    })
}

/// Multi-task pre-training: shared weights and one latent per instance,
/// each with its own Adam state. Batches for instance `i` come from stream
/// `i` of `cfg.seed`.
pub fn pretrain(cfg: &TrainConfig, net: &NetworkConfig, instances: &[ProblemInstance]) -> Result<(PretrainedModel, RunTrace)> {
    cfg.validate()?;
    net.validate()?;
    let family = match instances.first() {
        Some(i) => i.family(),
        None => return Err(Error::InvalidConfig("pre-training needs at least one instance".into())),
    };
    if instances.iter().any(|i| i.family() != family) {
        return Err(Error::InvalidConfig("all pre-training instances must share a family".into()));
    }
    family.check_network(net)?;
    let n = net.latent_dim;
    let iters = cfg.pretrain_iters;
    let settings = cfg.loss_settings();
    let penalty = Some(cfg.penalty());
    let train_latent = n > 0 && cfg.latent_lr() > 0.0;

    let mut w = init_weights(net, cfg.seed)?;
    let mut zr = stream_rng(cfg.seed, LATENT_STREAM);
    let mut zs: Vec<Vec<f64>> = instances
        .iter()
        .map(|_| {
            (0..n)
                .map(|_| cfg.latent_init_std * zr.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..instances.len()).map(|i| stream_rng(cfg.seed, i as u64)).collect();
    let mut flat = w.flatten();
    let mut adam_w = AdamState::new(flat.len());
    let mut adam_z: Vec<AdamState> = instances.iter().map(|_| AdamState::new(n)).collect();
    let clock = Clock::new(cfg.strict);
    let threads = cfg.worker_threads().min(instances.len()).max(1);
    let mut trace = RunTrace::default();
    let mut best: Option<(f64, Vec<f64>, Vec<Vec<f64>>)> = None;

    let mut iterations = 0;
    for k in 0..=iters {
        let lr = cfg.lr_at(k.min(iters), iters);
        let grads = k < iters;
        let evals = per_task_losses(&w, &zs, instances, &mut rngs, cfg, settings, penalty, grads, train_latent, threads);
        let evals = match evals {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                trace.status = RunStatus::Diverged { iteration: k };
                break;
            }
            Err(e) => return Err(e),
        };
        let total = evals.iter().fold(0.0, |acc, e| acc + e.loss);
        trace.rows.push(TraceRow {
            iteration: k,
            loss: total,
            relative_l2: None,
            lr,
            elapsed_ms: clock.ms(),
            phase: "pretrain".into(),
        });
        if !total.is_finite() {
            trace.status = RunStatus::Diverged { iteration: k };
            break;
        }
        if best.as_ref().is_none_or(|(l, _, _)| total < *l) {
            best = Some((total, flat.clone(), zs.clone()));
        }
        iterations = k;
        if !grads {
            break;
        }
        let mut gw = vec![0.0; flat.len()];
        for e in &evals {
            for (a, b) in gw.iter_mut().zip(e.weight_grad.as_deref().unwrap_or_default()) {
                *a += b;
            }
        }
        if adam_step(&mut adam_w, &mut flat, &gw, lr).is_err() {
            trace.status = RunStatus::Diverged { iteration: k };
            break;
        }
        w.assign_flat(&flat)?;
        if train_latent {
            let lrz = cfg.latent_lr_at(k, iters);
            let mut failed = false;
            for ((z, st), e) in zs.iter_mut().zip(adam_z.iter_mut()).zip(&evals) {
                failed |= adam_step(st, z, &e.latent_grad, lrz).is_err();
            }
            if failed {
                trace.status = RunStatus::Diverged { iteration: k };
                break;
            }
        }
        iterations = k + 1;
    }
    if trace.diverged() {
        if let Some((_, bw, bz)) = best {
            w.assign_flat(&bw)?;
            zs = bz;
        }
        log::warn!("pre-training diverged; keeping best-loss state");
    }

    let descriptors: Option<Vec<Vec<f64>>> = instances.iter().map(|i| i.descriptor()).collect();
    let model = PretrainedModel {
        weights: w,
        bank: LatentBank {
            dim: n,
            latents: zs,
            descriptors,
        },
        family,
        instances: instances.iter().map(|i| i.spec()).collect(),
        manifest: Manifest {
            train: cfg.clone(),
            seed: cfg.seed,
            iterations,
            status: trace.status,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    Ok((model, trace))
}

#[allow(clippy::too_many_arguments)]
fn per_task_losses(
    w: &NetworkWeights,
    zs: &[Vec<f64>],
    instances: &[ProblemInstance],
    rngs: &mut [ChaCha8Rng],
    cfg: &TrainConfig,
    settings: super::LossSettings,
    penalty: Option<f64>,
    grads: bool,
    train_latent: bool,
    threads: usize,
) -> Result<Vec<LossEval>> {
    let one = |i: usize, rng: &mut ChaCha8Rng| -> Result<LossEval> {
        let b = Batch::sample(&instances[i], rng, cfg.interior_samples, cfg.boundary_samples);
        physics_loss_fast(w, &zs[i], &instances[i], &b, settings, penalty, grads, grads && train_latent)
    };
    if threads <= 1 {
        return rngs.iter_mut().enumerate().map(|(i, r)| one(i, r)).collect();
    }
    // Each worker owns a contiguous block of tasks; results are gathered in
    // task order, so the reduction is identical to the serial one.
    let chunk = instances.len().div_ceil(threads);
    let results: Vec<Vec<Result<LossEval>>> = std::thread::scope(|s| {
        let handles: Vec<_> = rngs
            .chunks_mut(chunk)
            .enumerate()
            .map(|(c, block)| {
                let one = &one;
                s.spawn(move || {
                    block
                        .iter_mut()
                        .enumerate()
                        .map(|(j, r)| one(c * chunk + j, r))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("loss worker panicked")).collect()
    });
    results.into_iter().flatten().collect()
}

/// Nearest pre-training descriptor (smallest index on ties), or the mean
/// latent when the family has no descriptors.
pub fn latent_init(model: &PretrainedModel, inst: &ProblemInstance) -> Result<LatentVector> {
    let bank = &model.bank;
    if bank.is_empty() {
        return Err(Error::InvalidConfig("latent bank is empty".into()));
    }
    if let (Some(descs), Some(d)) = (&bank.descriptors, inst.descriptor()) {
        let mut best = (f64::INFINITY, 0usize);
        for (i, di) in descs.iter().enumerate() {
            if di.len() != d.len() {
                return Err(Error::Shape("descriptor lengths differ".into()));
            }
            let dist: f64 = di.iter().zip(&d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        return Ok(bank.latent(best.1));
    }
    let mut mean = vec![0.0; bank.dim];
    for z in &bank.latents {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    let inv = 1.0 / bank.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(LatentVector::new(mean, LatentOwner::New))
}

/// Adapts a pre-trained model to a new instance, optimizing the latent
/// alone or the latent and the weights, from fresh Adam states.
pub fn finetune(
    cfg: &TrainConfig,
    model: &PretrainedModel,
    inst: &ProblemInstance,
    mode: FinetuneMode,
    eval: Option<&EvalData>,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if inst.family() != model.family {
        return Err(Error::InvalidConfig(format!(
            "checkpoint family {:?} does not match instance family {:?}",
            model.family,
            inst.family()
        )));
    }
    let mut w = model.weights.clone();
    let mut z = latent_init(model, inst)?.components;
    let train_weights = mode == FinetuneMode::LatentAndWeights;
    let task = SingleTask {
        cfg,
        inst,
        eval,
        train_weights,
        train_latent: !z.is_empty(),
        penalty: cfg.finetune_penalty.then(|| cfg.penalty()),
        phase: "finetune",
    };
    let mut trace = RunTrace::default();
    let mut rng = stream_rng(cfg.seed, 0);
    task.run(&mut w, &mut z, cfg.finetune_iters, &mut rng, &Clock::new(cfg.strict), &mut trace)?;
    Ok(FinetuneOutput {
        weights: w,
        latent: LatentVector::new(z, LatentOwner::New),
        trace,
    })
}

/// First-order meta-learning of a latent-free initialization: for each of
/// `pretrain_iters` meta steps, a task is drawn uniformly, trained for
/// `reptile_inner_steps` Adam steps from the meta-weights, and the
/// meta-weights move by `ε(θ_task − θ)`.
pub fn reptile_pretrain(cfg: &TrainConfig, net: &NetworkConfig, instances: &[ProblemInstance]) -> Result<WeightsOutput> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::InvalidConfig("Reptile needs at least one instance".into()));
    }
    let c = net.without_latent();
    for i in instances {
        i.family().check_network(&c)?;
    }
    let mut w = init_weights(&c, cfg.seed)?;
    let mut theta = w.flatten();
    let mut choice = stream_rng(cfg.seed, CHOICE_STREAM);
    let mut rngs: Vec<ChaCha8Rng> = (0..instances.len()).map(|i| stream_rng(cfg.seed, i as u64)).collect();
    let clock = Clock::new(cfg.strict);
    let settings = cfg.loss_settings();
    let eps = cfg.reptile_meta_step;
    let iters = cfg.pretrain_iters;
    let mut trace = RunTrace::default();
    let mut task_w = w.clone();

    'outer: for k in 0..iters {
        let lr = cfg.lr_at(k, iters);
        let i = choice.random_range(0..instances.len());
        let mut phi = theta.clone();
        task_w.assign_flat(&phi)?;
        let mut adam = AdamState::new(phi.len());
        let mut first_loss = f64::NAN;
        for s in 0..cfg.reptile_inner_steps {
            let b = Batch::sample(&instances[i], &mut rngs[i], cfg.interior_samples, cfg.boundary_samples);
            let le = match physics_loss_fast(&task_w, &[], &instances[i], &b, settings, None, true, false) {
                Ok(le) => le,
                Err(e) if is_divergence(&e) => {
                    trace.status = RunStatus::Diverged { iteration: k };
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if s == 0 {
                first_loss = le.loss;
            }
            if adam_step(&mut adam, &mut phi, le.weight_grad.as_deref().unwrap_or_default(), lr).is_err() {
                trace.status = RunStatus::Diverged { iteration: k };
                break 'outer;
            }
            task_w.assign_flat(&phi)?;
        }
        if !phi.iter().all(|v| v.is_finite()) {
            trace.status = RunStatus::Diverged { iteration: k };
            break;
        }
        for (t, p) in theta.iter_mut().zip(&phi) {
            *t = (1.0 - eps) * *t + eps * p;
        }
        trace.rows.push(TraceRow {
            iteration: k,
            loss: first_loss,
            relative_l2: None,
            lr,
            elapsed_ms: clock.ms(),
            phase: "reptile".into(),
        });
    }
    w.assign_flat(&theta)?;
    Ok(WeightsOutput { weights: w, trace })
}
