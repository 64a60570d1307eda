//! Experiment driver behind the `madrom` binary.
//!
//! Every subcommand reads an [`ExperimentConfig`], writes only below the run
//! directory and maps failures to exit codes: 2 for configuration errors,
//! 3 for numerical divergence, 4 for I/O and checkpoint errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{sample_tasks, solve_references, ExperimentConfig};
use crate::eval::{empirical_manifold_gap, iterations_to_threshold, pca_project, write_gap_table, ErrorReport, GapSettings};
use crate::network::{batch, init_weights, NetworkWeights};
use crate::persist;
use crate::problems::{Family, ProblemInstance};
use crate::training::{
    finetune, from_scratch, latent_init, pretrain, reptile_pretrain, stream_rng, train_weights, EvalData, FinetuneMode,
    LatentBank, PretrainedModel, RunTrace,
};
use crate::{Error, Result};

/// Stream of `tasks.seed` used for evaluation point sets.
const EVAL_STREAM: u64 = 1 << 32;

#[derive(Debug, Parser)]
#[command(name = "madrom", version, about = "Pre-train and adapt latent-conditioned PDE decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded, timing-free runs for byte-identical outputs.
    #[arg(long)]
    pub strict: bool,
    /// Overrides the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    FromScratch,
    Transfer,
    Reptile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VizTarget {
    Pca,
    Curves,
    Fields,
    Gap,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train on S₁ and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a checkpoint to every task in S₂.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// mad-l (latent only) or mad-lm (latent and weights).
        #[arg(long)]
        mode: String,
        /// Error threshold for the iterations-to-threshold column.
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
    },
    /// Run a comparison method over S₂.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Baseline,
        /// Ignored; baselines do not start from a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
    },
    /// Errors of a checkpoint on S₁ and at the initial latent on S₂.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Plot-ready CSV bundles.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        what: VizTarget,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fine-tuned weights to draw fields from, if present.
        #[arg(long, default_value = "mad-lm")]
        mode: String,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::Shape(_) => 2,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::Solver(_) | Error::Graph(_) => 3,
        Error::Io(_) | Error::Persist(_) => 4,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&resolve(&common)?).map(|p| println!("{}", p.display())),
        Command::Finetune {
            common,
            checkpoint,
            mode,
            tau,
        } => {
            let mode: FinetuneMode = mode.parse()?;
            cmd_finetune(&resolve(&common)?, &checkpoint, mode, tau).map(|p| println!("{}", p.display()))
        }
        Command::Baseline {
            common,
            which,
            checkpoint,
            tau,
        } => {
            if checkpoint.is_some() {
                log::warn!("baselines train from a fresh initialization; --checkpoint is ignored");
            }
            cmd_baseline(&resolve(&common)?, which, tau).map(|p| println!("{}", p.display()))
        }
        Command::Eval { common, checkpoint } => cmd_eval(&resolve(&common)?, &checkpoint).map(|p| println!("{}", p.display())),
        Command::Viz {
            common,
            what,
            checkpoint,
            mode,
        } => {
            let mode: FinetuneMode = mode.parse()?;
            cmd_viz(&resolve(&common)?, what, checkpoint.as_deref(), mode).map(|p| println!("{}", p.display()))
        }
    }
}

/// Loads the config and applies command-line overrides.
pub fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(|e| match e {
        Error::Io(io) => Error::InvalidConfig(format!("reading {}: {io}", c.config.display())),
        other => other,
    })?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if c.strict {
        cfg.train.strict = true;
        cfg.train.threads = 1;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn subdir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let d = cfg.out_dir.join(name);
    fs::create_dir_all(&d)?;
    Ok(d)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    persist::write_atomic(path, bytes)
}

fn diverged(trace: &RunTrace, phase: &str) -> Result<()> {
    match trace.status {
        crate::training::RunStatus::Diverged { iteration } => Err(Error::Diverged {
            phase: phase.to_string(),
            iteration,
        }),
        _ => Ok(()),
    }
}

pub fn eval_data(cfg: &ExperimentConfig, i: usize, inst: &ProblemInstance) -> Result<EvalData> {
    let mut rng = stream_rng(cfg.tasks.seed, EVAL_STREAM + i as u64);
    let (p, v) = inst.eval_set(&mut rng, &cfg.eval)?;
    Ok(EvalData::new(p, v))
}

pub fn finetune_tasks(cfg: &ExperimentConfig) -> Result<Vec<ProblemInstance>> {
    let mut s2 = sample_tasks(cfg)?.finetune;
    solve_references(&mut s2, &cfg.solver)?;
    Ok(s2)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = subdir(cfg, "pretrain")?;
    let tasks = sample_tasks(cfg)?;
    let (model, trace) = pretrain(&cfg.train, &cfg.network, &tasks.pretrain)?;
    let ckpt = dir.join("model.ckpt");
    persist::save_model(&model, &ckpt)?;
    trace.save_csv(&dir.join("trace.csv"))?;
    let manifest = serde_json::to_vec_pretty(&model.manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_file(&dir.join("manifest.json"), &manifest)?;
    write_file(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    diverged(&trace, "pretrain")?;
    Ok(ckpt)
}

/// Per-task outputs shared by fine-tuning and baselines.
struct TaskOutputs {
    dir: PathBuf,
    names: Vec<String>,
    errors: Vec<f64>,
    rows: Vec<[String; 4]>,
}

impl TaskOutputs {
    fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            names: Vec::new(),
            errors: Vec::new(),
            rows: Vec::new(),
        }
    }

    fn record(&mut self, i: usize, trace: &RunTrace, w: &NetworkWeights, z: &[f64], tau: f64) -> Result<()> {
        let name = format!("task-{i}");
        trace.save_csv(&self.dir.join(format!("{name}.csv")))?;
        persist::save_weights(w, &self.dir.join(format!("{name}.weights")))?;
        let bank = LatentBank {
            dim: z.len(),
            latents: vec![z.to_vec()],
            descriptors: None,
        };
        persist::save_bank(&bank, &self.dir.join(format!("{name}.latent")))?;
        let err = trace
            .final_relative_l2()
            .ok_or_else(|| Error::InvalidConfig("trace has no evaluation rows".into()))?;
        let itt = iterations_to_threshold(trace, tau).map(|k| k.to_string()).unwrap_or_default();
        self.rows.push([name.clone(), format!("{err:e}"), itt, w.digest_hex()]);
        self.names.push(name);
        self.errors.push(err);
        Ok(())
    }

    fn finish(self) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "final_relative_l2", "iterations_to_threshold", "weights_sha256"])
            .map_err(crate::training::csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(crate::training::csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_file(&self.dir.join("tasks.csv"), &bytes)?;
        let report = ErrorReport::new(self.names, self.errors)?;
        let mut t = Vec::new();
        report.write_table(&mut t)?;
        write_file(&self.dir.join("errors.csv"), &t)?;
        let mut s = Vec::new();
        report.write_summary(&mut s)?;
        write_file(&self.dir.join("summary.csv"), &s)?;
        Ok(self.dir)
    }
}

pub fn cmd_finetune(cfg: &ExperimentConfig, checkpoint: &Path, mode: FinetuneMode, tau: f64) -> Result<PathBuf> {
    let model = persist::load_model(checkpoint)?;
    if model.family != cfg.family {
        return Err(Error::InvalidConfig(format!(
            "checkpoint family {:?} does not match config family {:?}",
            model.family, cfg.family
        )));
    }
    let s2 = finetune_tasks(cfg)?;
    let mut out = TaskOutputs::new(subdir(cfg, &format!("finetune-{mode}"))?);
    let mut status = Ok(());
    for (i, inst) in s2.iter().enumerate() {
        let ev = eval_data(cfg, i, inst)?;
        let r = finetune(&cfg.train, &model, inst, mode, Some(&ev))?;
        out.record(i, &r.trace, &r.weights, &r.latent.components, tau)?;
        if status.is_ok() {
            status = diverged(&r.trace, &format!("finetune task {i}"));
        }
    }
    let dir = out.finish()?;
    status.map(|_| dir)
}

pub fn cmd_baseline(cfg: &ExperimentConfig, which: Baseline, tau: f64) -> Result<PathBuf> {
    let tasks = sample_tasks(cfg)?;
    let s2 = finetune_tasks(cfg)?;
    let name = match which {
        Baseline::FromScratch => "from-scratch",
        Baseline::Transfer => "transfer",
        Baseline::Reptile => "reptile",
    };
    let mut out = TaskOutputs::new(subdir(cfg, &format!("baseline-{name}"))?);
    let net = cfg.network.without_latent();
    // Shared starting weights for transfer and Reptile.
    let start: Option<NetworkWeights> = match which {
        Baseline::FromScratch => None,
        Baseline::Transfer => {
            use rand::Rng;
            let mut choice = stream_rng(cfg.train.seed, u64::MAX - 1);
            let src = choice.random_range(0..tasks.pretrain.len());
            log::info!("transfer source: pre-training task {src}");
            let init = init_weights(&net, cfg.train.seed)?;
            let r = train_weights(&cfg.train, init, &[], &tasks.pretrain[src], cfg.train.pretrain_iters, None, "source")?;
            r.trace.save_csv(&out.dir.join("source.csv"))?;
            diverged(&r.trace, "transfer source")?;
            Some(r.weights)
        }
        Baseline::Reptile => {
            let r = reptile_pretrain(&cfg.train, &net, &tasks.pretrain)?;
            r.trace.save_csv(&out.dir.join("meta.csv"))?;
            diverged(&r.trace, "reptile")?;
            Some(r.weights)
        }
    };
    let mut status = Ok(());
    for (i, inst) in s2.iter().enumerate() {
        let ev = eval_data(cfg, i, inst)?;
        let r = match &start {
            None => from_scratch(&cfg.train, &net, inst, Some(&ev))?,
            Some(w) => train_weights(&cfg.train, w.clone(), &[], inst, cfg.train.finetune_iters, Some(&ev), "target")?,
        };
        out.record(i, &r.trace, &r.weights, &[], tau)?;
        if status.is_ok() {
            status = diverged(&r.trace, &format!("{name} task {i}"));
        }
    }
    let dir = out.finish()?;
    status.map(|_| dir)
}

fn load_checked(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PretrainedModel> {
    let model = persist::load_model(checkpoint)?;
    if model.family != cfg.family {
        return Err(Error::InvalidConfig(format!(
            "checkpoint family {:?} does not match config family {:?}",
            model.family, cfg.family
        )));
    }
    Ok(model)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    let model = load_checked(cfg, checkpoint)?;
    let dir = subdir(cfg, "eval")?;
    let mut s1: Vec<ProblemInstance> = model.instances.iter().map(|s| s.build()).collect::<Result<_>>()?;
    solve_references(&mut s1, &cfg.solver)?;
    let mut names = Vec::new();
    let mut errs = Vec::new();
    for (i, inst) in s1.iter().enumerate() {
        let ev = eval_data(cfg, i, inst)?;
        names.push(format!("pretrain-{i}"));
        errs.push(ev.error(&model.weights, &model.bank.latents[i])?);
    }
    let pre = ErrorReport::new(names, errs)?;
    let s2 = finetune_tasks(cfg)?;
    let mut names = Vec::new();
    let mut errs = Vec::new();
    for (i, inst) in s2.iter().enumerate() {
        let ev = eval_data(cfg, i, inst)?;
        let z = latent_init(&model, inst)?;
        names.push(format!("task-{i}"));
        errs.push(ev.error(&model.weights, &z.components)?);
    }
    let init = ErrorReport::new(names, errs)?;
    for (name, r) in [("pretrain", &pre), ("initial", &init)] {
        let mut t = Vec::new();
        r.write_table(&mut t)?;
        write_file(&dir.join(format!("{name}_errors.csv")), &t)?;
        let mut s = Vec::new();
        r.write_summary(&mut s)?;
        write_file(&dir.join(format!("{name}_summary.csv")), &s)?;
    }
    Ok(dir)
}

pub fn cmd_viz(cfg: &ExperimentConfig, what: VizTarget, checkpoint: Option<&Path>, mode: FinetuneMode) -> Result<PathBuf> {
    let dir = subdir(cfg, "viz")?;
    let need = || checkpoint.ok_or_else(|| Error::InvalidConfig(format!("viz {what:?} needs --checkpoint")));
    match what {
        VizTarget::Curves => viz_curves(cfg, &dir),
        VizTarget::Pca => viz_pca(cfg, &load_checked(cfg, need()?)?, &dir),
        VizTarget::Fields => viz_fields(cfg, &load_checked(cfg, need()?)?, mode, &dir),
        VizTarget::Gap => viz_gap(cfg, &load_checked(cfg, need()?)?, &dir),
    }?;
    Ok(dir)
}

/// `method,task,iteration,relative_l2` for every evaluated row of every
/// per-task trace under the run directory.
fn viz_curves(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mut methods: Vec<PathBuf> = match fs::read_dir(&cfg.out_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("finetune-") || n.starts_with("baseline-"))
            })
            .collect(),
        Err(e) => return Err(e.into()),
    };
    methods.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "task", "iteration", "relative_l2"])
        .map_err(crate::training::csv_err)?;
    for m in &methods {
        let method = m.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut traces: Vec<(usize, PathBuf)> = fs::read_dir(m)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let stem = p.file_stem()?.to_str()?.strip_prefix("task-")?.parse().ok()?;
                (p.extension()? == "csv").then_some((stem, p))
            })
            .collect();
        traces.sort();
        for (i, p) in traces {
            let t = RunTrace::read_csv(&p)?;
            for r in t.rows.iter().filter(|r| r.relative_l2.is_some()) {
                w.write_record([
                    method.clone(),
                    i.to_string(),
                    r.iteration.to_string(),
                    format!("{:e}", r.relative_l2.unwrap_or_default()),
                ])
                .map_err(crate::training::csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_file(&dir.join("curves.csv"), &bytes)
}

/// Fixed grid shared by every instance of a family.
fn common_grid(family: Family) -> Vec<f64> {
    match family {
        Family::Ode => {
            let (lo, hi) = crate::problems::ode::DOMAIN;
            (0..256).map(|i| lo + (hi - lo) * i as f64 / 255.0).collect()
        }
        Family::Burgers => {
            let mut g = Vec::new();
            for it in 0..11 {
                for ix in 0..64 {
                    g.push(ix as f64 / 64.0);
                    g.push(it as f64 / 10.0);
                }
            }
            g
        }
        Family::Laplace => {
            // polar grid inside the unit disk, where every exact solution is defined
            let mut g = Vec::new();
            for ir in 1..=12 {
                let r = 0.95 * ir as f64 / 12.0;
                for ia in 0..32 {
                    let a = std::f64::consts::TAU * ia as f64 / 32.0;
                    g.push(r * a.cos());
                    g.push(r * a.sin());
                }
            }
            g
        }
    }
}

fn exact_on(inst: &ProblemInstance, grid: &[f64]) -> Result<Vec<f64>> {
    grid.chunks(inst.spatial_dim()).map(|x| inst.reference(x)).collect()
}

/// PCA of exact and decoded pre-training solutions on a common grid.
/// Writes `pca.csv` (`sample_id,pc1,pc2,label`) and `pca_explained.csv`.
fn viz_pca(cfg: &ExperimentConfig, model: &PretrainedModel, dir: &Path) -> Result<()> {
    let mut s1: Vec<ProblemInstance> = model.instances.iter().map(|s| s.build()).collect::<Result<_>>()?;
    let grid = common_grid(cfg.family);
    if cfg.family == Family::Burgers {
        let mut coarse = cfg.solver;
        coarse.nx = coarse.nx.min(256);
        solve_references(&mut s1, &coarse)?;
    }
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (i, inst) in s1.iter().enumerate() {
        samples.push(exact_on(inst, &grid)?);
        labels.push(format!("exact-{i}"));
        samples.push(batch::evaluate(&model.weights, &grid, &model.bank.latents[i])?);
        labels.push(format!("decoded-{i}"));
    }
    // one-dimensional latents: also trace the trial curve
    if model.bank.dim == 1 {
        let (lo, hi) = model
            .bank
            .latents
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), z| (a.min(z[0]), b.max(z[0])));
        let pad = 0.1 * (hi - lo).max(1e-3);
        for k in 0..=40 {
            let z = lo - pad + (hi - lo + 2.0 * pad) * k as f64 / 40.0;
            samples.push(batch::evaluate(&model.weights, &grid, &[z])?);
            labels.push(format!("trial-{k}"));
        }
    }
    let proj = pca_project(&samples, labels)?;
    let mut out = Vec::new();
    proj.write_csv(&mut out)?;
    write_file(&dir.join("pca.csv"), &out)?;
    let text = format!("pc,explained\n1,{:e}\n2,{:e}\n", proj.explained[0], proj.explained[1]);
    write_file(&dir.join("pca_explained.csv"), text.as_bytes())
}

/// `task,coord0,coord1,reference,prediction`. Burgers rows are the slices
/// t = 0, 0.5 and 1 (coord0 = x, coord1 = t); ODE rows leave coord1 empty.
fn viz_fields(cfg: &ExperimentConfig, model: &PretrainedModel, mode: FinetuneMode, dir: &Path) -> Result<()> {
    let s2 = finetune_tasks(cfg)?;
    let ft_dir = cfg.out_dir.join(format!("finetune-{mode}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "coord0", "coord1", "reference", "prediction"])
        .map_err(crate::training::csv_err)?;
    for (i, inst) in s2.iter().enumerate() {
        let wp = ft_dir.join(format!("task-{i}.weights"));
        let zp = ft_dir.join(format!("task-{i}.latent"));
        let (weights, z) = if wp.exists() && zp.exists() {
            let bank = persist::load_bank(&zp)?;
            (persist::load_weights(&wp)?, bank.latents.first().cloned().unwrap_or_default())
        } else {
            (model.weights.clone(), latent_init(model, inst)?.components)
        };
        let pts: Vec<f64> = match inst {
            ProblemInstance::Burgers(p) => {
                let f = p.reference.as_ref().ok_or_else(|| Error::Solver("missing reference".into()))?;
                let mut pts = Vec::new();
                for t in [0.0, 0.5, 1.0] {
                    for j in 0..f.nx {
                        pts.push(f.x(j));
                        pts.push(t);
                    }
                }
                pts
            }
            _ => eval_data(cfg, i, inst)?.points,
        };
        let pred = batch::evaluate(&weights, &pts, &z)?;
        let d = inst.spatial_dim();
        for (x, p) in pts.chunks(d).zip(&pred) {
            let r = inst.reference(x)?;
            let c1 = if d > 1 { format!("{:e}", x[1]) } else { String::new() };
            w.write_record([i.to_string(), format!("{:e}", x[0]), c1, format!("{r:e}"), format!("{p:e}")])
                .map_err(crate::training::csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_file(&dir.join("fields.csv"), &bytes)
}

/// Empirical manifold gap of the checkpoint for every S₂ task on its
/// evaluation set.
fn viz_gap(cfg: &ExperimentConfig, model: &PretrainedModel, dir: &Path) -> Result<()> {
    let s2 = finetune_tasks(cfg)?;
    let mut results = Vec::new();
    for (i, inst) in s2.iter().enumerate() {
        let ev = eval_data(cfg, i, inst)?;
        results.extend(empirical_manifold_gap(&model.weights, &[ev.values], &ev.points, &GapSettings::default())?);
    }
    let mut out = Vec::new();
    write_gap_table(&results, &mut out)?;
    write_file(&dir.join("gap.csv"), &out)
}
