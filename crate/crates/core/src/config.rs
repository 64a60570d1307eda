//! Experiment configuration files and task-set sampling.
//!
//! A config names a family and a profile (`desk` or `full`). The profile
//! supplies every default; keys present in the file override individual
//! fields. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::network::NetworkConfig;
use crate::problems::{
    ellipse_sample, grf_sample, ode::equidistant, polygon_sample, BurgersProblem, BurgersSolverConfig, EvalGrid, Family,
    GrfSpec, LaplaceDomain, LaplaceProblem, OdeProblem, ProblemInstance,
};
use crate::training::{stream_rng, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

/// How S₁ and S₂ are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    InDistribution,
    /// Burgers with ν = 10^U(−3,−1) per task.
    HeterogeneousNu,
    /// Burgers with S₂ initial conditions from the rougher field.
    Extrapolation,
    /// Laplace with S₂ domains drawn as ellipses.
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// |S₁|
    pub pretrain: usize,
    /// |S₂|
    pub finetune: usize,
    pub variant: Variant,
    /// Seed for drawing the task sets, independent of the training seed.
    pub seed: u64,
    /// Burgers viscosity when it is not varied.
    pub nu: f64,
    /// ODE parameter interval, split into `pretrain + finetune` equidistant
    /// values.
    pub eta_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    pub profile: Profile,
    pub out_dir: PathBuf,
    pub tasks: TaskConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalGrid,
    pub solver: BurgersSolverConfig,
}

impl ExperimentConfig {
    /// Built-in defaults for a family and profile.
    pub fn profile(family: Family, profile: Profile) -> Self {
        let full = profile == Profile::Full;
        let mut train = TrainConfig::default();
        let mut eval = EvalGrid::default();
        let mut tasks = TaskConfig {
            pretrain: 100,
            finetune: 50,
            variant: Variant::InDistribution,
            seed: 0,
            nu: 0.01,
            eta_range: [0.0, 2.0],
        };
        let mut network = NetworkConfig {
            spatial_dim: family.spatial_dim(),
            periodic_embedding: family.periodic_embedding(),
            ..NetworkConfig::default()
        };
        match family {
            Family::Ode => {
                tasks.pretrain = 19;
                tasks.finetune = 1;
                network.depth = 4;
                network.width = 64;
                network.latent_dim = 1;
                network.first_layer_scale = 3.0;
                train.interior_samples = 128;
                train.boundary_samples = 2;
                train.lr = 1e-2;
                train.lr_latent = Some(1e-1);
                train.milestones.clear();
                train.pretrain_iters = 200;
                train.finetune_iters = 500;
            }
            Family::Burgers | Family::Laplace if full => {
                train.interior_samples = 8192;
                train.boundary_samples = 1024;
                train.pretrain_iters = 50_000;
                train.finetune_iters = 10_000;
            }
            Family::Burgers => {
                tasks.pretrain = 10;
                tasks.finetune = 5;
                network.depth = 4;
                network.width = 48;
                network.latent_dim = 16;
                train.interior_samples = 1024;
                train.boundary_samples = 128;
                train.pretrain_iters = 5000;
                train.finetune_iters = 2000;
                eval.burgers_stride = 4;
            }
            Family::Laplace => {
                tasks.pretrain = 10;
                tasks.finetune = 5;
                network.depth = 4;
                network.width = 48;
                network.latent_dim = 16;
                // boundary data is O(1e-2)
                network.output_scale = 0.01;
                train.interior_samples = 512;
                train.boundary_samples = 256;
                train.lambda_bc = 1000.0;
                train.lr = 3e-3;
                train.pretrain_iters = 6000;
                train.finetune_iters = 2000;
                eval.laplace_points = 4096;
            }
        }
        Self {
            family,
            profile,
            out_dir: PathBuf::from("runs").join(format!("{family:?}").to_lowercase()),
            tasks,
            network,
            train,
            eval,
            solver: BurgersSolverConfig::default(),
        }
    }

    /// Parses TOML text: `family` and optional `profile` select the
    /// defaults, the remaining keys override them.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let family: Family = match user.get("family") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("family: {e}")))?,
            None => return Err(Error::InvalidConfig("missing key `family`".into())),
        };
        let profile: Profile = match user.get("profile") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let base = toml::Table::try_from(Self::profile(family, profile))
            .map_err(|e| Error::InvalidConfig(format!("serializing defaults: {e}")))?;
        let merged = merge(base, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let t = &self.tasks;
        if t.pretrain == 0 {
            return bad("tasks.pretrain (|S1|) must be at least 1".into());
        }
        if t.finetune == 0 {
            return bad("tasks.finetune (|S2|) must be at least 1".into());
        }
        let ok = matches!(
            (self.family, t.variant),
            (_, Variant::InDistribution)
                | (Family::Burgers, Variant::HeterogeneousNu | Variant::Extrapolation)
                | (Family::Laplace, Variant::Ellipse)
        );
        if !ok {
            return bad(format!("variant {:?} does not apply to {:?}", t.variant, self.family));
        }
        if !(t.nu.is_finite() && t.nu > 0.0) {
            return bad(format!("tasks.nu must be positive, got {}", t.nu));
        }
        if !(t.eta_range[0].is_finite() && t.eta_range[1].is_finite() && t.eta_range[0] < t.eta_range[1]) {
            return bad(format!("tasks.eta_range must be an increasing pair, got {:?}", t.eta_range));
        }
        if self.eval.ode_points < 2 || self.eval.laplace_points == 0 || self.eval.burgers_stride == 0 {
            return bad("eval sizes must be positive (ode_points >= 2)".into());
        }
        self.train.validate()?;
        self.network.validate()?;
        self.family.check_network(&self.network)
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let inner = std::mem::take(b);
                *b = merge(inner, o);
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// The pre-training set S₁ and the fine-tuning set S₂.
#[derive(Debug, Clone)]
pub struct TaskSets {
    pub pretrain: Vec<ProblemInstance>,
    pub finetune: Vec<ProblemInstance>,
}

/// Draws S₁ from stream 0 and S₂ from stream 1 of `tasks.seed`, so S₂ does
/// not change when |S₁| does. For the ODE the `pretrain + finetune`
/// equidistant parameters are split by a seeded shuffle.
pub fn sample_tasks(cfg: &ExperimentConfig) -> Result<TaskSets> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    let t = &cfg.tasks;
    let mut r1 = stream_rng(t.seed, 0);
    let mut r2 = stream_rng(t.seed, 1);
    match cfg.family {
        Family::Ode => {
            let etas = equidistant(t.eta_range[0], t.eta_range[1], t.pretrain + t.finetune);
            let mut idx: Vec<usize> = (0..etas.len()).collect();
            idx.shuffle(&mut r2);
            let (held, kept) = idx.split_at(t.finetune);
            let mut kept = kept.to_vec();
            kept.sort_unstable();
            let build = |i: &usize| OdeProblem::new(etas[*i]).map(ProblemInstance::Ode);
            Ok(TaskSets {
                pretrain: kept.iter().map(build).collect::<Result<_>>()?,
                finetune: held.iter().map(build).collect::<Result<_>>()?,
            })
        }
        Family::Burgers => {
            let hetero = t.variant == Variant::HeterogeneousNu;
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, spec: &GrfSpec| -> Result<ProblemInstance> {
                let u0 = grf_sample(spec, rng);
                let nu = if hetero { 10f64.powf(rng.random_range(-3.0..-1.0)) } else { t.nu };
                Ok(ProblemInstance::Burgers(BurgersProblem::new(u0, nu, hetero)?))
            };
            let s1 = GrfSpec::burgers();
            let s2 = if t.variant == Variant::Extrapolation {
                GrfSpec::burgers_extrapolation()
            } else {
                GrfSpec::burgers()
            };
            Ok(TaskSets {
                pretrain: (0..t.pretrain).map(|_| draw(&mut r1, &s1)).collect::<Result<_>>()?,
                finetune: (0..t.finetune).map(|_| draw(&mut r2, &s2)).collect::<Result<_>>()?,
            })
        }
        Family::Laplace => {
            let spec = GrfSpec::laplace_circle();
            let polygon = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<ProblemInstance> {
                let d = LaplaceDomain::Polygon(polygon_sample(rng));
                Ok(ProblemInstance::Laplace(LaplaceProblem::new(d, grf_sample(&spec, rng))?))
            };
            let ellipse = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<ProblemInstance> {
                let d = LaplaceDomain::Ellipse(ellipse_sample(rng));
                Ok(ProblemInstance::Laplace(LaplaceProblem::new(d, grf_sample(&spec, rng))?))
            };
            let pretrain = (0..t.pretrain).map(|_| polygon(&mut r1)).collect::<Result<_>>()?;
            let finetune = if t.variant == Variant::Ellipse {
                (0..t.finetune).map(|_| ellipse(&mut r2)).collect::<Result<_>>()?
            } else {
                (0..t.finetune).map(|_| polygon(&mut r2)).collect::<Result<_>>()?
            };
            Ok(TaskSets { pretrain, finetune })
        }
    }
}

/// Solves the Burgers reference of every instance that lacks one.
pub fn solve_references(tasks: &mut [ProblemInstance], solver: &BurgersSolverConfig) -> Result<()> {
    for t in tasks {
        if let ProblemInstance::Burgers(p) = t {
            if p.reference.is_none() {
                p.solve_reference(solver)?;
            }
        }
    }
    Ok(())
}
