//! PDE families: parameter sampling, residual and boundary operators,
//! descriptors and reference solutions.

pub mod burgers;
pub mod grf;
pub mod laplace;
pub mod ode;

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Jet2, NodeId};
use crate::network::batch::LaneLayout;
use crate::network::{NetworkConfig, PeriodicEmbedding};
use crate::{Error, Result};

pub use burgers::{burgers_reference, BurgersProblem, BurgersSolverConfig, SpaceTimeField};
pub use grf::{grf_sample, FourierSeries, GrfDomain, GrfSpec};
pub use laplace::{
    disk_harmonic_extension, ellipse_sample, polygon_sample, ConvexPolygon, Ellipse, LaplaceDomain, LaplaceProblem,
};
pub use ode::OdeProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Ode,
    Burgers,
    Laplace,
}

impl Family {
    pub fn spatial_dim(self) -> usize {
        match self {
            Family::Ode => 1,
            Family::Burgers | Family::Laplace => 2,
        }
    }

    /// Periodic embedding the family's networks use, if any.
    pub fn periodic_embedding(self) -> Option<PeriodicEmbedding> {
        match self {
            Family::Burgers => Some(PeriodicEmbedding {
                coordinate: 0,
                period: 1.0,
            }),
            _ => None,
        }
    }

    /// Lanes needed at interior points.
    pub fn lane_layout(self) -> LaneLayout {
        match self {
            Family::Ode => LaneLayout::first_order(1),
            Family::Burgers => LaneLayout::with_second(vec![true, false]),
            Family::Laplace => LaneLayout::full(2),
        }
    }

    /// Whether `config` fits this family's coordinates.
    pub fn check_network(self, config: &NetworkConfig) -> Result<()> {
        if config.spatial_dim != self.spatial_dim() || config.output_dim != 1 {
            return Err(Error::InvalidConfig(format!(
                "{self:?} needs spatial_dim {} and output_dim 1, got {} and {}",
                self.spatial_dim(),
                config.spatial_dim,
                config.output_dim
            )));
        }
        if config.periodic_embedding != self.periodic_embedding() {
            return Err(Error::InvalidConfig(format!("{self:?} needs periodic embedding {:?}", self.periodic_embedding())));
        }
        Ok(())
    }
}

/// One member of a PDE family.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemInstance {
    Ode(OdeProblem),
    Burgers(BurgersProblem),
    Laplace(LaplaceProblem),
}

impl ProblemInstance {
    pub fn family(&self) -> Family {
        match self {
            ProblemInstance::Ode(_) => Family::Ode,
            ProblemInstance::Burgers(_) => Family::Burgers,
            ProblemInstance::Laplace(_) => Family::Laplace,
        }
    }

    pub fn spatial_dim(&self) -> usize {
        self.family().spatial_dim()
    }

    /// Vector used for nearest-neighbor latent initialization; `None` for
    /// heterogeneous families.
    pub fn descriptor(&self) -> Option<Vec<f64>> {
        match self {
            ProblemInstance::Ode(p) => Some(vec![p.eta]),
            ProblemInstance::Burgers(p) => Some(p.descriptor()),
            ProblemInstance::Laplace(_) => None,
        }
    }

    /// Residual components at an interior point from the solution's jets.
    pub fn residual(&self, g: &mut Graph, u: &[Jet2], x: &[f64]) -> Result<Vec<NodeId>> {
        self.check_point(x)?;
        let u = u.first().ok_or_else(|| Error::Shape("residual needs one output".into()))?;
        Ok(vec![match self {
            ProblemInstance::Ode(p) => p.residual(g, u, x),
            ProblemInstance::Burgers(p) => p.residual(g, u),
            ProblemInstance::Laplace(p) => p.residual(g, u),
        }])
    }

    /// Boundary mismatch components at a boundary point.
    pub fn boundary(&self, g: &mut Graph, u: &[NodeId], x: &[f64]) -> Result<Vec<NodeId>> {
        self.check_point(x)?;
        let u = *u.first().ok_or_else(|| Error::Shape("boundary needs one output".into()))?;
        Ok(vec![match self {
            ProblemInstance::Ode(p) => p.boundary(g, u, x),
            ProblemInstance::Burgers(p) => p.boundary(g, u, x),
            ProblemInstance::Laplace(p) => p.boundary(g, u, x),
        }])
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spatial_dim() {
            return Err(Error::Shape(format!("point has {} coordinates, expected {}", x.len(), self.spatial_dim())));
        }
        Ok(())
    }

    /// `m` interior points, flat row-major.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        match self {
            ProblemInstance::Ode(_) => (0..m).map(|_| rng.random_range(ode::DOMAIN.0..ode::DOMAIN.1)).collect(),
            ProblemInstance::Burgers(_) => {
                let mut out = Vec::with_capacity(2 * m);
                for _ in 0..m {
                    out.push(rng.random_range(0.0..1.0));
                    // t in (0, 1]
                    out.push(1.0 - rng.random_range(0.0..1.0));
                }
                out
            }
            ProblemInstance::Laplace(p) => p.sample_interior(rng, m),
        }
    }

    /// Boundary points, flat row-major. The ODE family always returns its two
    /// endpoints.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        match self {
            ProblemInstance::Ode(_) => vec![ode::DOMAIN.0, ode::DOMAIN.1],
            ProblemInstance::Burgers(_) => {
                let mut out = Vec::with_capacity(2 * m);
                for _ in 0..m {
                    out.push(rng.random_range(0.0..1.0));
                    out.push(0.0);
                }
                out
            }
            ProblemInstance::Laplace(p) => p.sample_boundary(rng, m),
        }
    }

    /// Exact or high-fidelity solution value at `x`.
    pub fn reference(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        match self {
            ProblemInstance::Ode(p) => Ok(p.exact(x[0])),
            ProblemInstance::Burgers(p) => match &p.reference {
                Some(f) => Ok(f.interpolate(x[0], x[1])),
                None => Err(Error::Solver("Burgers reference has not been solved".into())),
            },
            ProblemInstance::Laplace(p) => Ok(p.exact([x[0], x[1]])),
        }
    }

    /// Jets of the analytic solution, for families that have one.
    pub fn reference_jets(&self, g: &mut Graph, coords: &[Jet2]) -> Option<Result<Jet2>> {
        match self {
            ProblemInstance::Ode(p) => Some(p.exact_jets(g, coords)),
            ProblemInstance::Burgers(_) => None,
            ProblemInstance::Laplace(p) => Some(laplace::harmonic_jets(g, &p.h, coords)),
        }
    }

    /// Evaluation points and reference values. ODE: 512 uniform points;
    /// Burgers: the reference mesh, every `stride`-th point in x and t;
    /// Laplace: `laplace_points` interior samples drawn from `rng`.
    pub fn eval_set<R: Rng + ?Sized>(&self, rng: &mut R, spec: &EvalGrid) -> Result<(Vec<f64>, Vec<f64>)> {
        let pts = match self {
            ProblemInstance::Ode(_) => {
                let n = spec.ode_points;
                (0..n)
                    .map(|i| ode::DOMAIN.0 + TAU * i as f64 / (n - 1).max(1) as f64)
                    .collect()
            }
            ProblemInstance::Burgers(p) => {
                let f = p
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::Solver("Burgers reference has not been solved".into()))?;
                let s = spec.burgers_stride.max(1);
                let mut pts = Vec::new();
                let mut vals = Vec::new();
                for i in (0..f.nt).step_by(s) {
                    let row = f.slice(i);
                    for j in (0..f.nx).step_by(s) {
                        pts.push(f.x(j));
                        pts.push(f.time(i));
                        vals.push(row[j]);
                    }
                }
                return Ok((pts, vals));
            }
            ProblemInstance::Laplace(p) => p.sample_interior(rng, spec.laplace_points),
        };
        let d = self.spatial_dim();
        let vals = pts.chunks(d).map(|x| self.reference(x)).collect::<Result<Vec<_>>>()?;
        Ok((pts, vals))
    }
}

/// Serializable parameters of an instance; the Burgers reference field is
/// recomputed on demand rather than stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum InstanceSpec {
    Ode { eta: f64 },
    Burgers { u0: FourierSeries, nu: f64, heterogeneous: bool },
    Laplace { domain: LaplaceDomain, h: FourierSeries },
}

impl InstanceSpec {
    pub fn build(&self) -> Result<ProblemInstance> {
        Ok(match self {
            InstanceSpec::Ode { eta } => ProblemInstance::Ode(OdeProblem::new(*eta)?),
            InstanceSpec::Burgers { u0, nu, heterogeneous } => {
                ProblemInstance::Burgers(BurgersProblem::new(u0.clone(), *nu, *heterogeneous)?)
            }
            InstanceSpec::Laplace { domain, h } => ProblemInstance::Laplace(LaplaceProblem::new(domain.clone(), h.clone())?),
        })
    }

    pub fn family(&self) -> Family {
        match self {
            InstanceSpec::Ode { .. } => Family::Ode,
            InstanceSpec::Burgers { .. } => Family::Burgers,
            InstanceSpec::Laplace { .. } => Family::Laplace,
        }
    }
}

impl ProblemInstance {
    pub fn spec(&self) -> InstanceSpec {
        match self {
            ProblemInstance::Ode(p) => InstanceSpec::Ode { eta: p.eta },
            ProblemInstance::Burgers(p) => InstanceSpec::Burgers {
                u0: p.u0.clone(),
                nu: p.nu,
                heterogeneous: p.heterogeneous,
            },
            ProblemInstance::Laplace(p) => InstanceSpec::Laplace {
                domain: p.domain.clone(),
                h: p.h.clone(),
            },
        }
    }
}

/// Sizes of the evaluation point sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalGrid {
    pub ode_points: usize,
    pub burgers_stride: usize,
    pub laplace_points: usize,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            ode_points: 512,
            burgers_stride: 1,
            laplace_points: 16 * 1024,
        }
    }
}
