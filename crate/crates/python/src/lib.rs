//! Python bindings: configs, pre-training, fine-tuning and checkpoints.

use std::path::PathBuf;

use madrom::cli::{eval_data, finetune_tasks};
use madrom::config::{sample_tasks, ExperimentConfig};
use madrom::eval::iterations_to_threshold;
use madrom::network::batch::evaluate;
use madrom::persist;
use madrom::training::{finetune, pretrain, FinetuneMode, PretrainedModel};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: madrom::Error) -> PyErr {
    match e {
        madrom::Error::InvalidConfig(_) | madrom::Error::Shape(_) => PyValueError::new_err(e.to_string()),
        madrom::Error::Io(_) | madrom::Error::Persist(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// An experiment configuration parsed from TOML.
#[pyclass(name = "Experiment", skip_from_py_object)]
#[derive(Clone)]
struct PyExperiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { cfg: ExperimentConfig::from_toml_str(toml).map_err(err)? })
    }

    #[getter]
    fn family(&self) -> String {
        format!("{:?}", self.cfg.family).to_lowercase()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.cfg.to_toml_string().map_err(err)
    }

    /// Pre-trains on S1 and returns the model with its per-iteration losses.
    fn pretrain(&self, py: Python<'_>) -> PyResult<(PyModel, Vec<f64>)> {
        let cfg = self.cfg.clone();
        let (model, trace) = py
            .detach(move || -> madrom::Result<_> {
                let tasks = sample_tasks(&cfg)?;
                pretrain(&cfg.train, &cfg.network, &tasks.pretrain)
            })
            .map_err(err)?;
        let losses = trace.rows.iter().map(|r| r.loss).collect();
        Ok((PyModel { model }, losses))
    }

    /// Fine-tunes on every S2 task; returns (final relative L2, iterations to tau) per task.
    #[pyo3(signature = (model, mode, tau = 0.1))]
    fn finetune(&self, py: Python<'_>, model: &PyModel, mode: &str, tau: f64) -> PyResult<Vec<(f64, Option<usize>)>> {
        let mode: FinetuneMode = mode.parse().map_err(err)?;
        let cfg = self.cfg.clone();
        let m = model.model.clone();
        py.detach(move || -> madrom::Result<_> {
            let s2 = finetune_tasks(&cfg)?;
            let mut out = Vec::with_capacity(s2.len());
            for (i, inst) in s2.iter().enumerate() {
                let ev = eval_data(&cfg, i, inst)?;
                let ft = finetune(&cfg.train, &m, inst, mode, Some(&ev))?;
                let last = ft.trace.final_relative_l2().unwrap_or(f64::NAN);
                out.push((last, iterations_to_threshold(&ft.trace, tau)));
            }
            Ok(out)
        })
        .map_err(err)
    }
}

/// A pre-trained decoder and its latent bank.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    model: PretrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { model: persist::load_model(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        persist::save_model(&self.model, &path).map_err(err)
    }

    #[getter]
    fn family(&self) -> String {
        format!("{:?}", self.model.family).to_lowercase()
    }

    #[getter]
    fn latents(&self) -> Vec<Vec<f64>> {
        self.model.bank.latents.clone()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.weights.num_params()
    }

    fn weights_digest(&self) -> String {
        self.model.weights.digest_hex()
    }

    /// Decoder output at `points` (a list of coordinate tuples) for latent `z`.
    fn evaluate(&self, points: Vec<Vec<f64>>, z: Vec<f64>) -> PyResult<Vec<f64>> {
        let d = self.model.weights.config.spatial_dim;
        if points.iter().any(|p| p.len() != d) {
            return Err(PyValueError::new_err(format!("points must have {d} coordinates")));
        }
        let flat: Vec<f64> = points.into_iter().flatten().collect();
        evaluate(&self.model.weights, &flat, &z).map_err(err)
    }
}

#[pyfunction]
fn relative_l2(pred: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    madrom::eval::relative_l2(&pred, &reference).map_err(err)
}

#[pymodule]
fn madrom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(relative_l2, m)?)?;
    Ok(())
}
