//! Python bindings. Series cross the boundary as `(times, values)` pairs of
//! plain lists; configs as JSON strings using the same keys as the TOML
//! config sections.

use std::ops::ControlFlow;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use setimpute_core::metrics::{self, TrajectoryConfig};
use setimpute_core::model::{encode_inputs, Model, ModelConfig};
use setimpute_core::schedule::{self, ScheduleMode, SchedulerConfig};
use setimpute_core::synth::{self, BilliardsConfig, MaskPolicy, SinusoidConfig};
use setimpute_core::train::{self, LevelCheckpoint, TrainConfig, TrainData};
use setimpute_core::{Error, SeriesSet, TimeCodecConfig};

create_exception!(setimpute, SetImputeError, PyException);

fn py_err(e: Error) -> PyErr {
    SetImputeError::new_err(format!("[{}] {}", e.kind(), e))
}

fn json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| SetImputeError::new_err(format!("[config] {e}"))),
    }
}

type Series = (Vec<f64>, Vec<Vec<f64>>);

fn to_set(s: &Series) -> PyResult<SeriesSet> {
    SeriesSet::from_observations(&s.0, &s.1).map_err(py_err)
}

fn from_set(s: &SeriesSet) -> Series {
    let pts = setimpute_core::to_sequence(s);
    (pts.iter().map(|p| p.time).collect(), pts.iter().map(|p| p.data.clone()).collect())
}

fn mode(name: &str) -> PyResult<ScheduleMode> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| SetImputeError::new_err(format!("[config] unknown schedule mode {name:?}")))
}

/// Sinusoidal time encoding.
#[pyclass(name = "TimeCodec", frozen)]
struct PyTimeCodec {
    inner: TimeCodecConfig,
}

#[pymethods]
impl PyTimeCodec {
    #[new]
    #[pyo3(signature = (tau = 8, nu = 100.0))]
    fn new(tau: usize, nu: f64) -> PyResult<Self> {
        Ok(PyTimeCodec {
            inner: TimeCodecConfig::new(tau, nu).map_err(py_err)?,
        })
    }

    fn encode(&self, t: f64) -> Vec<f64> {
        self.inner.encode(t)
    }

    fn shift_matrix(&self, delta_t: f64, k: usize) -> PyResult<[[f64; 2]; 2]> {
        self.inner.shift_matrix(delta_t, k).map_err(py_err)
    }
}

/// `(time, gap)` for every target.
#[pyfunction]
fn compute_gaps(observed_times: Vec<f64>, target_times: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    Ok(setimpute_core::GapTable::from_times(&observed_times, &target_times)
        .map_err(py_err)?
        .entries()
        .to_vec())
}

/// Imputation plan as `(level, target_times, model_id)` steps.
#[pyfunction]
#[pyo3(signature = (observed_times, target_times, max_level = 4, mode_name = "deterministic"))]
fn plan(
    observed_times: Vec<f64>,
    target_times: Vec<f64>,
    max_level: u32,
    mode_name: &str,
) -> PyResult<Vec<(u32, Vec<f64>, usize)>> {
    let cfg = SchedulerConfig {
        max_level,
        mode: mode(mode_name)?,
        ..SchedulerConfig::default()
    };
    let p = schedule::plan_for_times(&observed_times, &target_times, &cfg).map_err(py_err)?;
    Ok(p.steps.into_iter().map(|s| (s.level, s.target_times, s.model_id)).collect())
}

/// `(train, test)` lists of series; config keys as in `[data.billiards]`.
#[pyfunction]
#[pyo3(signature = (config_json = None))]
fn gen_billiards(config_json: Option<&str>) -> PyResult<(Vec<Series>, Vec<Series>)> {
    let cfg: BilliardsConfig = json(config_json)?;
    let (tr, te) = synth::gen_billiards(&cfg).map_err(py_err)?;
    Ok((tr.iter().map(from_set).collect(), te.iter().map(from_set).collect()))
}

#[pyfunction]
#[pyo3(signature = (config_json = None))]
fn gen_sinusoid(config_json: Option<&str>) -> PyResult<Vec<Series>> {
    let cfg: SinusoidConfig = json(config_json)?;
    Ok(synth::gen_sinusoid(&cfg).map_err(py_err)?.iter().map(from_set).collect())
}

/// Hides timestamps of a fully observed series: `(observed, target_times, truth)`.
#[pyfunction]
fn mask_timestamps(series: Series, min_hidden: usize, max_hidden: usize, seed: u64) -> PyResult<(Series, Vec<f64>, Vec<Vec<f64>>)> {
    let m = synth::mask_series(&to_set(&series)?, &MaskPolicy::Timestamps { min_hidden, max_hidden }, seed)
        .map_err(py_err)?;
    Ok((from_set(&m.observed), m.targets.times(), m.truth))
}

#[pyfunction]
fn mse(predictions: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::mse(&predictions, &truth).map_err(py_err)
}

/// Returns `(min_mse, avg_mse, ratio)`.
#[pyfunction]
fn stochastic_scores(samples: Vec<Vec<Vec<f64>>>, truth: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let s = metrics::stochastic_scores(&samples, &truth).map_err(py_err)?;
    Ok((s.min_mse, s.avg_mse, s.ratio))
}

/// Returns `(sinuosity, step_change, reflection_to_wall, avg_length)`.
#[pyfunction]
#[pyo3(signature = (points, side = 0.8828, turn_angle_deg = 15.0))]
fn trajectory_stats(points: Vec<[f64; 2]>, side: f64, turn_angle_deg: f64) -> PyResult<(f64, f64, f64, f64)> {
    let s = metrics::trajectory_stats(&points, &TrajectoryConfig { side, turn_angle_deg }).map_err(py_err)?;
    Ok((s.sinuosity, s.step_change, s.reflection_to_wall, s.avg_length))
}

#[pyfunction]
fn linear_interpolate(observed: Series, target_times: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    setimpute_core::baseline::linear_interpolate(&to_set(&observed)?, &target_times).map_err(py_err)
}

/// One attention model.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// `config_json` overrides the preset with a full model config.
    #[new]
    #[pyo3(signature = (data_dim, preset = "desk", seed = 0, stochastic_head = false, config_json = None))]
    fn new(data_dim: usize, preset: &str, seed: u64, stochastic_head: bool, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(t) => serde_json::from_str(t).map_err(|e| SetImputeError::new_err(format!("[config] {e}")))?,
            None => ModelConfig {
                stochastic_head,
                ..ModelConfig::preset(preset, data_dim).map_err(py_err)?
            },
        };
        Ok(PyModel {
            inner: Model::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.cfg).expect("config serializes")
    }

    /// One forward pass: `(mean, log_sigma or None)` rows for `target_times`.
    fn predict(&self, observed: Series, target_times: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
        let enc = encode_inputs(&to_set(&observed)?, &target_times, &self.inner.cfg).map_err(py_err)?;
        let r = self.inner.forward(&enc).map_err(py_err)?;
        Ok((r.mean.to_rows(), r.log_sigma.map(|t| t.to_rows())))
    }

    /// `(block, head, weights)` for every attention head.
    fn attention(&self, observed: Series, target_times: Vec<f64>) -> PyResult<Vec<(usize, usize, Vec<Vec<f64>>)>> {
        let enc = encode_inputs(&to_set(&observed)?, &target_times, &self.inner.cfg).map_err(py_err)?;
        let maps = self.inner.export_attention(&enc).map_err(py_err)?;
        Ok(maps.into_iter().map(|m| (m.block, m.head, m.weights.to_rows())).collect())
    }
}

/// Trained per-level models, indexed by level.
#[pyclass(name = "ModelBank", frozen)]
struct PyModelBank {
    models: Vec<Model>,
    sched: SchedulerConfig,
}

#[pymethods]
impl PyModelBank {
    /// Loads `level_<l>.ckpt` files from a run's checkpoint directory.
    #[staticmethod]
    #[pyo3(signature = (checkpoint_dir, scheduler_json = None))]
    fn load(checkpoint_dir: PathBuf, scheduler_json: Option<&str>) -> PyResult<Self> {
        let sched: SchedulerConfig = json(scheduler_json)?;
        let mut levels = train::training_levels(&sched);
        levels.sort_unstable();
        let models = levels
            .into_iter()
            .map(|l| {
                LevelCheckpoint::load(&checkpoint_dir.join(format!("level_{l}.ckpt")))
                    .map(|c| c.model)
                    .map_err(py_err)
            })
            .collect::<PyResult<_>>()?;
        Ok(PyModelBank { models, sched })
    }

    fn __len__(&self) -> usize {
        self.models.len()
    }

    /// Imputed values aligned with `target_times`, one list per trajectory.
    #[pyo3(signature = (observed, target_times, n_samples = 1, seed = 0))]
    fn impute(&self, observed: Series, target_times: Vec<f64>, n_samples: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let obs = to_set(&observed)?;
        let targets = SeriesSet::targets_at(obs.dim(), &target_times).map_err(py_err)?;
        let runs = train::impute(&obs, &targets, &self.models, &self.sched, n_samples, seed).map_err(py_err)?;
        Ok(runs.into_iter().map(|r| r.values).collect())
    }
}

/// Trains every level on fully observed series and returns the bank plus
/// the `(epoch, level, train_loss, val_loss, lr)` history.
#[pyfunction]
#[pyo3(signature = (series, model_json = None, train_json = None, scheduler_json = None, preset = "desk"))]
fn train_levels(
    py: Python<'_>,
    series: Vec<Series>,
    model_json: Option<&str>,
    train_json: Option<&str>,
    scheduler_json: Option<&str>,
    preset: &str,
) -> PyResult<(PyModelBank, Vec<(usize, u32, f64, f64, f64)>)> {
    let corpus = series.iter().map(to_set).collect::<PyResult<Vec<_>>>()?;
    let dim = corpus
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| SetImputeError::new_err("[config] no training series"))?;
    let tcfg: TrainConfig = json(train_json)?;
    let sched: SchedulerConfig = json(scheduler_json)?;
    let mcfg = match model_json {
        Some(t) => serde_json::from_str(t).map_err(|e| SetImputeError::new_err(format!("[config] {e}")))?,
        None => ModelConfig {
            partial_dims: sched.mode == ScheduleMode::PartialDims,
            ..ModelConfig::preset(preset, dim).map_err(py_err)?
        },
    };
    let data = TrainData::split(corpus, tcfg.val_fraction, tcfg.seed);
    let outcome = py
        .detach(|| train::train_all_levels(&data, &mcfg, &tcfg, &sched, vec![], &mut |_| ControlFlow::Continue(())))
        .map_err(py_err)?;
    let history = outcome
        .checkpoints
        .iter()
        .flat_map(|c| c.history.iter().map(|r| (r.epoch, r.level, r.train_loss, r.val_loss, r.lr)))
        .collect();
    Ok((
        PyModelBank {
            models: outcome.models(),
            sched,
        },
        history,
    ))
}

#[pymodule]
fn setimpute(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SetImputeError", m.py().get_type::<SetImputeError>())?;
    m.add_class::<PyTimeCodec>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyModelBank>()?;
    m.add_function(wrap_pyfunction!(compute_gaps, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(gen_billiards, m)?)?;
    m.add_function(wrap_pyfunction!(gen_sinusoid, m)?)?;
    m.add_function(wrap_pyfunction!(mask_timestamps, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(stochastic_scores, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_stats, m)?)?;
    m.add_function(wrap_pyfunction!(linear_interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(train_levels, m)?)?;
    Ok(())
}
