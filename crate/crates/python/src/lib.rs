//! Python module `pgat_py`: loss oracles, scene generation, models and a
//! training entry point.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use pgat::autodiff::Precision;
use pgat::dataset::{build_dataset, DatasetPlan};
use pgat::eval::{dice_score, evaluate_model_by_tier};
use pgat::losses::{self, ConsNorm, ConsistencyKind};
use pgat::model::{self as core_model, ModelConfig};
use pgat::synth::{self, DomainShiftSpec, Mask, SceneSpec};
use pgat::text::{self, Task, TemplateBank, TextEncoder};
use pgat::trainer::{train_on, TrainConfig, TrainOptions};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(value_err)
}

/// Returns `(q, q_tilde)` for per-prompt segmentation losses.
#[pyfunction]
fn prompt_quality(losses: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    losses::prompt_quality(&losses).map_err(value_err)
}

#[pyfunction]
fn quality_weights(losses: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    losses::quality_weights(&losses, tau).map_err(value_err)
}

#[pyfunction]
fn group_loss(q_tilde: Vec<f64>, w: Vec<f64>) -> PyResult<f64> {
    losses::group_loss(&q_tilde, &w).map_err(value_err)
}

/// Consistency over flattened logits; the first entry is the reference.
#[pyfunction]
#[pyo3(signature = (logits, norm = "mean-per-pixel", kind = "stop-grad-reference"))]
fn consistency(logits: Vec<Vec<f64>>, norm: &str, kind: &str) -> PyResult<f64> {
    let norm: ConsNorm = parse(norm)?;
    let kind: ConsistencyKind = parse(kind)?;
    Ok(losses::consistency_value(&logits, norm, kind))
}

/// Dice of two flattened binary masks.
#[pyfunction]
fn dice(pred: Vec<u8>, target: Vec<u8>) -> PyResult<f64> {
    let m = |bits: Vec<u8>| Mask {
        height: 1,
        width: bits.len(),
        bits,
    };
    dice_score(&m(pred), &m(target)).map_err(value_err)
}

#[pyfunction]
fn encode_prompt(text: &str) -> PyResult<Vec<f64>> {
    text::encode_prompt(text).map_err(value_err)
}

/// Worst relative error over `trials` random graphs.
#[pyfunction]
#[pyo3(signature = (trials = 100, seed = 0, precision = "f64"))]
fn grad_check_trials(trials: usize, seed: u64, precision: &str) -> PyResult<f64> {
    let p: Precision = parse(precision)?;
    let checks = pgat::checks::run_trials(trials, seed, p).map_err(value_err)?;
    Ok(checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max))
}

/// A generated scene: gray image in `[0, 1]` plus target masks.
#[pyclass(module = "pgat_py", frozen)]
struct Scene {
    inner: synth::Scene,
}

#[pymethods]
impl Scene {
    #[new]
    #[pyo3(signature = (size = 64, seed = 0, shift = None))]
    fn new(size: usize, seed: u64, shift: Option<&str>) -> PyResult<Self> {
        let mut spec = SceneSpec::with_size(size).with_seed(seed);
        if let Some(name) = shift {
            let s = DomainShiftSpec::preset(name).map_err(value_err)?;
            spec = synth::apply_shift(&spec, &s).map_err(value_err)?;
        }
        let inner = synth::generate_scene(&spec, format!("scene-{seed}")).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn num_instances(&self) -> usize {
        self.inner.instances.len()
    }

    fn image(&self) -> Vec<f64> {
        self.inner.image_f64()
    }

    /// Target for `task` ("T1" or "T2") and, for T2, a class id.
    #[pyo3(signature = (task, class_id = None))]
    fn target(&self, task: &str, class_id: Option<usize>) -> PyResult<Vec<u8>> {
        let task: Task = parse(task)?;
        Ok(synth::target_mask(&self.inner, task, class_id).map_err(value_err)?.bits)
    }
}

#[pyclass(module = "pgat_py", frozen)]
struct Model {
    inner: core_model::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (size = 64, channels = 16, seed = 0))]
    fn new(size: usize, channels: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            channels,
            init_seed: seed,
            ..ModelConfig::with_size(size)
        };
        Ok(Self {
            inner: core_model::Model::new(cfg).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = core_model::load_checkpoint(path.as_ref(), None).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        core_model::save_checkpoint(path.as_ref(), &self.inner).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    /// Aggregated logits for each prompt on one image.
    fn logits(&self, image: Vec<f64>, prompts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let preds = self
            .inner
            .predict_group(&image, &prompts, &TextEncoder::new())
            .map_err(value_err)?;
        Ok(preds.into_iter().map(|p| p.aggregated_logits).collect())
    }

    #[pyo3(signature = (image, prompt, threshold = 0.5))]
    fn segment(&self, image: Vec<f64>, prompt: &str, threshold: f64) -> PyResult<Vec<u8>> {
        let m = self
            .inner
            .segment(&image, prompt, &TextEncoder::new(), threshold)
            .map_err(value_err)?;
        Ok(m.bits)
    }
}

/// Trains on a freshly generated dataset. `config_json` is a full training
/// config; the default config is used when it is absent. Returns the model
/// and the training summary as JSON.
#[pyfunction]
#[pyo3(signature = (scenes, config_json = None, data_seed = 0))]
fn train(py: Python<'_>, scenes: usize, config_json: Option<&str>, data_seed: u64) -> PyResult<(Model, String)> {
    let cfg: TrainConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => TrainConfig::default(),
    };
    let plan = DatasetPlan {
        n_scenes: scenes,
        spec: SceneSpec::with_size(cfg.model.height),
        shift: None,
        seed: data_seed,
        k: cfg.k,
    };
    let out = py
        .detach(|| {
            let ds = build_dataset(&plan, &TemplateBank::default()).map_err(|e| e.to_string())?;
            train_on(&cfg, &ds, TrainOptions::default()).map_err(|e| e.to_string())
        })
        .map_err(PyValueError::new_err)?;
    let summary = serde_json::to_string(&out.summary).expect("summary serializes");
    Ok((Model { inner: out.model }, summary))
}

/// Per-tier evaluation on a generated dataset; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (model, scenes, data_seed = 1, shift = None, workers = 1))]
fn evaluate(model: &Model, scenes: usize, data_seed: u64, shift: Option<&str>, workers: usize) -> PyResult<String> {
    let plan = DatasetPlan {
        n_scenes: scenes,
        spec: SceneSpec::with_size(model.inner.config.height),
        shift: shift.map(DomainShiftSpec::preset).transpose().map_err(value_err)?,
        seed: data_seed,
        k: 3,
    };
    let ds = build_dataset(&plan, &TemplateBank::default()).map_err(value_err)?;
    let rep = evaluate_model_by_tier(&model.inner, &ds, workers).map_err(value_err)?;
    Ok(serde_json::to_string(&rep).expect("report serializes"))
}

#[pymodule]
fn pgat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(prompt_quality, m)?)?;
    m.add_function(wrap_pyfunction!(quality_weights, m)?)?;
    m.add_function(wrap_pyfunction!(group_loss, m)?)?;
    m.add_function(wrap_pyfunction!(consistency, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(encode_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_trials, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
