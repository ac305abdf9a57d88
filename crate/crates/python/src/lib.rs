//! Python bindings. Structured values (observations, scenes, reports)
//! cross the boundary as JSON strings; rectangles as 6-tuples
//! `(x, y, theta, w, h, quality)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use taskgrasp::cli::{self, SceneFile, SynthArgs, TRAIN_FILE};
use taskgrasp::data::{load_triplets, SplitMode, DEFAULT_TRAIN_FRACTION};
use taskgrasp::geometry::{self, DEFAULT_NMS_THRESHOLD};
use taskgrasp::infer::PredictOptions;
use taskgrasp::learn::TrainConfig;
use taskgrasp::model::{EmbeddingModel, Observation};
use taskgrasp::{Error, GraspRect};

type Rect = (f64, f64, f64, f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rect(r: Rect) -> PyResult<GraspRect> {
    GraspRect::new(r.0, r.1, r.2, r.3, r.4, r.5).map_err(py_err)
}

fn observation(json: Option<&str>, feature_len: usize) -> PyResult<Observation> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(json_err),
        None => Ok(Observation::null(feature_len)),
    }
}

/// Exact intersection over union of two rotated rectangles.
#[pyfunction]
fn jaccard(a: Rect, b: Rect) -> PyResult<f64> {
    geometry::jaccard(&rect(a)?, &rect(b)?).map_err(py_err)
}

/// Indices kept by greedy non-maximum suppression, best quality first.
#[pyfunction]
#[pyo3(signature = (rects, threshold = DEFAULT_NMS_THRESHOLD))]
fn nms(rects: Vec<Rect>, threshold: f64) -> PyResult<Vec<usize>> {
    let rects = rects.into_iter().map(rect).collect::<PyResult<Vec<_>>>()?;
    geometry::nms_indices(&rects, threshold).map_err(py_err)
}

/// Writes a synthetic dataset directory and returns its manifest as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, spec = None, seed = None, object_wise = false, fraction = DEFAULT_TRAIN_FRACTION))]
fn synthesize(
    out_dir: PathBuf,
    spec: Option<PathBuf>,
    seed: Option<u64>,
    object_wise: bool,
    fraction: f64,
) -> PyResult<String> {
    let args = SynthArgs {
        spec,
        out: out_dir,
        seed,
        mode: if object_wise { SplitMode::ObjectWise } else { SplitMode::ImageWise },
        fraction,
    };
    let outcome = cli::cmd_synth(&args).map_err(py_err)?;
    serde_json::to_string(&outcome.manifest).map_err(json_err)
}

/// A trained or loaded embedding model.
#[pyclass(name = "Model", module = "taskgrasp_py")]
struct PyModel {
    inner: EmbeddingModel,
}

#[pymethods]
impl PyModel {
    /// Trains on a triplet file or a dataset directory's training split.
    /// `config` is a JSON object; omitted fields take their defaults.
    #[staticmethod]
    #[pyo3(signature = (data, config = None, epochs = None, seed = None))]
    fn train(data: PathBuf, config: Option<&str>, epochs: Option<usize>, seed: Option<u64>) -> PyResult<Self> {
        let mut config: TrainConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(json_err)?,
            None => TrainConfig::default(),
        };
        if let Some(e) = epochs {
            config.epochs = e;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        let path = if data.is_dir() { data.join(TRAIN_FILE) } else { data };
        let set = load_triplets(&path).map_err(py_err)?;
        let outcome = taskgrasp::train(&set, &config).map_err(py_err)?;
        Ok(PyModel { inner: outcome.model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: EmbeddingModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn actions(&self) -> Vec<String> {
        self.inner.header().action_names.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_head(&self, observation: &str) -> PyResult<Vec<f64>> {
        let o = observation_from(observation)?;
        self.inner.encode_head(&o).map_err(py_err)
    }

    /// Target embedding; `None` embeds the null target.
    #[pyo3(signature = (observation = None))]
    fn embed_tail(&self, observation: Option<&str>) -> PyResult<Vec<f64>> {
        let o = observation_or_null(&self.inner, observation)?;
        self.inner.encode_tail(&o).map_err(py_err)
    }

    fn embed_relation(&self, action: &str) -> PyResult<Vec<f64>> {
        let a = self.action(action)?;
        self.inner.encode_relation(&a).map_err(py_err)
    }

    /// Translational distance of one triplet; lower is more suitable.
    #[pyo3(signature = (head, action, target = None))]
    fn distance(&self, head: &str, action: &str, target: Option<&str>) -> PyResult<f64> {
        let h = self.embed_head(head)?;
        let r = self.embed_relation(action)?;
        let t = self.embed_tail(target)?;
        taskgrasp::score(&h, &r, &t).map_err(py_err)
    }

    /// Ranks a scene's candidates (`{"candidates": [...]}`) and returns the
    /// prediction as JSON.
    #[pyo3(signature = (scene, action, target = None, alpha = 0.5, nms_threshold = DEFAULT_NMS_THRESHOLD))]
    fn predict(
        &self,
        scene: &str,
        action: &str,
        target: Option<&str>,
        alpha: f64,
        nms_threshold: f64,
    ) -> PyResult<String> {
        let scene: SceneFile = serde_json::from_str(scene).map_err(json_err)?;
        let action = self.action(action)?;
        let target = observation_or_null(&self.inner, target)?;
        let options = PredictOptions {
            alpha,
            nms_threshold,
            ..PredictOptions::default()
        };
        let prediction = taskgrasp::predict_grasp(&self.inner, &scene.candidates, &action, &target, &options)
            .map_err(py_err)?;
        serde_json::to_string(&prediction).map_err(json_err)
    }

    /// Metrics report (JSON) on a dataset directory's test split.
    #[pyo3(signature = (data_dir, target_blind = false))]
    fn evaluate(&self, data_dir: PathBuf, target_blind: bool) -> PyResult<String> {
        let split = cli::load_split(&data_dir).map_err(py_err)?;
        let config = taskgrasp::EvalConfig {
            target_blind,
            ..taskgrasp::EvalConfig::default()
        };
        let report = taskgrasp::evaluate(&self.inner, &split, &config).map_err(py_err)?;
        report.to_json().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let h = self.inner.header();
        format!(
            "Model(feature_len={}, hidden={}, dim={}, actions={:?})",
            h.feature_len, h.hidden, h.dim, h.action_names
        )
    }
}

impl PyModel {
    fn action(&self, name: &str) -> PyResult<taskgrasp::ActionId> {
        self.inner.action_by_name(name).ok_or_else(|| {
            PyValueError::new_err(format!(
                "unknown action '{name}'; known actions: {}",
                self.inner.header().action_names.join(", ")
            ))
        })
    }
}

fn observation_from(json: &str) -> PyResult<Observation> {
    serde_json::from_str(json).map_err(json_err)
}

fn observation_or_null(model: &EmbeddingModel, json: Option<&str>) -> PyResult<Observation> {
    observation(json, model.header().feature_len)
}

#[pymodule]
fn taskgrasp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
