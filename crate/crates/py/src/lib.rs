use std::path::PathBuf;

use pyo3::exceptions::{PyFileExistsError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use talkstyle::config::{RunConfig, Stage};
use talkstyle::corpus::Corpus;
use talkstyle::diffusion::{NoiseSchedule, Region};
use talkstyle::motion::{savgol_smooth, MotionSequence};
use talkstyle::nn::Mat;
use talkstyle::workspace::Workspace;
use talkstyle::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(m) => PyValueError::new_err(m),
        Error::RefusedOverwrite(p) => PyFileExistsError::new_err(format!("refusing to overwrite {}", p.display())),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Mat> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "{what} must be a nonempty rectangular list of rows"
        )));
    }
    Ok(Mat::from_rows(&rows))
}

fn json_to_py(py: Python<'_>, v: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    serde_json::from_value(serde_json::Value::String(name.to_ascii_lowercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown stage {name:?}")))
}

/// Run configuration. Missing keys take their defaults.
#[pyclass(name = "RunConfig", module = "pytalkstyle", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => RunConfig::from_json_str(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner.to_json()).expect("config serializes")
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn stage_hash(&self, stage: &str) -> PyResult<String> {
        Ok(self.inner.stage_hash(parse_stage(stage)?))
    }

    #[getter]
    fn output_root(&self) -> PathBuf {
        self.inner.output_root.clone()
    }

    #[setter]
    fn set_output_root(&mut self, root: PathBuf) {
        self.inner.output_root = root;
    }
}

/// A facial motion sequence: expression and pose per frame plus a static shape.
#[pyclass(name = "MotionSequence", module = "pytalkstyle", from_py_object)]
#[derive(Clone)]
struct PyMotionSequence {
    inner: MotionSequence,
}

#[pymethods]
impl PyMotionSequence {
    #[new]
    #[pyo3(signature = (expression, pose, shape, fps=25))]
    fn new(expression: Vec<Vec<f64>>, pose: Vec<Vec<f64>>, shape: Vec<f64>, fps: u32) -> PyResult<Self> {
        let e = from_rows(expression, "expression")?;
        let p = from_rows(pose, "pose")?;
        Ok(Self {
            inner: MotionSequence::new(shape, e, p, fps).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MotionSequence::read_dir(&dir).map_err(to_py)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write_dir(&dir).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn expression(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.expression)
    }

    #[getter]
    fn pose(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.pose)
    }

    #[getter]
    fn shape(&self) -> Vec<f64> {
        self.inner.shape.clone()
    }

    #[getter]
    fn fps(&self) -> u32 {
        self.inner.fps
    }

    /// Savitzky-Golay smoothing of expression and pose along time.
    #[pyo3(signature = (window=5, polyorder=2))]
    fn smooth(&self, window: usize, polyorder: usize) -> PyResult<Self> {
        Ok(Self {
            inner: savgol_smooth(&self.inner, window, polyorder).map_err(to_py)?.sequence,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "MotionSequence(frames={}, expr_dim={}, pose_dim={}, fps={})",
            self.inner.len(),
            self.inner.expr_dim(),
            self.inner.pose_dim(),
            self.inner.fps
        )
    }
}

/// The synthetic corpus, generated in memory.
#[pyclass(name = "Corpus", module = "pytalkstyle")]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<PyRunConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self {
            inner: Corpus::generate(&cfg.corpus).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Corpus::load(&dir).map_err(to_py)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map(|_| ()).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.clips.len()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// `(speaker, content, split, motion, audio_rows)` for clip `i`.
    fn clip(&self, i: usize) -> PyResult<(usize, usize, String, PyMotionSequence, Vec<Vec<f64>>)> {
        let c = self
            .inner
            .clips
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("clip {i} out of range")))?;
        let split = serde_json::to_value(c.split).expect("split serializes");
        Ok((
            c.speaker,
            c.content,
            split.as_str().unwrap_or_default().to_string(),
            PyMotionSequence {
                inner: c.motion.clone(),
            },
            to_rows(&c.audio.features),
        ))
    }
}

/// Artifact directory driver, mirroring the command line.
#[pyclass(name = "Workspace", module = "pytalkstyle")]
struct PyWorkspace {
    inner: Workspace,
}

#[pymethods]
impl PyWorkspace {
    #[new]
    #[pyo3(signature = (config=None, force=false, allow_mismatch=false))]
    fn new(config: Option<PyRunConfig>, force: bool, allow_mismatch: bool) -> Self {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Self {
            inner: Workspace {
                force,
                allow_mismatch,
                ..Workspace::new(cfg)
            },
        }
    }

    fn synth_data(&self, py: Python<'_>) -> PyResult<PathBuf> {
        py.detach(|| self.inner.synth_data()).map_err(to_py)
    }

    #[pyo3(signature = (stage, resume=false))]
    fn train(&self, py: Python<'_>, stage: &str, resume: bool) -> PyResult<PathBuf> {
        let stage = parse_stage(stage)?;
        py.detach(|| self.inner.train(stage, resume)).map_err(to_py)
    }

    /// Samples motion into `out`; returns the sequence and the mean dominance per region.
    #[pyo3(signature = (audio, style_ref, out, steps=None, seed=0, plot=false))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        py: Python<'_>,
        audio: PathBuf,
        style_ref: PathBuf,
        out: PathBuf,
        steps: Option<usize>,
        seed: u64,
        plot: bool,
    ) -> PyResult<(PyMotionSequence, f64, f64)> {
        let (seq, tel) = py
            .detach(|| self.inner.generate(&audio, &style_ref, &out, steps, seed, plot))
            .map_err(to_py)?;
        Ok((
            PyMotionSequence { inner: seq },
            tel.mean_d(Region::Upper),
            tel.mean_d(Region::Lower),
        ))
    }

    /// Evaluation report as a dict.
    #[pyo3(signature = (identity=false))]
    fn eval(&self, py: Python<'_>, identity: bool) -> PyResult<Py<PyAny>> {
        let (_, report) = py.detach(|| self.inner.eval(identity)).map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Ablation table as a dict.
    #[pyo3(signature = (seeds=None))]
    fn ablate(&self, py: Python<'_>, seeds: Option<Vec<u64>>) -> PyResult<Py<PyAny>> {
        let (_, table) = py.detach(|| self.inner.ablate(seeds)).map_err(to_py)?;
        json_to_py(py, &table)
    }
}

/// Biased HSIC with median-heuristic Gaussian kernels.
#[pyfunction]
fn hsic(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    talkstyle::style::hsic_value(&from_rows(x, "x")?, &from_rows(y, "y")?).map_err(to_py)
}

/// Mean off-diagonal cosine of each row against the others.
#[pyfunction]
fn redundancy_scores(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    talkstyle::semantic::redundancy_scores(&from_rows(rows, "rows")?).map_err(to_py)
}

/// Structural alignment loss between motion and audio embeddings, without banks.
#[pyfunction]
fn structural_loss(v: Vec<Vec<f64>>, a: Vec<Vec<f64>>) -> PyResult<f64> {
    talkstyle::semantic::structural_loss_value(&from_rows(v, "v")?, &from_rows(a, "a")?, None).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (style, semantic, lambda_orth=1.0, lambda_hsic=0.5))]
fn decouple_loss(style: Vec<Vec<f64>>, semantic: Vec<Vec<f64>>, lambda_orth: f64, lambda_hsic: f64) -> PyResult<f64> {
    talkstyle::style::decouple_value(
        &from_rows(style, "style")?,
        &from_rows(semantic, "semantic")?,
        lambda_orth,
        lambda_hsic,
    )
    .map_err(to_py)
}

/// Audio dominance `sigmoid(p_a - p_s)`.
#[pyfunction]
fn dominance(p_a: f64, p_s: f64) -> f64 {
    talkstyle::diffusion::dominance(p_a, p_s)
}

/// Cumulative products `alpha_bar(1..=t_steps)` of a linear beta schedule.
#[pyfunction]
#[pyo3(signature = (t_steps=200, beta_start=1e-4, beta_end=0.02))]
fn alpha_bars(t_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Vec<f64>> {
    let s = NoiseSchedule::linear(t_steps, beta_start, beta_end).map_err(to_py)?;
    Ok((1..=t_steps).map(|t| s.alpha_bar(t)).collect())
}

#[pymodule]
fn pytalkstyle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyMotionSequence>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyWorkspace>()?;
    m.add_function(wrap_pyfunction!(hsic, m)?)?;
    m.add_function(wrap_pyfunction!(redundancy_scores, m)?)?;
    m.add_function(wrap_pyfunction!(structural_loss, m)?)?;
    m.add_function(wrap_pyfunction!(decouple_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dominance, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    Ok(())
}
