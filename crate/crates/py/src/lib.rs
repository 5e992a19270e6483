//! Python bindings: configuration analysis, synthetic data, metrics,
//! inference and training.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use convtransseg::data::{load_dataset, synth_generate, DatasetManifest, Split};
use convtransseg::metrics::{self, BinaryMask};
use convtransseg::model::{self, SegModel};
use convtransseg::runconfig::RunConfig;
use convtransseg::trainer;
use convtransseg::{CtsError, Tensor};

fn py_err(e: CtsError) -> PyErr {
    match e {
        CtsError::Usage(_) | CtsError::Config(_) | CtsError::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run config from `key=value` keyword arguments on top of the defaults.
fn run_config(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = if let Ok(b) = v.extract::<bool>() { b.to_string() } else { v.str()?.to_string() };
            cfg.set(&key, &value).map_err(py_err)?;
        }
    }
    Ok(cfg)
}

/// Learnable parameter counts per module group, plus `total`.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn count_params(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyDict>> {
    let cfg = run_config(kwargs)?;
    let counts = model::count_params(&cfg.model).map_err(py_err)?;
    let d = PyDict::new(py);
    for g in &counts.groups {
        d.set_item(g.name, g.count)?;
    }
    d.set_item("total", counts.total)?;
    Ok(d.unbind())
}

/// Per-level `(height, width, channels, tokens, token_dim, heads)` rows.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn derive_dims(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(usize, usize, usize, usize, usize, usize)>> {
    let cfg = run_config(kwargs)?;
    let dims = model::derive_dims(&cfg.model).map_err(py_err)?;
    Ok(dims
        .levels
        .iter()
        .map(|l| (l.height, l.width, l.channels, dims.tokens, l.token_dim, l.heads))
        .collect())
}

/// Writes a synthetic dataset; returns `(train, val, test)` sizes.
#[pyfunction]
#[pyo3(signature = (out, count=200, size=64, classes=2, seed=0))]
fn synth(out: PathBuf, count: usize, size: usize, classes: usize, seed: u64) -> PyResult<(usize, usize, usize)> {
    let m = synth_generate(count, size, classes, seed, &out).map_err(py_err)?;
    Ok((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)))
}

fn mask(width: usize, height: usize, bits: &[bool]) -> PyResult<BinaryMask> {
    BinaryMask::new(width, height, bits.to_vec()).map_err(py_err)
}

/// Dice coefficient of two row-major boolean masks.
#[pyfunction]
fn dice(width: usize, height: usize, pred: Vec<bool>, gt: Vec<bool>) -> PyResult<f64> {
    metrics::dice(&mask(width, height, &pred)?, &mask(width, height, &gt)?).map_err(py_err)
}

/// Average symmetric surface distance and its status string.
#[pyfunction]
fn assd(width: usize, height: usize, pred: Vec<bool>, gt: Vec<bool>) -> PyResult<(f64, String)> {
    let a = metrics::assd(&mask(width, height, &pred)?, &mask(width, height, &gt)?).map_err(py_err)?;
    Ok((a.value, a.status.as_str().to_string()))
}

/// Wilcoxon signed-rank test on paired samples: `(n, w_plus, p_value)`.
#[pyfunction]
fn wsrt(a: Vec<f64>, b: Vec<f64>) -> PyResult<(usize, f64, f64)> {
    let r = metrics::wsrt(&a, &b).map_err(py_err)?;
    Ok((r.n, r.w_plus, r.p_value))
}

#[pyclass]
struct Model {
    inner: SegModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (seed=0, **kwargs))]
    fn new(seed: u64, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = run_config(kwargs)?;
        Ok(Model { inner: SegModel::new(cfg.model, seed).map_err(py_err)? })
    }

    /// Loads a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = model::load_checkpoint(&path).map_err(py_err)?;
        Ok(Model { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = model::CheckpointMeta { epoch: 0, val_loss: f64::NAN, seed: 0 };
        model::save_checkpoint(&path, &self.inner, &meta).map_err(py_err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Config as `key = value` lines.
    fn config(&self) -> String {
        self.inner.config().to_pairs().into_iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }

    /// Eval-mode logits for a flat `[N, C, H, W]` batch; returns the flat
    /// logits and their shape.
    fn predict(&mut self, pixels: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = Tensor::new(&shape, pixels).map_err(py_err)?;
        let y = self.inner.predict(&x).map_err(py_err)?;
        let s = y.shape().to_vec();
        Ok((y.into_data(), s))
    }

    /// Per-pixel argmax labels for a flat `[N, C, H, W]` batch.
    fn predict_labels(&mut self, pixels: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<u8>> {
        let x = Tensor::new(&shape, pixels).map_err(py_err)?;
        self.inner.predict_labels(&x).map_err(py_err)
    }

    /// Trains in place on a manifest dataset; returns
    /// `(epoch, train_loss, val_loss)` per epoch. Model input size and class
    /// count must match the data.
    #[pyo3(signature = (data, epochs=1, batch=8, lr=1e-4, seed=0, out=None))]
    fn fit(
        &mut self,
        py: Python<'_>,
        data: PathBuf,
        epochs: usize,
        batch: usize,
        lr: f64,
        seed: u64,
        out: Option<PathBuf>,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let manifest = DatasetManifest::read(&data).map_err(py_err)?;
        let ds = load_dataset(&manifest).map_err(py_err)?;
        let cfg = trainer::TrainConfig {
            epochs,
            batch,
            seed,
            adam: trainer::AdamConfig { lr, ..trainer::AdamConfig::default() },
            out_dir: out,
            ..trainer::TrainConfig::default()
        };
        let model = &mut self.inner;
        let outcome = py.detach(|| trainer::train(model, &ds, &cfg, |_| {})).map_err(py_err)?;
        Ok(outcome.records.iter().map(|r| (r.epoch, r.train_loss, r.val_loss)).collect())
    }

    /// Mean Dice over evaluated classes on one split.
    #[pyo3(signature = (data, split="test"))]
    fn mean_dice(&mut self, data: PathBuf, split: &str) -> PyResult<f64> {
        let manifest = DatasetManifest::read(&data).map_err(py_err)?;
        let ds = load_dataset(&manifest).map_err(py_err)?;
        let split = Split::parse(split).map_err(py_err)?;
        let report = trainer::evaluate_model(&mut self.inner, ds.split(split), ds.classes, true).map_err(py_err)?;
        Ok(report.overall.dc_mean)
    }
}

#[pymodule]
fn ctseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(derive_dims, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(assd, m)?)?;
    m.add_function(wrap_pyfunction!(wsrt, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
