//! Python bindings: percentile labelling, metrics, synthetic datasets and
//! model training/evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use saconv::checkpoint::Checkpoint;
use saconv::data::{self, Dataset as CoreDataset};
use saconv::metrics::{self, ConfusionMatrix, MeanSem, MetricsReport};
use saconv::model::{Arch, Model as CoreModel, ModelConfig};
use saconv::pipeline::{self, DataConfig};
use saconv::tensor::Tensor;
use saconv::training::{self, TrainConfig};

fn to_py(e: saconv::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Linear-interpolation percentile of `values` at fraction `m`.
#[pyfunction]
fn percentile(values: Vec<f64>, m: f64) -> PyResult<f64> {
    data::percentile(&values, m).map_err(to_py)
}

/// Labels (`1` strictly above the threshold) and the threshold itself.
#[pyfunction]
fn label_extremes(values: Vec<f64>, m: f64) -> PyResult<(Vec<u8>, f64)> {
    let l = data::label_extremes(&values, m).map_err(to_py)?;
    Ok((l.labels, l.threshold))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(to_py)
}

/// Accuracy, precision, recall and F1; undefined rates are `None`.
#[pyfunction]
fn derive_metrics<'py>(py: Python<'py>, tp: usize, tn: usize, fp: usize, fn_: usize) -> PyResult<Bound<'py, PyDict>> {
    let d = metrics::derive_metrics(&ConfusionMatrix { tp, tn, fp, fn_ }).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", d.accuracy)?;
    out.set_item("precision", d.precision)?;
    out.set_item("recall", d.recall)?;
    out.set_item("f1", d.f1)?;
    Ok(out)
}

/// Mean and standard error of the mean (0 for a single value).
#[pyfunction]
fn mean_sem(values: Vec<f64>) -> PyResult<(f64, f64)> {
    match MeanSem::of(&values) {
        MeanSem {
            mean: Some(m),
            sem: Some(s),
            ..
        } => Ok((m, s)),
        _ => Err(PyValueError::new_err("mean of zero values")),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("Loss", r.loss)?;
    out.set_item("Accuracy", r.accuracy)?;
    out.set_item("Precision", r.precision)?;
    out.set_item("Recall", r.recall)?;
    out.set_item("AUC", r.auc)?;
    out.set_item("F1_Score", r.f1)?;
    let cm = &r.confusion;
    out.set_item("confusion", (cm.tp, cm.tn, cm.fp, cm.fn_))?;
    Ok(out)
}

/// Labelled anomaly samples with a chronological 80/20 split.
#[pyclass(frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic data: planted dipole events of amplitude `signal`, labelled
    /// at precipitation percentile `percentile`.
    #[staticmethod]
    #[pyo3(signature = (seed, days, signal, percentile = 0.95, climatology_window = 15))]
    fn synthetic(seed: u64, days: usize, signal: f64, percentile: f64, climatology_window: usize) -> PyResult<Self> {
        let cfg = DataConfig {
            percentile,
            climatology_window,
            ..DataConfig::default()
        };
        let (_, inner) = pipeline::synth_dataset(seed, days, signal, &cfg).map_err(to_py)?;
        Ok(Dataset { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.inner.train_len
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.samples.iter().map(|s| s.label).collect()
    }

    /// `(flat values, shape, label)` of sample `i`, values in `[lat, lon, var]` order.
    fn sample(&self, i: usize) -> PyResult<(Vec<f64>, Vec<usize>, u8)> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample {i} out of range")))?;
        Ok((s.anomalies.data().to_vec(), s.anomalies.shape().to_vec(), s.label))
    }
}

#[pyclass]
struct Model {
    inner: CoreModel,
    data: DataConfig,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (arch = "saconvnet-hw", seed = 0))]
    fn new(arch: &str, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(to_py)?;
        let inner = CoreModel::init(ModelConfig::for_arch(arch), seed).map_err(to_py)?;
        Ok(Model {
            inner,
            data: DataConfig::default(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Model {
            inner: ck.model,
            data: ck.data,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            model: self.inner.clone(),
            data: self.data.clone(),
            seed: 0,
            epochs: 0,
        };
        ck.save(&path).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.config.arch().to_string()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Probability of the extreme class for one `[15, 35, 2]` grid given flat.
    fn predict_proba(&self, values: Vec<f64>) -> PyResult<f64> {
        let c = &self.inner.config;
        let x = Tensor::new([c.input_h, c.input_w, c.input_d], values).map_err(to_py)?;
        self.inner.predict_proba(&x).map_err(to_py)
    }

    /// Trains on the dataset's training split; returns per-epoch records.
    #[pyo3(signature = (dataset, epochs = 100, seed = 0, batch_size = 32))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &Dataset,
        epochs: usize,
        seed: u64,
        batch_size: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = TrainConfig {
            epochs,
            seed,
            batch_size,
            ..TrainConfig::default()
        };
        let log = training::train(&mut self.inner, &dataset.inner, &cfg).map_err(to_py)?;
        log.iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("lr", r.lr)?;
                d.set_item("loss", r.loss)?;
                d.set_item("train_accuracy", r.train_accuracy)?;
                Ok(d)
            })
            .collect()
    }

    /// Loss, accuracy, precision, recall, AUC and F1 on the `"train"`, `"test"` or `"all"` split.
    #[pyo3(signature = (dataset, split = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let samples = match split {
            "train" => dataset.inner.train(),
            "test" => dataset.inner.test(),
            "all" => &dataset.inner.samples[..],
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        let r = pipeline::evaluate(&self.inner, samples, f64::NAN).map_err(to_py)?;
        report_dict(py, &r)
    }
}

#[pymodule]
fn saconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(label_extremes, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(derive_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(mean_sem, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    Ok(())
}
