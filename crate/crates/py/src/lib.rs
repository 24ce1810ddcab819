//! Python bindings: the regularizer, code packing, training and packed-model
//! inference. Tensors cross the boundary as flat lists plus a shape.

#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use stq_core::dataio::{self, Split};
use stq_core::inference::{self, InferenceModel};
use stq_core::nn::{self, ModelSpec, QuantMode};
use stq_core::quant::{self, Depth, QuantDepth, TernaryCode};
use stq_core::regularizer::{self, TiePolicy};
use stq_core::trainer::{self, TrainConfig};
use stq_core::{format, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn quant_depth(bits: u32) -> PyResult<QuantDepth> {
    match bits {
        1 => Ok(QuantDepth::Binary),
        2 => Ok(QuantDepth::Ternary),
        _ => Err(PyValueError::new_err(format!("bits must be 1 or 2, got {bits}"))),
    }
}

fn depth(bits: u32) -> PyResult<Depth> {
    Depth::from_bits(bits).ok_or_else(|| PyValueError::new_err(format!("bits must be 1, 2 or 32, got {bits}")))
}

fn tensor(values: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::new(shape, values).map_err(py_err)
}

#[pyfunction]
fn reg_r1(w: f64, mu: f64) -> f64 {
    regularizer::reg_r1(w, mu)
}

#[pyfunction]
fn reg_r2(w: f64, mu: f64) -> f64 {
    regularizer::reg_r2(w, mu)
}

#[pyfunction]
fn reg_stq(w: f64, mu: f64, beta: f64) -> PyResult<f64> {
    regularizer::reg_stq(w, mu, beta).map_err(py_err)
}

/// `(dw, dmu, dbeta)` of `reg_stq(w, mu, beta) + gamma * cot(beta)`.
#[pyfunction]
#[pyo3(signature = (w, mu, beta, gamma = 1e-2))]
fn reg_stq_grad(w: f64, mu: f64, beta: f64, gamma: f64) -> PyResult<(f64, f64, f64)> {
    let g = regularizer::reg_stq_grad(w, mu, beta, gamma, TiePolicy::Distance).map_err(py_err)?;
    Ok((g.dw, g.dmu, g.dbeta))
}

#[pyfunction]
fn ternarize(values: Vec<f32>, delta: f32) -> PyResult<Vec<i8>> {
    let t = tensor(values.clone(), vec![values.len()])?;
    Ok(quant::threshold_ternarize(&t, delta).map_err(py_err)?.as_slice().to_vec())
}

#[pyfunction]
fn binarize(values: Vec<f32>) -> PyResult<Vec<i8>> {
    let t = tensor(values.clone(), vec![values.len()])?;
    Ok(quant::sign_binarize(&t).as_slice().to_vec())
}

#[pyfunction]
fn pack_codes<'py>(py: Python<'py>, codes: Vec<i8>, bits: u32) -> PyResult<Bound<'py, PyBytes>> {
    let codes = TernaryCode::new(codes).map_err(py_err)?;
    let packed = quant::pack_codes(&codes, quant_depth(bits)?).map_err(py_err)?;
    Ok(PyBytes::new_bound(py, &packed))
}

#[pyfunction]
fn unpack_codes(data: &[u8], count: usize, bits: u32) -> PyResult<Vec<i8>> {
    Ok(quant::unpack_codes(data, count, quant_depth(bits)?)
        .map_err(py_err)?
        .as_slice()
        .to_vec())
}

#[pyfunction]
fn compression_ratio(weight_counts: Vec<usize>, bits: Vec<u32>) -> PyResult<f64> {
    let depths = bits.into_iter().map(depth).collect::<PyResult<Vec<_>>>()?;
    trainer::compression_ratio(&weight_counts, &depths).map_err(py_err)
}

/// Images `[N, C, H, W]` with integer labels.
#[pyclass]
#[derive(Clone)]
struct Dataset {
    inner: dataio::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(images: Vec<f32>, shape: Vec<usize>, labels: Vec<u8>) -> PyResult<Self> {
        let images = tensor(images, shape)?;
        Ok(Dataset {
            inner: dataio::Dataset::new(images, labels, Split::Train).map_err(py_err)?,
        })
    }

    /// `(train, test)` from a directory of MNIST IDX files.
    #[staticmethod]
    fn mnist(dir: &str) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = dataio::load_mnist(dir).map_err(py_err)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    /// Gaussian clusters shaped `[n, 1, 1, dim]`; the centres depend only on
    /// `seed`, so train and test splits of the same seed share them.
    #[staticmethod]
    #[pyo3(signature = (n, dim, classes, noise = 1.0, seed = 0, split = "train"))]
    fn synthetic(n: usize, dim: usize, classes: usize, noise: f64, seed: u64, split: &str) -> PyResult<Self> {
        let split: Split = split.parse().map_err(py_err)?;
        Ok(Dataset {
            inner: dataio::synthetic_clusters(n, dim, classes, noise, seed, split).map_err(py_err)?,
        })
    }

    fn take(&self, n: usize) -> PyResult<Self> {
        Ok(Dataset {
            inner: self.inner.take(n).map_err(py_err)?,
        })
    }

    #[getter]
    fn image_shape(&self) -> Vec<usize> {
        self.inner.image_shape().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trainable network with latent weights.
#[pyclass]
struct Model {
    inner: nn::Model<f32>,
}

fn parse_mode(mode: &str) -> PyResult<QuantMode> {
    mode.parse().map_err(py_err)
}

fn seeded(spec: &ModelSpec, mode: &str, seed: u64) -> PyResult<Model> {
    let cfg = TrainConfig {
        mode: parse_mode(mode)?,
        seed,
        ..Default::default()
    };
    Ok(Model {
        inner: trainer::init_model(spec, &cfg).map_err(py_err)?,
    })
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (mode = "stq", seed = 0))]
    fn lenet5(mode: &str, seed: u64) -> PyResult<Self> {
        seeded(&nn::build_lenet5(), mode, seed)
    }

    #[staticmethod]
    #[pyo3(signature = (width = 1.0, mode = "stq", seed = 0))]
    fn vgg7(width: f64, mode: &str, seed: u64) -> PyResult<Self> {
        seeded(&nn::build_vgg7(width), mode, seed)
    }

    /// Builds a model from a JSON layer specification, e.g.
    /// `{"name": "mlp", "input_shape": [1, 1, 16], "layers": [{"type": "flatten"}, ...]}`.
    #[staticmethod]
    #[pyo3(signature = (spec_json, mode = "stq", seed = 0))]
    fn from_spec(spec_json: &str, mode: &str, seed: u64) -> PyResult<Self> {
        let spec: ModelSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        seeded(&spec, mode, seed)
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas()
    }

    fn weight_counts(&self) -> Vec<usize> {
        self.inner.spec.weight_counts()
    }

    /// Storage depth in bits per quantizable layer.
    #[pyo3(signature = (delta = 1.55))]
    fn depths(&self, delta: f64) -> Vec<u32> {
        trainer::decide_depths(&self.inner, delta).iter().map(|d| d.bits()).collect()
    }

    /// Evaluation-mode logits for a flat batch; returns a flat `[N, classes]` list.
    fn logits(&self, images: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f32>> {
        Ok(self.inner.logits(&tensor(images, shape)?).map_err(py_err)?.into_data())
    }

    /// Trains in place. `config_json` holds training options such as
    /// `{"epochs": 5, "regularizer": {"gamma": 0.1}}`; missing keys take
    /// their defaults. Returns a summary dict.
    #[pyo3(signature = (train, val, config_json = "{}"))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train: &Dataset,
        val: &Dataset,
        config_json: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut cfg: TrainConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        cfg.mode = self.inner.mode;
        let report = py
            .allow_threads(|| trainer::train(&mut self.inner, &train.inner, &val.inner, &cfg, |_| {}))
            .map_err(py_err)?;
        let d = PyDict::new_bound(py);
        d.set_item("best_val_accuracy", report.best_val_accuracy)?;
        d.set_item("best_epoch", report.best_epoch)?;
        d.set_item("quantized_accuracy", report.quantized_accuracy)?;
        d.set_item("depths", report.depths.clone())?;
        d.set_item("depth_string", report.depth_string.clone())?;
        d.set_item("compression_ratio", report.compression_ratio)?;
        d.set_item("betas", self.inner.betas())?;
        Ok(d)
    }

    /// Quantized inference model with the decided depths.
    #[pyo3(signature = (delta = 1.55))]
    fn export(&self, delta: f64) -> PyResult<PackedModel> {
        let depths = trainer::decide_depths(&self.inner, delta);
        Ok(PackedModel {
            inner: InferenceModel::from_model(&self.inner, &depths).map_err(py_err)?,
        })
    }
}

/// Deployable model: packed codes, scales and biases.
#[pyclass]
struct PackedModel {
    inner: InferenceModel,
}

#[pymethods]
impl PackedModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PackedModel {
            inner: format::read_file(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PackedModel {
            inner: format::decode(data).map_err(py_err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new_bound(py, &format::encode(&self.inner).map_err(py_err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        format::write_file(&self.inner, path).map_err(py_err)
    }

    fn depths(&self) -> Vec<u32> {
        self.inner.depths().iter().map(|d| d.bits()).collect()
    }

    fn weight_counts(&self) -> Vec<usize> {
        self.inner.weight_counts()
    }

    fn compression_ratio(&self) -> PyResult<f64> {
        trainer::compression_ratio(&self.inner.weight_counts(), &self.inner.depths()).map_err(py_err)
    }

    fn logits(&self, images: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f32>> {
        Ok(self.inner.logits(&tensor(images, shape)?).map_err(py_err)?.into_data())
    }

    #[pyo3(signature = (data, batch_size = 500))]
    fn accuracy(&self, data: &Dataset, batch_size: usize) -> PyResult<f64> {
        inference::accuracy(&self.inner, &data.inner, batch_size).map_err(py_err)
    }

    fn __eq__(&self, other: &PackedModel) -> bool {
        self.inner == other.inner
    }
}

#[pymodule]
fn stq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reg_r1, m)?)?;
    m.add_function(wrap_pyfunction!(reg_r2, m)?)?;
    m.add_function(wrap_pyfunction!(reg_stq, m)?)?;
    m.add_function(wrap_pyfunction!(reg_stq_grad, m)?)?;
    m.add_function(wrap_pyfunction!(ternarize, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(pack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(compression_ratio, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<PackedModel>()?;
    Ok(())
}
