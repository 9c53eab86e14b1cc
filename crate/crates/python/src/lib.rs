//! Python bindings: tensors, forward ops, model specs, models and datasets.
//! Everything runs in f32 on the calling thread.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gmnet_core::arch::{extract_feature_maps, Dataset, GroupProfile, Model, ModelSpec};
use gmnet_core::autodiff::Graph;
use gmnet_core::data::{self, DatasetSplit, Splits};
use gmnet_core::ops::{self, ConvConfig, Mode};
use gmnet_core::tensor::Tensor;
use gmnet_core::train::{self, stream_rng, OptState, TrainConfig};

fn err(e: gmnet_core::Error) -> PyErr {
    match e {
        gmnet_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for gmnet_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

#[pyclass(name = "Tensor", module = "gmnet", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor<f32>,
}

impl From<Tensor<f32>> for PyTensor {
    fn from(inner: Tensor<f32>) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyTensor {
    /// Flat row-major `data` with the given `shape`.
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor::new(&shape, data).py()?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor::zeros(&shape).py()?.into())
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed = 0, std = 1.0))]
    fn randn(shape: Vec<usize>, seed: u64, std: f64) -> PyResult<Self> {
        Ok(Tensor::randn(&shape, std, &mut stream_rng(seed, 0)).py()?.into())
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    /// Flat copy of the values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(self.inner.clone().reshape(&shape).py()?.into())
    }

    fn sum(&self) -> f64 {
        self.inner.data().iter().map(|&v| v as f64).sum()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Run a one-off forward pass in a fresh graph.
fn forward1(inputs: &[&PyTensor], f: impl FnOnce(&mut Graph<f32>, &[gmnet_core::autodiff::NodeId]) -> gmnet_core::Result<gmnet_core::autodiff::NodeId>) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.constant(t.inner.clone())).collect();
    let y = f(&mut g, &ids).py()?;
    Ok(g.value(y).clone().into())
}

#[pyfunction]
#[pyo3(signature = (x, weight, bias = None, stride = 1, padding = 0, groups = 1))]
fn conv2d(x: &PyTensor, weight: &PyTensor, bias: Option<&PyTensor>, stride: usize, padding: usize, groups: usize) -> PyResult<PyTensor> {
    let cfg = ConvConfig { stride, padding, groups };
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    forward1(&inputs, |g, ids| ops::conv2d(g, ids[0], ids[1], ids.get(2).copied(), cfg))
}

#[pyfunction]
fn relu(x: &PyTensor) -> PyResult<PyTensor> {
    forward1(&[x], |g, ids| Ok(ops::relu(g, ids[0])))
}

#[pyfunction]
fn softmax(logits: &PyTensor) -> PyResult<PyTensor> {
    Ok(ops::softmax(&logits.inner).py()?.into())
}

#[pyfunction]
fn avg_pool2d(x: &PyTensor, kernel: usize, stride: usize) -> PyResult<PyTensor> {
    forward1(&[x], |g, ids| ops::avg_pool2d(g, ids[0], kernel, stride))
}

#[pyfunction]
fn global_avg_pool(x: &PyTensor) -> PyResult<PyTensor> {
    forward1(&[x], |g, ids| ops::global_avg_pool(g, ids[0]))
}

/// Train-mode batch norm: normalizes with the batch statistics.
#[pyfunction]
#[pyo3(signature = (x, gamma, beta, eps = ops::BN_EPS))]
fn batch_norm(x: &PyTensor, gamma: &PyTensor, beta: &PyTensor, eps: f64) -> PyResult<PyTensor> {
    let c = gamma.inner.numel();
    let mut mean = Tensor::zeros(&[c]).py()?;
    let mut var = Tensor::ones(&[c]).py()?;
    forward1(&[x, gamma, beta], |g, ids| {
        ops::batch_norm(g, ids[0], ids[1], ids[2], &mut mean, &mut var, eps, ops::BN_MOMENTUM, Mode::Train)
    })
}

/// Train-mode inverted dropout.
#[pyfunction]
#[pyo3(signature = (x, keep_prob, seed = 0))]
fn dropout(x: &PyTensor, keep_prob: f64, seed: u64) -> PyResult<PyTensor> {
    let mut rng = stream_rng(seed, 0);
    forward1(&[x], |g, ids| ops::dropout(g, ids[0], keep_prob, Mode::Train, &mut rng))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
#[pyfunction]
fn cross_entropy(logits: &PyTensor, labels: Vec<usize>) -> PyResult<(f64, PyTensor)> {
    let mut g = Graph::new();
    let z = g.variable(logits.inner.clone());
    let loss = ops::softmax_cross_entropy(&mut g, z, &labels).py()?;
    g.backward(loss).py()?;
    let value = g.value(loss).item().unwrap_or(f32::NAN) as f64;
    Ok((value, g.grad(z).cloned().unwrap_or_else(|| logits.inner.map(|_| 0.0)).into()))
}

#[pyfunction]
#[pyo3(signature = (kernel, in_channels, out_channels, groups, bias = false))]
fn count_conv_params(kernel: usize, in_channels: usize, out_channels: usize, groups: usize, bias: bool) -> PyResult<usize> {
    ops::count_conv_params(kernel, in_channels, out_channels, groups, bias).py()
}

#[pyfunction]
fn lr_at(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    train::lr_at(epoch, total_epochs, base_lr)
}

#[pyclass(name = "ModelSpec", module = "gmnet", from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: ModelSpec,
}

#[pymethods]
impl PySpec {
    /// Remaining keyword arguments are config keys (`connection`, `merge`,
    /// `width`, `groups`, `placement`, `bottleneck`, ...).
    #[new]
    #[pyo3(signature = (variant = "gmnet", dataset = "cifar10", **kwargs))]
    fn new(variant: &str, dataset: &str, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut spec = ModelSpec::default();
        spec.set("dataset", dataset).py()?;
        spec.set("variant", variant).py()?;
        let mut placement = None;
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                match key.as_str() {
                    "placement" => placement = Some(value),
                    _ => spec.set(&key, &value).py()?,
                }
            }
        }
        if let Some(p) = placement {
            spec.groups = spec.groups.with_placement(&p).py()?;
        }
        spec.validate().py()?;
        Ok(Self { inner: spec })
    }

    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelSpec::from_config(text).py()? })
    }

    fn to_config(&self) -> String {
        self.inner.to_config()
    }

    /// Copy with the group preset and placement replaced.
    fn with_groups(&self, preset: &str, placement: &str) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.groups = GroupProfile::preset(preset).py()?.with_placement(placement).py()?;
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size
    }

    #[getter]
    fn in_channels(&self) -> usize {
        self.inner.in_channels
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({})", self.inner.to_config().trim().replace('\n', "; "))
    }
}

#[pyclass(name = "Data", module = "gmnet", from_py_object)]
#[derive(Clone)]
struct PyData {
    inner: Splits,
}

fn parse_dataset(name: &str) -> PyResult<Dataset> {
    name.parse().py()
}

#[pymethods]
impl PyData {
    /// Build from image tensors `(N, C, H, W)` and labels. No normalization
    /// is applied.
    #[staticmethod]
    #[pyo3(signature = (train_images, train_labels, test_images, test_labels, dataset = "mnist"))]
    fn from_tensors(
        train_images: &PyTensor,
        train_labels: Vec<usize>,
        test_images: &PyTensor,
        test_labels: Vec<usize>,
        dataset: &str,
    ) -> PyResult<Self> {
        let d = parse_dataset(dataset)?;
        Ok(Self {
            inner: Splits {
                train: DatasetSplit::new(d, train_images.inner.clone(), train_labels).py()?,
                test: DatasetSplit::new(d, test_images.inner.clone(), test_labels).py()?,
            },
        })
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.inner.test.len()
    }

    /// Standardize both splits with statistics of the training split.
    #[pyo3(signature = (divide_std = true))]
    fn normalize(&mut self, divide_std: bool) {
        data::preprocess(&mut self.inner, divide_std);
    }

    /// Keep the first `train` and `test` examples.
    fn subset(&self, train: usize, test: usize) -> PyResult<Self> {
        Ok(Self {
            inner: Splits {
                train: self.inner.train.subset(train).py()?,
                test: self.inner.test.subset(test).py()?,
            },
        })
    }

    /// One test image as a `(1, C, H, W)` tensor and its label.
    fn test_image(&self, index: usize) -> PyResult<(PyTensor, usize)> {
        let t = &self.inner.test;
        if index >= t.len() {
            return Err(PyValueError::new_err(format!("index {index} out of range for {} images", t.len())));
        }
        let [c, h, w] = t.image_shape();
        Ok((Tensor::new(&[1, c, h, w], t.image(index).to_vec()).py()?.into(), t.labels[index]))
    }
}

/// Load the four MNIST files from `dir`.
#[pyfunction]
#[pyo3(signature = (dir, normalize = true))]
fn load_mnist(dir: &str, normalize: bool) -> PyResult<PyData> {
    let mut inner = data::load_mnist(dir).py()?;
    if normalize {
        data::preprocess(&mut inner, true);
    }
    Ok(PyData { inner })
}

/// Load CIFAR-10 or CIFAR-100 binary batches from `dir`.
#[pyfunction]
#[pyo3(signature = (dir, dataset = "cifar10", normalize = true))]
fn load_cifar(dir: &str, dataset: &str, normalize: bool) -> PyResult<PyData> {
    let mut inner = data::load_cifar(dir, parse_dataset(dataset)?).py()?;
    if normalize {
        data::preprocess(&mut inner, true);
    }
    Ok(PyData { inner })
}

#[pyclass(name = "Model", module = "gmnet")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &PySpec, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: Model::build(&spec.inner, &mut stream_rng(seed, 0)).py()? })
    }

    #[getter]
    fn spec(&self) -> PySpec {
        PySpec { inner: self.inner.spec.clone() }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    /// Trainable parameters per top-level block.
    fn count_params(&self) -> Vec<(String, usize)> {
        self.inner.count_params().blocks
    }

    /// Output shape of every block for a batch of `batch`.
    #[pyo3(signature = (batch = 1))]
    fn trace(&self, batch: usize) -> PyResult<Vec<(String, Vec<usize>)>> {
        let s = &self.inner.spec;
        let t = self.inner.trace(&[batch, s.in_channels, s.input_size, s.input_size]).py()?;
        Ok(t.into_iter().map(|e| (e.name, e.shape)).collect())
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(_, n, _)| n.to_string()).collect()
    }

    fn param(&self, name: &str) -> PyResult<PyTensor> {
        self.inner
            .params
            .by_name(name)
            .map(|p| p.value.clone().into())
            .ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))
    }

    fn set_param(&mut self, name: &str, value: &PyTensor) -> PyResult<()> {
        let id = self.inner.params.id(name).ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))?;
        let p = self.inner.params.get_mut(id);
        if p.value.shape() != value.inner.shape() {
            return Err(PyValueError::new_err(format!(
                "`{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.inner.shape()
            )));
        }
        p.value = value.inner.clone();
        Ok(())
    }

    /// Eval-mode logits.
    fn logits(&self, x: &PyTensor) -> PyResult<PyTensor> {
        Ok(self.inner.logits(&x.inner).py()?.into())
    }

    fn predict(&self, x: &PyTensor) -> PyResult<Vec<usize>> {
        self.inner.logits(&x.inner).py()?.argmax_rows().py()
    }

    fn tap_names(&self) -> Vec<String> {
        self.inner.tap_names()
    }

    fn default_taps(&self) -> Vec<String> {
        self.inner.default_taps()
    }

    /// Eval-mode activations at the named blocks, default taps when omitted.
    #[pyo3(signature = (x, taps = None))]
    fn feature_maps(&self, x: &PyTensor, taps: Option<Vec<String>>) -> PyResult<Vec<(String, PyTensor)>> {
        let taps = taps.unwrap_or_else(|| self.inner.default_taps());
        let maps = extract_feature_maps(&self.inner, &x.inner, &taps).py()?;
        Ok(maps.into_iter().map(|(n, t)| (n, t.into())).collect())
    }

    /// Test error in percent.
    #[pyo3(signature = (data, batch = 256))]
    fn evaluate(&self, data: &PyData, batch: usize) -> PyResult<f64> {
        train::evaluate(&self.inner, &data.inner.test, batch.max(1)).py()
    }

    /// Train with SGD + Nesterov momentum and the step schedule. Returns one
    /// dict per row of the metrics log, starting with the untrained row.
    #[pyo3(signature = (data, epochs, batch = 64, lr = None, seed = 0, augment = None))]
    fn fit(
        &mut self,
        data: &PyData,
        epochs: usize,
        batch: usize,
        lr: Option<f64>,
        seed: u64,
        augment: Option<bool>,
    ) -> PyResult<Vec<Vec<(String, f64)>>> {
        let mut cfg = TrainConfig::for_dataset(data.inner.train.meta.dataset);
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.seed = seed;
        if let Some(lr) = lr {
            cfg.base_lr = lr;
        }
        if let Some(a) = augment {
            cfg.augment = a;
        }
        let mut opt = OptState::new(&self.inner.params, cfg.momentum, cfg.weight_decay, cfg.base_lr).py()?;
        let metrics = train::fit(&mut self.inner, &mut opt, &data.inner, &cfg, |_| {}).py()?;
        Ok(metrics
            .records
            .iter()
            .map(|r| {
                vec![
                    ("epoch".into(), r.epoch as f64),
                    ("lr".into(), r.lr),
                    ("train_loss".into(), r.train_loss),
                    ("train_err".into(), r.train_err),
                    ("test_err".into(), r.test_err),
                    ("seconds".into(), r.seconds),
                ]
            })
            .collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        train::save_checkpoint(&self.inner, None, path).py()
    }

    /// Overwrite the parameters from a checkpoint written for the same spec.
    fn load(&mut self, path: &str) -> PyResult<()> {
        train::load_checkpoint(&mut self.inner, None, path).py()
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} params)", self.inner.spec.variant, self.inner.param_count())
    }
}

#[pymodule]
fn gmnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySpec>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyData>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(relu, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(avg_pool2d, m)?)?;
    m.add_function(wrap_pyfunction!(global_avg_pool, m)?)?;
    m.add_function(wrap_pyfunction!(batch_norm, m)?)?;
    m.add_function(wrap_pyfunction!(dropout, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(count_conv_params, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(load_cifar, m)?)?;
    Ok(())
}
