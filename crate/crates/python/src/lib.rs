//! Python bindings for the `efftt` crate. Everything runs in `f64`.

use std::collections::HashMap;

use efftt::backward::{backward_batch, EmbGradBatch, OptimizerState};
use efftt::data::{batch_iter, gen_synthetic, read_csv, train_test_split, write_csv, DatasetSpec};
use efftt::lookup::{forward_batch, IndexBag, OpCounters};
use efftt::model::{load_checkpoint, save_checkpoint, DlrmModel, LossKind, MiniBatch, ModelConfig, ModelOptimizer};
use efftt::tt::{factorize_dims, linear_index_to_tt_index, param_stats as tt_param_stats, tt_index_to_linear, TtShape};
use efftt::Error;
use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn counters(c: &OpCounters) -> HashMap<&'static str, u64> {
    HashMap::from([
        ("slice_mults", c.slice_mults),
        ("row_adds", c.row_adds),
        ("buffer_hits", c.buffer_hits),
        ("buffer_misses", c.buffer_misses),
    ])
}

fn to_bags(raw: Vec<Vec<usize>>) -> PyResult<Vec<IndexBag>> {
    raw.into_iter().map(|b| IndexBag::new(b).map_err(err)).collect()
}

fn shape_for(rows: usize, cols: usize, cores: usize, rank: usize) -> PyResult<TtShape> {
    factorize_dims(rows, cols, cores).and_then(|f| f.into_shape(rank)).map_err(err)
}

/// TT-compressed embedding table.
#[pyclass(name = "TtTable")]
struct PyTtTable {
    inner: efftt::tt::TtTable<f64>,
    opt: Option<(f64, f64, OptimizerState<f64>)>,
}

#[pymethods]
impl PyTtTable {
    #[new]
    #[pyo3(signature = (rows, cols, cores = 3, rank = 8, seed = 0, std = 0.1))]
    fn new(rows: usize, cols: usize, cores: usize, rank: usize, seed: u64, std: f64) -> PyResult<Self> {
        let shape = shape_for(rows, cols, cores, rank)?;
        let inner = efftt::tt::TtTable::init_random(shape, seed, std).map_err(err)?;
        Ok(Self { inner, opt: None })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: efftt::tt::TtTable::load(path).map_err(err)?, opt: None })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    #[getter]
    fn m(&self) -> Vec<usize> {
        self.inner.shape().m().to_vec()
    }

    #[getter]
    fn n(&self) -> Vec<usize> {
        self.inner.shape().n().to_vec()
    }

    #[getter]
    fn ranks(&self) -> Vec<usize> {
        self.inner.shape().ranks().to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.cores().iter().map(Vec::len).sum()
    }

    fn row(&self, index: usize) -> PyResult<Vec<f64>> {
        self.inner.reconstruct_row(index).map_err(err)
    }

    /// Sum-pooled lookup. Returns the pooled rows and the operation counters.
    #[pyo3(signature = (bags, reuse = true))]
    #[allow(clippy::type_complexity)]
    fn lookup(&self, bags: Vec<Vec<usize>>, reuse: bool) -> PyResult<(Vec<Vec<f64>>, HashMap<&'static str, u64>)> {
        let out = forward_batch(&self.inner, &to_bags(bags)?, reuse).map_err(err)?;
        let cols = self.inner.cols();
        Ok((out.embeddings.chunks(cols).map(<[f64]>::to_vec).collect(), counters(&out.counters)))
    }

    /// One SGD step from per-row gradients. Momentum state survives between
    /// calls while `lr` and `momentum` stay the same.
    #[pyo3(signature = (indices, grads, lr, momentum = 0.0, aggregate = true))]
    fn sgd_step(
        &mut self,
        indices: Vec<usize>,
        grads: Vec<Vec<f64>>,
        lr: f64,
        momentum: f64,
        aggregate: bool,
    ) -> PyResult<HashMap<&'static str, u64>> {
        let cols = self.inner.cols();
        if let Some(g) = grads.iter().find(|g| g.len() != cols) {
            return Err(PyValueError::new_err(format!("gradient of width {} for a table of width {cols}", g.len())));
        }
        let batch = EmbGradBatch::new(indices, grads.concat(), cols).map_err(err)?;
        let stale = !matches!(&self.opt, Some((l, mu, _)) if *l == lr && *mu == momentum);
        if stale {
            self.opt = Some((lr, momentum, OptimizerState::new(lr, momentum, self.inner.shape()).map_err(err)?));
        }
        let (_, _, opt) = self.opt.as_mut().expect("optimizer set above");
        let c = backward_batch(&mut self.inner, &batch, None, opt, aggregate).map_err(err)?;
        Ok(counters(&c))
    }

    fn __repr__(&self) -> String {
        format!("TtTable(rows={}, cols={}, ranks={:?})", self.inner.rows(), self.inner.cols(), self.inner.shape().ranks())
    }
}

/// Labelled samples with dense and multi-hot sparse features.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: efftt::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// The default synthetic power-law dataset, optionally resized.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, n_samples = None, clusters = 0))]
    fn synthetic(seed: u64, n_samples: Option<usize>, clusters: usize) -> PyResult<Self> {
        let mut spec = DatasetSpec::ieee118_like(seed);
        if let Some(n) = n_samples {
            spec.n_samples = n;
        }
        spec.clusters = clusters;
        Ok(Self { inner: gen_synthetic(&spec).map_err(err)? })
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        Ok(Self { inner: read_csv(path).map_err(err)? })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        write_csv(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn positives(&self) -> usize {
        self.inner.positives()
    }

    #[getter]
    fn n_dense(&self) -> usize {
        self.inner.n_dense
    }

    #[getter]
    fn rows_per_field(&self) -> Vec<usize> {
        self.inner.rows_per_field.clone()
    }

    fn labels(&self) -> Vec<f64> {
        self.inner.samples.iter().map(|s| s.label).collect()
    }

    /// Deterministic (train, test) sample ids.
    fn split(&self) -> (Vec<usize>, Vec<usize>) {
        train_test_split(self.inner.len())
    }

    /// Per-batch index lists of one sparse field over consecutive batches.
    fn field_batches(&self, batch_size: usize, field: usize) -> PyResult<Vec<Vec<usize>>> {
        if field >= self.inner.n_sparse() {
            return Err(PyIndexError::new_err(format!("field {field} of {}", self.inner.n_sparse())));
        }
        let batches = batch_iter(self.inner.len(), batch_size, None).map_err(err)?;
        Ok(self.inner.field_batches(&batches, field))
    }
}

fn parse_loss(s: &str) -> PyResult<LossKind> {
    match s {
        "bce" => Ok(LossKind::Bce),
        "mse" => Ok(LossKind::Mse),
        _ => Err(PyValueError::new_err(format!("unknown loss `{s}` (bce or mse)"))),
    }
}

fn all_ids(ds: &PyDataset, ids: Option<Vec<usize>>) -> Vec<usize> {
    ids.unwrap_or_else(|| (0..ds.inner.len()).collect())
}

/// DLRM-style classifier whose large tables are TT-compressed.
#[pyclass(name = "Model")]
struct PyModel {
    inner: DlrmModel<f64>,
    opt: ModelOptimizer<f64>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        n_dense, rows_per_field, embed_dim = 8, rank = 8, cores = 3, tt_min_rows = 1000,
        loss = "bce", seed = 0, lr = 0.05, momentum = 0.9
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_dense: usize,
        rows_per_field: Vec<usize>,
        embed_dim: usize,
        rank: usize,
        cores: usize,
        tt_min_rows: usize,
        loss: &str,
        seed: u64,
        lr: f64,
        momentum: f64,
    ) -> PyResult<Self> {
        let mut c = ModelConfig::new(n_dense, rows_per_field);
        c.embed_dim = embed_dim;
        c.tt_rank = rank;
        c.tt_cores = cores;
        c.tt_min_rows = tt_min_rows;
        c.loss = parse_loss(loss)?;
        c.seed = seed;
        let inner = DlrmModel::new(c).map_err(err)?;
        let opt = ModelOptimizer::new(&inner, lr, momentum).map_err(err)?;
        Ok(Self { inner, opt })
    }

    #[staticmethod]
    #[pyo3(signature = (path, lr = 0.05, momentum = 0.9))]
    fn load(path: &str, lr: f64, momentum: f64) -> PyResult<Self> {
        let inner = load_checkpoint(path).map_err(err)?;
        let opt = ModelOptimizer::new(&inner, lr, momentum).map_err(err)?;
        Ok(Self { inner, opt })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// One pass over `ids` (all samples by default). Returns the mean batch loss.
    #[pyo3(signature = (dataset, ids = None, batch_size = 256, shuffle_seed = None))]
    fn train_epoch(
        &mut self,
        dataset: &PyDataset,
        ids: Option<Vec<usize>>,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> PyResult<f64> {
        let ids = all_ids(dataset, ids);
        let batches = batch_iter(ids.len(), batch_size, shuffle_seed).map_err(err)?;
        let mut total = 0.0;
        for b in &batches {
            let sel: Vec<usize> = b.iter().map(|&p| ids[p]).collect();
            let mb = MiniBatch::from_dataset(&dataset.inner, &sel).map_err(err)?;
            total += self.inner.train_step(&mb, &mut self.opt, true).map_err(err)?.metrics.loss;
        }
        Ok(total / batches.len() as f64)
    }

    #[pyo3(signature = (dataset, ids = None))]
    fn predict(&self, dataset: &PyDataset, ids: Option<Vec<usize>>) -> PyResult<Vec<f64>> {
        let ids = all_ids(dataset, ids);
        let mb = MiniBatch::from_dataset(&dataset.inner, &ids).map_err(err)?;
        self.inner.predict(&mb, true).map_err(err)
    }

    /// Accuracy, precision, recall, F1 and loss at threshold 0.5.
    #[pyo3(signature = (dataset, ids = None, batch_size = 1024))]
    fn evaluate(&self, dataset: &PyDataset, ids: Option<Vec<usize>>, batch_size: usize) -> PyResult<HashMap<&'static str, f64>> {
        let ids = all_ids(dataset, ids);
        let m = self.inner.evaluate(&dataset.inner, &ids, batch_size).map_err(err)?;
        Ok(HashMap::from([
            ("accuracy", m.accuracy),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
            ("loss", m.loss),
        ]))
    }
}

/// TT and dense parameter counts plus their ratio.
#[pyfunction]
#[pyo3(signature = (rows, cols, cores = 3, rank = 8))]
fn param_stats(rows: usize, cols: usize, cores: usize, rank: usize) -> PyResult<HashMap<&'static str, f64>> {
    let shape = shape_for(rows, cols, cores, rank)?;
    let s = tt_param_stats(&shape, rows, cols);
    Ok(HashMap::from([
        ("tt_params", s.tt_params as f64),
        ("dense_params", s.dense_params as f64),
        ("ratio", s.ratio),
    ]))
}

/// Row and column factors `(m, n)`.
#[pyfunction]
fn factorize(rows: usize, cols: usize, cores: usize) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let f = factorize_dims(rows, cols, cores).map_err(err)?;
    Ok((f.m, f.n))
}

#[pyfunction]
fn to_tt_index(index: usize, m: Vec<usize>) -> PyResult<Vec<usize>> {
    linear_index_to_tt_index(index, &m).map_err(err)
}

#[pyfunction]
fn from_tt_index(digits: Vec<usize>, m: Vec<usize>) -> PyResult<usize> {
    if digits.len() != m.len() || digits.iter().zip(&m).any(|(d, r)| d >= r) {
        return Err(PyValueError::new_err(format!("digits {digits:?} do not fit radices {m:?}")));
    }
    Ok(tt_index_to_linear(&digits, &m))
}

/// Learns a locality-improving index bijection from per-batch index lists.
#[pyfunction]
#[pyo3(signature = (batches, table_len, hot_ratio = 0.01))]
fn learn_bijection(py: Python<'_>, batches: Vec<Vec<usize>>, table_len: usize, hot_ratio: f64) -> PyResult<Py<PyAny>> {
    let r = efftt::reorder::learn_bijection(&batches, table_len, hot_ratio).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("forward", &r.bijection.forward)?;
    d.set_item("threshold", r.threshold)?;
    d.set_item("communities", r.assignment.communities())?;
    d.set_item("clusters", r.clusters())?;
    d.set_item("modularity", r.assignment.q)?;
    Ok(d.into_any().unbind())
}

/// Mean number of distinct prefix products per batch under a TT shape.
#[pyfunction]
#[pyo3(signature = (batches, rows, cols, cores = 3, rank = 8))]
fn mean_distinct_prefixes(batches: Vec<Vec<usize>>, rows: usize, cols: usize, cores: usize, rank: usize) -> PyResult<f64> {
    let shape = shape_for(rows, cols, cores, rank)?;
    efftt::reorder::mean_distinct_prefixes(&batches, &shape).map_err(err)
}

#[pymodule]
fn pyefftt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTtTable>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(param_stats, m)?)?;
    m.add_function(wrap_pyfunction!(factorize, m)?)?;
    m.add_function(wrap_pyfunction!(to_tt_index, m)?)?;
    m.add_function(wrap_pyfunction!(from_tt_index, m)?)?;
    m.add_function(wrap_pyfunction!(learn_bijection, m)?)?;
    m.add_function(wrap_pyfunction!(mean_distinct_prefixes, m)?)?;
    Ok(())
}
