//! Python bindings for the tkgmem engine.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use tkgmem::backbone::EmbeddingSource;
use tkgmem::cli::prepare_loaded;
use tkgmem::engine::ReprMode;
use tkgmem::evaluator::{evaluate, EvalContext};
use tkgmem::memory::{self, EmaVariant, Operator, OperatorKind};
use tkgmem::synth::{generate, SyntheticSpec};
use tkgmem::{Error, Split, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NumericAbort { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn split_of(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split `{name}`"))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::matrix(r, c, rows.concat()).map_err(to_py)
}

/// Key=value run configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: tkgmem::Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: tkgmem::Config::parse(text).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// Inverse-augmented, chronologically split dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: tkgmem::TkgDataset,
    embeddings: Option<Tensor>,
}

#[pymethods]
impl PyDataset {
    /// Load a quadruple TSV and prepare it with the config's split and horizon.
    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: &str, config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        let raw = tkgmem::TkgDataset::load_tsv(path.as_ref(), cfg.has_header).map_err(to_py)?;
        Ok(Self {
            inner: prepare_loaded(&raw, &cfg).map_err(to_py)?,
            embeddings: None,
        })
    }

    /// Synthetic drift dataset; its type-structured embeddings travel with it.
    #[staticmethod]
    #[pyo3(signature = (types = 4, entities_per_type = 50, relations_per_type = 3, timestamps = 60, drift = 0.3, emerging = 0.2, dim = 32, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        types: usize,
        entities_per_type: usize,
        relations_per_type: usize,
        timestamps: usize,
        drift: f64,
        emerging: f64,
        dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            types,
            entities_per_type,
            relations_per_type,
            timestamps,
            drift,
            emerging,
            embed_dim: dim,
            seed,
            ..SyntheticSpec::default()
        };
        let g = generate(&spec).map_err(to_py)?;
        let mut cfg = tkgmem::Config::default();
        cfg.split = spec.split;
        Ok(Self {
            inner: prepare_loaded(&g.dataset, &cfg).map_err(to_py)?,
            embeddings: Some(g.embeddings),
        })
    }

    #[getter]
    fn num_entities(&self) -> usize {
        self.inner.num_entities()
    }

    #[getter]
    fn num_relations(&self) -> usize {
        self.inner.num_relations()
    }

    #[getter]
    fn num_facts(&self) -> usize {
        self.inner.facts().len()
    }

    fn timestamps(&self) -> Vec<u64> {
        self.inner.timestamps()
    }

    /// `(train_end, valid_end)` timestamps.
    fn bounds(&self) -> PyResult<(u64, u64)> {
        let b = self.inner.require_bounds().map_err(to_py)?;
        Ok((b.train_end, b.valid_end))
    }

    fn entity_id(&self, name: &str) -> Option<usize> {
        self.inner.entities().id(name)
    }

    fn entity_name(&self, id: usize) -> PyResult<String> {
        if id >= self.inner.num_entities() {
            return Err(PyValueError::new_err(format!("entity id {id} out of range")));
        }
        Ok(self.inner.entities().name(id).to_string())
    }

    fn facts(&self) -> Vec<(usize, usize, usize, u64)> {
        self.inner
            .facts()
            .iter()
            .map(|f| (f.subject, f.relation, f.object, f.time))
            .collect()
    }
}

/// Parameters, frozen embeddings and configuration.
#[pyclass(name = "Model")]
struct PyModel {
    inner: tkgmem::Model,
}

fn report_dict<'py>(py: Python<'py>, rep: &tkgmem::RankReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, m) in rep.aggregates() {
        let s = PyDict::new(py);
        s.set_item("mrr", m.mrr)?;
        s.set_item("hits3", m.hits3)?;
        s.set_item("hits10", m.hits10)?;
        s.set_item("n", m.n)?;
        d.set_item(name, s)?;
    }
    let ranks: Vec<usize> = rep.records.iter().map(|r| r.rank).collect();
    d.set_item("ranks", ranks)?;
    Ok(d)
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: PyConfig, dataset: &PyDataset) -> PyResult<Self> {
        let inner = match &dataset.embeddings {
            Some(t) => tkgmem::Model::with_embeddings(&config.inner, &dataset.inner, EmbeddingSource::from_table(t.clone())),
            None => tkgmem::Model::new(&config.inner, &dataset.inner),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Train with early stopping and keep the best parameters. Returns the
    /// per-epoch curve as dicts.
    fn fit<'py>(&mut self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let out = tkgmem::fit(self.inner.clone(), &dataset.inner, &mut |_| {}).map_err(to_py)?;
        self.inner = out.best;
        out.curve
            .iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("epoch", m.epoch)?;
                d.set_item("train_loss", m.train_loss)?;
                d.set_item("valid_mrr_all", m.valid_mrr_all)?;
                d.set_item("valid_mrr_emerging", m.valid_mrr_emerging)?;
                d.set_item("seconds", m.seconds)?;
                Ok(d)
            })
            .collect()
    }

    /// Filtered-ranking evaluation of a split after a fresh memory replay.
    #[pyo3(signature = (dataset, split = "test", mode = "full"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, split: &str, mode: &str) -> PyResult<Bound<'py, PyDict>> {
        let mode = match mode {
            "full" => ReprMode::Full,
            "zero" => ReprMode::ZeroGate,
            other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
        };
        let ctx = EvalContext::new(&dataset.inner, self.inner.config.filter).map_err(to_py)?;
        let rep = evaluate(&self.inner, &dataset.inner, &ctx, split_of(split)?, mode).map_err(to_py)?;
        report_dict(py, &rep)
    }

    /// Learnable-scalar count per parameter group.
    fn param_counts(&self) -> Vec<(String, usize)> {
        self.inner
            .params
            .group_counts()
            .into_iter()
            .map(|(g, n)| (g.name().to_string(), n))
            .collect()
    }

    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8], dataset: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: tkgmem::Model::from_bytes_with(
                data,
                &dataset.inner,
                dataset.embeddings.clone().map(EmbeddingSource::from_table),
            )
            .map_err(to_py)?,
        })
    }
}

/// Per-entity memory states with EMA updates.
#[pyclass(name = "MemoryBank")]
struct PyMemoryBank {
    inner: tkgmem::MemoryBank,
}

#[pymethods]
impl PyMemoryBank {
    #[new]
    #[pyo3(signature = (entities, dim, buffer_len = 0))]
    fn new(entities: usize, dim: usize, buffer_len: usize) -> Self {
        Self {
            inner: tkgmem::MemoryBank::new(entities, dim, buffer_len),
        }
    }

    /// `m ← σ(ρ)·m + (1 − σ(ρ))·x` for one entity.
    fn update_ema(&mut self, entity: usize, signal: Vec<f64>, rho: f64) -> PyResult<()> {
        let op = Operator {
            kind: OperatorKind::Ema(EmaVariant::Shared),
            params: vec![Tensor::scalar(rho)],
            heads: 1,
        };
        let q = vec![0.0; signal.len()];
        self.inner.update(&op, entity, &signal, &q, None).map_err(to_py)
    }

    fn memory(&self, entity: usize) -> PyResult<Vec<f64>> {
        if entity >= self.inner.entities() {
            return Err(PyValueError::new_err(format!("entity {entity} out of range")));
        }
        Ok(self.inner.memory(entity).to_vec())
    }

    fn count(&self, entity: usize) -> PyResult<u64> {
        if entity >= self.inner.entities() {
            return Err(PyValueError::new_err(format!("entity {entity} out of range")));
        }
        Ok(self.inner.count(entity))
    }

    /// Adaptive gate for weight `w_g` of shape `[d, 2d]`; zero before the
    /// first update.
    fn gate(&self, entity: usize, h: Vec<f64>, w_g: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.gate(entity, &h, &matrix(w_g)?).map_err(to_py)
    }

    fn reset(&mut self) {
        self.inner.reset_all();
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.snapshot())
    }

    #[staticmethod]
    fn restore(data: &[u8], entities: usize) -> PyResult<Self> {
        Ok(Self {
            inner: tkgmem::MemoryBank::restore(data, entities).map_err(to_py)?,
        })
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

/// Filtered rank with pessimistic ties.
#[pyfunction]
#[pyo3(signature = (scores, truth, filter = Vec::new()))]
fn filtered_rank(scores: Vec<f64>, truth: usize, filter: Vec<usize>) -> PyResult<usize> {
    if truth >= scores.len() {
        return Err(PyValueError::new_err("true object outside the score vector"));
    }
    Ok(tkgmem::filtered_rank(&scores, truth, &filter))
}

/// `(1 − g) ⊙ h + g ⊙ m`.
#[pyfunction]
fn fuse(h: Vec<f64>, m: Vec<f64>, g: Vec<f64>) -> PyResult<Vec<f64>> {
    if h.len() != m.len() || h.len() != g.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(memory::fuse(&h, &m, &g))
}

#[pymodule]
fn tkgmem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_function(wrap_pyfunction!(filtered_rank, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    Ok(())
}
