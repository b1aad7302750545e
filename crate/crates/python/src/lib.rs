//! Python bindings: corpora, search, query sessions, CAV training and the
//! oracle evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use refineir::cav::{DEFAULT_LABELED_POOL, DEFAULT_STABILITY_N, DEFAULT_STABILITY_TRIALS};
use refineir::knn::DEFAULT_K;
use refineir::{Error, Rect, SearchFilter, Tier, TrainerConfig};
use serde::Serialize;

create_exception!(
    refineir,
    RefineirError,
    PyValueError,
    "Invalid data or arguments."
);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => RefineirError::new_err(other.to_string()),
    }
}

/// Converts a serializable value to Python objects through JSON.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn trainer(l2: Option<f64>) -> TrainerConfig {
    let mut cfg = TrainerConfig::default();
    if let Some(l2) = l2 {
        cfg.l2 = l2;
    }
    cfg
}

type Hit = (String, f64, String);

fn hits(results: Vec<refineir::RankedResult>) -> Vec<Hit> {
    results
        .into_iter()
        .map(|r| (r.image_id, r.distance, r.diagnosis))
        .collect()
}

/// A validated, immutable corpus.
#[pyclass(name = "Corpus", module = "refineir", frozen)]
struct PyCorpus {
    inner: Arc<refineir::Corpus>,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(refineir::load_corpus(path).map_err(py_err)?),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    /// Same records under the given metric ("l2" or "cosine").
    fn with_metric(&self, metric: &str) -> PyResult<Self> {
        let corpus = (*self.inner).clone().with_metric(parse(metric)?);
        Ok(Self {
            inner: Arc::new(corpus),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    #[getter]
    fn categories(&self) -> Vec<String> {
        self.inner.categories().to_vec()
    }

    #[getter]
    fn concepts(&self) -> Vec<String> {
        self.inner.concepts().to_vec()
    }

    #[getter]
    fn median_norm(&self) -> Option<f64> {
        self.inner.median_norm()
    }

    #[pyo3(signature = (tier = None))]
    fn ids(&self, tier: Option<&str>) -> PyResult<Vec<String>> {
        Ok(match tier {
            Some(t) => self
                .inner
                .tier_records(parse(t)?)
                .map(|r| r.id.clone())
                .collect(),
            None => self.inner.records().iter().map(|r| r.id.clone()).collect(),
        })
    }

    /// The record as a dict with the same fields as the corpus file.
    fn record(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.get_record(id).map_err(py_err)?)
    }

    fn embedding(&self, id: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.get_record(id).map_err(py_err)?.embedding.clone())
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(records={}, dimension={})",
            self.inner.len(),
            self.inner.dimension()
        )
    }
}

/// A trained concept activation vector.
#[pyclass(
    name = "ConceptVector",
    module = "refineir",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyConceptVector {
    inner: refineir::ConceptVector,
}

#[pymethods]
impl PyConceptVector {
    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn direction(&self) -> Vec<f64> {
        self.inner.direction.clone()
    }

    #[getter]
    fn n_positive(&self) -> usize {
        self.inner.n_positive
    }

    #[getter]
    fn n_negative(&self) -> usize {
        self.inner.n_negative
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// The registry-line representation as a dict.
    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "ConceptVector(name={:?}, n_positive={}, n_negative={})",
            self.inner.name, self.inner.n_positive, self.inner.n_negative
        )
    }
}

/// Named CAVs available to sliders.
#[pyclass(name = "CavRegistry", module = "refineir")]
#[derive(Default)]
struct PyCavRegistry {
    inner: refineir::CavRegistry,
}

#[pymethods]
impl PyCavRegistry {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: refineir::CavRegistry::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn insert(&mut self, cav: &PyConceptVector) {
        self.inner.insert(cav.inner.clone());
    }

    fn get(&self, name: &str) -> Option<PyConceptVector> {
        self.inner
            .get(name)
            .map(|c| PyConceptVector { inner: c.clone() })
    }

    fn names(&self) -> Vec<String> {
        self.inner.iter().map(|c| c.name.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.contains(name)
    }
}

/// Refinement state of one query: crop, pinned examples, sliders, filter.
#[pyclass(name = "QueryState", module = "refineir")]
struct PyQueryState {
    corpus: Arc<refineir::Corpus>,
    inner: refineir::QueryState,
}

#[pymethods]
impl PyQueryState {
    /// Starts from a FULL-tier image. `alpha` defaults to the corpus median norm.
    #[new]
    #[pyo3(signature = (corpus, base_image_id, alpha = None))]
    fn new(corpus: &PyCorpus, base_image_id: &str, alpha: Option<f64>) -> PyResult<Self> {
        let inner = match alpha {
            Some(a) => refineir::QueryState::with_scale(&corpus.inner, base_image_id, a),
            None => refineir::QueryState::new(&corpus.inner, base_image_id),
        }
        .map_err(py_err)?;
        Ok(Self {
            corpus: Arc::clone(&corpus.inner),
            inner,
        })
    }

    /// Snaps the rectangle to the nearest precomputed crop and searches its tier.
    fn crop(&mut self, py: Python<'_>, x: f64, y: f64, w: f64, h: f64) -> PyResult<Py<PyAny>> {
        let snapped = refineir::snap_crop(
            &self.corpus,
            self.inner.base_image_id(),
            Rect::new(x, y, w, h),
        )
        .map_err(py_err)?;
        self.inner
            .refine_by_region(&self.corpus, &snapped)
            .map_err(py_err)?;
        to_py(py, &snapped)
    }

    fn clear_crop(&mut self) {
        self.inner.clear_crop();
    }

    fn pin(&mut self, ids: Vec<String>) -> PyResult<()> {
        self.inner
            .refine_by_example(&self.corpus, &ids)
            .map_err(py_err)
    }

    fn set_slider(&mut self, registry: &PyCavRegistry, concept: &str, value: f64) -> PyResult<()> {
        self.inner
            .set_slider(&registry.inner, concept, value)
            .map_err(py_err)
    }

    fn reset_sliders(&mut self) {
        self.inner.reset_sliders();
    }

    #[pyo3(signature = (categories = None))]
    fn set_category_filter(&mut self, categories: Option<Vec<String>>) -> PyResult<()> {
        self.inner
            .set_category_filter(&self.corpus, categories)
            .map_err(py_err)
    }

    #[getter]
    fn base_image_id(&self) -> String {
        self.inner.base_image_id().to_owned()
    }

    #[getter]
    fn active_crop(&self) -> Option<String> {
        self.inner.active_crop().map(str::to_owned)
    }

    #[getter]
    fn pinned_example_ids(&self) -> Vec<String> {
        self.inner.pinned_example_ids().to_vec()
    }

    #[getter]
    fn sliders(&self) -> BTreeMap<String, f64> {
        self.inner.sliders().clone()
    }

    #[getter]
    fn search_tier(&self) -> PyResult<String> {
        Ok(self
            .inner
            .search_tier(&self.corpus)
            .map_err(py_err)?
            .to_string())
    }

    /// Effective query embedding.
    #[pyo3(signature = (registry = None))]
    fn compose(&self, registry: Option<&PyCavRegistry>) -> PyResult<Vec<f64>> {
        let empty = refineir::CavRegistry::new();
        let reg = registry.map_or(&empty, |r| &r.inner);
        self.inner.compose(&self.corpus, reg).map_err(py_err)
    }

    /// Ranked `(id, distance, diagnosis)` results under the current state.
    #[pyo3(signature = (registry = None, k = DEFAULT_K))]
    fn results(&self, registry: Option<&PyCavRegistry>, k: usize) -> PyResult<Vec<Hit>> {
        let query = self.compose(registry)?;
        let filter = self.inner.search_filter(&self.corpus).map_err(py_err)?;
        Ok(hits(
            refineir::search(&self.corpus, &query, &filter, k).map_err(py_err)?,
        ))
    }
}

/// Exact k-NN over one tier; returns `(id, distance, diagnosis)` tuples.
#[pyfunction]
#[pyo3(signature = (corpus, query, k = 15, tier = "FULL", categories = None, exclude = None))]
fn search(
    corpus: &PyCorpus,
    query: Vec<f64>,
    k: usize,
    tier: &str,
    categories: Option<Vec<String>>,
    exclude: Option<Vec<String>>,
) -> PyResult<Vec<Hit>> {
    let mut filter = SearchFilter::tier(parse::<Tier>(tier)?);
    if let Some(c) = categories {
        filter = filter.with_categories(c);
    }
    for id in exclude.into_iter().flatten() {
        filter = filter.excluding(id);
    }
    Ok(hits(
        refineir::search(&corpus.inner, &query, &filter, k).map_err(py_err)?,
    ))
}

/// Trains a CAV from corpus labels, against random negatives or an opposing concept.
#[pyfunction]
#[pyo3(signature = (corpus, concept, opposing = None, pool = DEFAULT_LABELED_POOL, seed = 0, l2 = None))]
fn train_cav(
    corpus: &PyCorpus,
    concept: &str,
    opposing: Option<&str>,
    pool: usize,
    seed: u64,
    l2: Option<f64>,
) -> PyResult<PyConceptVector> {
    let hyper = trainer(l2);
    let inner = match opposing {
        Some(o) => refineir::train_relative_cav(&corpus.inner, concept, o, &hyper, seed),
        None => refineir::train_random_cav(&corpus.inner, concept, Some(pool), &hyper, seed),
    }
    .map_err(py_err)?;
    Ok(PyConceptVector { inner })
}

/// Cosine similarity of small-sample CAVs to the full-data CAV, per training size.
#[pyfunction]
#[pyo3(signature = (corpus, concept, n_values = DEFAULT_STABILITY_N.to_vec(), trials = DEFAULT_STABILITY_TRIALS, seed = 0, l2 = None))]
fn stability_curve(
    py: Python<'_>,
    corpus: &PyCorpus,
    concept: &str,
    n_values: Vec<usize>,
    trials: usize,
    seed: u64,
    l2: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let curve = refineir::stability_curve(
        &corpus.inner,
        concept,
        &n_values,
        trials,
        &trainer(l2),
        seed,
    )
    .map_err(py_err)?;
    to_py(py, &curve)
}

/// Generates a planted-direction corpus. Keyword arguments override the
/// default generator spec; returns `(corpus, directions)` where `directions`
/// maps concept names to their planted unit vectors.
#[pyfunction]
#[pyo3(signature = (**spec))]
fn generate_corpus(
    spec: Option<&Bound<'_, pyo3::types::PyDict>>,
) -> PyResult<(PyCorpus, BTreeMap<String, Vec<f64>>)> {
    let spec: refineir::SyntheticSpec = match spec {
        None => refineir::SyntheticSpec::default(),
        Some(kwargs) => {
            let text: String = kwargs
                .py()
                .import("json")?
                .call_method1("dumps", (kwargs,))?
                .extract()?;
            serde_json::from_str(&text).map_err(|e| RefineirError::new_err(e.to_string()))?
        }
    };
    let synth = refineir::generate_corpus(&spec).map_err(py_err)?;
    let directions = spec
        .concept_names()
        .into_iter()
        .zip(synth.directions.directions.iter().cloned())
        .collect();
    Ok((
        PyCorpus {
            inner: Arc::new(synth.corpus),
        },
        directions,
    ))
}

/// Replays seeded queries with and without one tool; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (corpus, tool, concept, n_queries = 100, seed = 0, cav = None))]
fn run_tool_eval(
    py: Python<'_>,
    corpus: &PyCorpus,
    tool: &str,
    concept: &str,
    n_queries: usize,
    seed: u64,
    cav: Option<&PyConceptVector>,
) -> PyResult<Py<PyAny>> {
    let mut cfg = refineir::EvalConfig::new(concept, n_queries, seed);
    cfg.cav = cav.map(|c| c.inner.clone());
    let report = refineir::run_tool_eval(&corpus.inner, parse(tool)?, &cfg).map_err(py_err)?;
    to_py(py, &report)
}

/// Euclidean distance between two embeddings.
#[pyfunction]
fn distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    refineir::distance(&a, &b).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "refineir")]
fn refineir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RefineirError", m.py().get_type::<RefineirError>())?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyConceptVector>()?;
    m.add_class::<PyCavRegistry>()?;
    m.add_class::<PyQueryState>()?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(distance, m)?)?;
    m.add_function(wrap_pyfunction!(train_cav, m)?)?;
    m.add_function(wrap_pyfunction!(stability_curve, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_tool_eval, m)?)?;
    Ok(())
}
