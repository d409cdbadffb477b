//! Python bindings: numeric primitives, merging, clustering and the bundle
//! workflow (generate, train, build, evaluate).

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use saef_core::bundle::ExpertBundle;
use saef_core::clustering;
use saef_core::config::RunConfig;
use saef_core::forest::{self, build_hierarchy};
use saef_core::inference;
use saef_core::numeric::{self, ParamVector, VisualPrototype};
use saef_core::simulator::pipeline::{evaluate_trained, train_stream, EvalSettings, Method};
use saef_core::simulator::SyntheticWorld;
use saef_core::SaefError;

fn py_err(e: SaefError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn params(v: Vec<f64>) -> PyResult<ParamVector> {
    ParamVector::new(v).map_err(py_err)
}

/// Softmax of `logits`; returns `(probs, entropy)`.
#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let d = numeric::softmax(&logits).map_err(py_err)?;
    Ok((d.probs, d.entropy))
}

#[pyfunction]
fn shannon_entropy(probs: Vec<f64>) -> PyResult<f64> {
    numeric::shannon_entropy(&probs).map_err(py_err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    numeric::cosine_similarity(&a, &b).map_err(py_err)
}

#[pyfunction]
fn sign_max_merge(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(forest::sign_max_merge(&params(a)?, &params(b)?).map_err(py_err)?.into_inner())
}

#[pyfunction]
fn global_root_merge(roots: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let roots = roots.into_iter().map(params).collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&ParamVector> = roots.iter().collect();
    Ok(forest::global_root_merge(&refs).map_err(py_err)?.into_inner())
}

/// Leaf-count-weighted mean of two prototypes; returns `(values, count)`.
#[pyfunction]
fn merge_prototypes(a: Vec<f64>, count_a: usize, b: Vec<f64>, count_b: usize) -> PyResult<(Vec<f64>, usize)> {
    let a = VisualPrototype::new(a, count_a).map_err(py_err)?;
    let b = VisualPrototype::new(b, count_b).map_err(py_err)?;
    let m = forest::merge_prototypes(&a, &b).map_err(py_err)?;
    Ok((m.values().to_vec(), m.leaf_count()))
}

#[pyfunction]
fn fusion_weights(entropies: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    inference::fusion_weights(&entropies, tau).map_err(py_err)
}

#[pyfunction]
fn theoretical_speedup(n_leaves: usize, n_trees: usize, mean_depth: f64) -> f64 {
    inference::theoretical_speedup(n_leaves, n_trees, mean_depth)
}

/// Cluster labels from k-means++ / Lloyd.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    Ok(clustering::kmeans(&points, k, seed, clustering::DEFAULT_MAX_ITERS).map_err(py_err)?.labels)
}

#[pyfunction]
fn silhouette_score(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let assignment = clustering::ClusterAssignment::from_labels(&labels).map_err(py_err)?;
    clustering::silhouette_score(&points, &assignment).map_err(py_err)
}

/// Silhouette search over k; returns `(labels, [(k, score), ...])`.
#[pyfunction]
#[pyo3(signature = (points, seed=0))]
fn find_optimal_k(points: Vec<Vec<f64>>, seed: u64) -> PyResult<(Vec<usize>, Vec<(usize, f64)>)> {
    let range = clustering::default_k_range(points.len());
    let sel = clustering::find_optimal_k(&points, range, seed).map_err(py_err)?;
    Ok((sel.assignment.labels, sel.scores))
}

/// Run configuration. Keyword arguments use the same keys as the
/// `key=value` configuration files.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(kwargs) = kwargs {
            for (k, v) in kwargs.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &v.str()?.to_string()).map_err(py_err)?;
            }
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_kv(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::parse_kv(text).map_err(py_err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn tasks(&self) -> usize {
        self.inner.tasks
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn tau_e(&self) -> f64 {
        self.inner.tau_e
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", self.inner.to_kv().trim().replace('\n', ", "))
    }
}

/// Headline numbers of one evaluation.
#[pyclass(name = "EvalSummary", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyEvalSummary {
    method: String,
    abar: f64,
    a_t: f64,
    mean_depth: f64,
    theoretical_speedup: f64,
    mean_evaluations: f64,
    n_trees: usize,
    /// Lower-triangular accuracy rows.
    accuracy: Vec<Vec<f64>>,
}

#[pymethods]
impl PyEvalSummary {
    fn __repr__(&self) -> String {
        format!(
            "EvalSummary(method={}, abar={:.4}, a_t={:.4}, mean_depth={:.3}, speedup={:.3}, evals={:.3})",
            self.method, self.abar, self.a_t, self.mean_depth, self.theoretical_speedup, self.mean_evaluations
        )
    }
}

/// An expert bundle: world, adapters, statistics and hierarchy.
#[pyclass(name = "ExpertBundle", skip_from_py_object)]
struct PyExpertBundle {
    inner: ExpertBundle,
}

#[pymethods]
impl PyExpertBundle {
    /// Fresh synthetic world, untrained.
    #[staticmethod]
    fn generate(config: &PyRunConfig) -> PyResult<Self> {
        let world = SyntheticWorld::generate(&config.inner).map_err(py_err)?;
        Ok(Self { inner: ExpertBundle::from_world(&config.inner, world) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExpertBundle::load(&path).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ExpertBundle::from_json(text).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.inner.config.clone() }
    }

    #[getter]
    fn n_tasks(&self) -> usize {
        self.inner.tasks.len()
    }

    #[getter]
    fn is_trained(&self) -> bool {
        self.inner.is_trained()
    }

    /// Trees in the stored hierarchy, or `None` before `build`.
    #[getter]
    fn n_trees(&self) -> Option<usize> {
        self.inner.hierarchy.as_ref().map(|h| h.n_trees())
    }

    #[getter]
    fn tree_heights(&self) -> Option<Vec<usize>> {
        self.inner.hierarchy.as_ref().map(|h| h.tree_heights())
    }

    /// Trains every task adapter; releases the GIL while running.
    #[pyo3(signature = (config=None))]
    fn train(&mut self, py: Python<'_>, config: Option<&PyRunConfig>) -> PyResult<()> {
        let cfg = config.map_or_else(|| self.inner.config.clone(), |c| c.inner.clone());
        let world = &self.inner.world;
        let trained = py.detach(|| train_stream(world, &cfg)).map_err(py_err)?;
        self.inner.attach_training(&cfg, &trained).map_err(py_err)
    }

    /// Builds the hierarchy. `k` is `"auto"`, `"flat"` or an integer string.
    #[pyo3(signature = (k=None, strategy=None))]
    fn build(&mut self, k: Option<&str>, strategy: Option<&str>) -> PyResult<Vec<(usize, f64)>> {
        let mut cfg = self.inner.config.clone();
        if let Some(k) = k {
            cfg.k_policy = k.parse().map_err(py_err)?;
        }
        if let Some(s) = strategy {
            cfg.strategy = s.parse().map_err(py_err)?;
        }
        let records = self.inner.task_records().map_err(py_err)?;
        let h = build_hierarchy(&records, cfg.k_policy, cfg.strategy, cfg.seed).map_err(py_err)?;
        let scores = h.silhouettes.clone();
        self.inner.config = cfg;
        self.inner.hierarchy = Some(h);
        Ok(scores)
    }

    /// Staged evaluation of `"saef"` (uses the stored hierarchy at the last
    /// stage when present) or `"flat"`.
    #[pyo3(signature = (method="saef", tau=None, tau_e=None))]
    fn evaluate(&self, py: Python<'_>, method: &str, tau: Option<f64>, tau_e: Option<f64>) -> PyResult<PyEvalSummary> {
        let method: Method = method.parse().map_err(py_err)?;
        let mut settings = EvalSettings::from_config(&self.inner.config, method);
        settings.tau = tau.unwrap_or(settings.tau);
        settings.tau_e = tau_e.unwrap_or(settings.tau_e);
        let stored = match method {
            Method::Saef => self.inner.hierarchy.as_ref(),
            Method::Flat => None,
        };
        if let Some(h) = stored {
            settings.k_policy = h.k_policy;
            settings.strategy = h.strategy;
        }
        let bundle = &self.inner;
        let result = py
            .detach(|| {
                let trained = bundle.trained_stream()?;
                evaluate_trained(&trained, &bundle.world, &settings, stored)
            })
            .map_err(py_err)?;
        Ok(PyEvalSummary {
            method: method.to_string(),
            abar: result.abar,
            a_t: result.a_last,
            mean_depth: result.cost.mean_depth,
            theoretical_speedup: result.cost.theoretical_speedup,
            mean_evaluations: result.cost.mean_evaluations,
            n_trees: result.cost.n_trees,
            accuracy: result.accuracy.rows().to_vec(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "ExpertBundle(tasks={}, trained={}, trees={:?})",
            self.inner.tasks.len(),
            self.inner.is_trained(),
            self.n_trees()
        )
    }
}

#[pymodule]
fn saef(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(sign_max_merge, m)?)?;
    m.add_function(wrap_pyfunction!(global_root_merge, m)?)?;
    m.add_function(wrap_pyfunction!(merge_prototypes, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_weights, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette_score, m)?)?;
    m.add_function(wrap_pyfunction!(find_optimal_k, m)?)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyEvalSummary>()?;
    m.add_class::<PyExpertBundle>()?;
    Ok(())
}
