//! Python bindings: build or load models and corpora, calibrate and run the
//! engine, and call the scoring helpers directly.
//!
//! Configs go in and reports come out as plain dicts, round-tripped through
//! the same JSON the command-line tool reads and writes.

use std::sync::Arc;

use pp_core::corpus::{generate_topic_corpus, sample_from_model, CorpusConfig};
use pp_core::engine::{calibrated_history, EngineConfig};
use pp_core::eval::PerfRuntime;
use pp_core::history::{FusionMode, HistoricalState};
use pp_core::model::{generate_synthetic_model, ModelConfig};
use pp_core::probe::ProbeConfig;
use pp_core::tensor::Matrix;
use pp_core::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Arc<pp_core::model::Model>,
}

#[pymethods]
impl PyModel {
    /// Seeded synthetic model; omitted shape fields take the library defaults.
    #[staticmethod]
    #[pyo3(signature = (seed=0, layers=None, d_model=None, heads=None, mlp_hidden=None, vocab=None))]
    fn generate(
        seed: u64,
        layers: Option<usize>,
        d_model: Option<usize>,
        heads: Option<usize>,
        mlp_hidden: Option<usize>,
        vocab: Option<usize>,
    ) -> PyResult<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            num_layers: layers.unwrap_or(d.num_layers),
            d_model: d_model.unwrap_or(d.d_model),
            num_heads: heads.unwrap_or(d.num_heads),
            mlp_hidden: mlp_hidden.unwrap_or(d.mlp_hidden),
            vocab_size: vocab.unwrap_or(d.vocab_size),
            seed,
            ..d
        };
        let inner = generate_synthetic_model(&cfg).map_err(py_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = pp_core::model::Model::load(path).map_err(py_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks()
    }
}

#[pyclass(name = "Corpus", frozen)]
struct PyCorpus {
    inner: pp_core::corpus::Corpus,
}

fn corpus_config(vocab: usize, sequences: usize, seq_len: usize, seed: u64, topics: usize, segment: usize) -> CorpusConfig {
    CorpusConfig { vocab_size: vocab, sequences, seq_len, seed, num_topics: topics, segment_sequences: segment }
}

#[pymethods]
impl PyCorpus {
    /// Zipf tokens drawn from per-topic vocabularies.
    #[staticmethod]
    #[pyo3(signature = (vocab, sequences, seq_len, seed=0, topics=8, segment=4))]
    fn topic(vocab: usize, sequences: usize, seq_len: usize, seed: u64, topics: usize, segment: usize) -> PyResult<Self> {
        let cfg = corpus_config(vocab, sequences, seq_len, seed, topics, segment);
        Ok(Self { inner: generate_topic_corpus(&cfg).map_err(py_err)? })
    }

    /// Sequences sampled from `model`.
    #[staticmethod]
    #[pyo3(signature = (model, sequences, seq_len, seed=0, topics=8, segment=4))]
    fn sample(model: &PyModel, sequences: usize, seq_len: usize, seed: u64, topics: usize, segment: usize) -> PyResult<Self> {
        let cfg = corpus_config(model.inner.config().vocab_size, sequences, seq_len, seed, topics, segment);
        Ok(Self { inner: sample_from_model(&model.inner, &cfg, 16).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: pp_core::corpus::Corpus::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn tokens(&self) -> Vec<u32> {
        self.inner.tokens().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Engine")]
struct PyEngine {
    inner: pp_core::engine::Engine,
}

#[pymethods]
impl PyEngine {
    /// `config` is a dict in the engine section format of the JSON config.
    #[new]
    #[pyo3(signature = (model, config=None))]
    fn new(model: &PyModel, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: EngineConfig = match config {
            Some(c) => from_py(c)?,
            None => EngineConfig::default(),
        };
        let inner = pp_core::engine::Engine::new(model.inner.clone(), cfg).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Seeds the history from the first `batch_size` x `seq_len` tokens.
    fn calibrate(&mut self, corpus: &PyCorpus, batch_size: usize, seq_len: usize) -> PyResult<()> {
        let batch = corpus.inner.batch(0, batch_size, seq_len).map_err(py_err)?;
        self.inner.calibrate(&batch).map_err(py_err)
    }

    fn load_history(&mut self, path: &str) -> PyResult<()> {
        let states = pp_core::history::load_history(path, self.inner.config().lambda).map_err(py_err)?;
        self.inner.set_history(states).map_err(py_err)
    }

    fn save_history(&self, path: &str) -> PyResult<()> {
        let states = self.inner.history().ok_or_else(|| PyValueError::new_err("engine has no history"))?;
        pp_core::history::save_history(states, path).map_err(py_err)
    }

    /// Returns `(aggregate, records)` as a dict and a list of dicts.
    #[pyo3(signature = (corpus, batch_size, seq_len, max_batches=None))]
    fn run<'py>(
        &mut self,
        py: Python<'py>,
        corpus: &PyCorpus,
        batch_size: usize,
        seq_len: usize,
        max_batches: Option<usize>,
    ) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
        let report = self.inner.run_corpus(&corpus.inner, batch_size, seq_len, max_batches, None).map_err(py_err)?;
        Ok((to_py(py, &report.aggregate)?, to_py(py, &report.records)?))
    }
}

/// Per-sample block statistics for a snapshot, without an engine.
#[pyfunction]
#[pyo3(signature = (model, corpus, batch_size, seq_len, path, lambda_=pp_core::history::DEFAULT_LAMBDA))]
fn calibrate_history(model: &PyModel, corpus: &PyCorpus, batch_size: usize, seq_len: usize, path: &str, lambda_: f64) -> PyResult<()> {
    let batch = corpus.inner.batch(0, batch_size, seq_len).map_err(py_err)?;
    let states = calibrated_history(&model.inner, &batch, lambda_).map_err(py_err)?;
    pp_core::history::save_history(&states, path).map_err(py_err)
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

/// PPsp channel scores of a weight matrix (rows: outputs, columns: channels).
#[pyfunction]
fn ppsp_scores(weight: Vec<Vec<f32>>, xsq: Vec<f32>) -> PyResult<Vec<f32>> {
    Ok(pp_core::metric::ppsp_scores(&matrix(weight)?, &xsq).map_err(py_err)?.scores)
}

#[pyfunction]
fn wanda_sp_scores(weight: Vec<Vec<f32>>, xnorm: Vec<f32>) -> PyResult<Vec<f32>> {
    Ok(pp_core::metric::wanda_sp_scores(&matrix(weight)?, &xnorm).map_err(py_err)?.scores)
}

/// Retained unit indices after pruning `ratio` of them.
#[pyfunction]
#[pyo3(signature = (scores, ratio, group=1))]
fn select_mask(scores: Vec<f32>, ratio: f64, group: usize) -> PyResult<Vec<usize>> {
    Ok(pp_core::metric::select_mask(0, &scores, ratio, group).map_err(py_err)?.retained().to_vec())
}

/// Fuses one probe statistic with one historical statistic.
#[pyfunction]
#[pyo3(signature = (probe, history, mode="importance_scaled"))]
fn fuse(probe: f32, history: f32, mode: &str) -> PyResult<f32> {
    let mode: FusionMode = mode.parse().map_err(py_err)?;
    let hist = HistoricalState::new(Matrix::new(1, 1, vec![history]).map_err(py_err)?, 0.0).map_err(py_err)?;
    let p = Matrix::new(1, 1, vec![probe]).map_err(py_err)?;
    Ok(pp_core::history::fuse(&p, &hist, &[0], mode).map_err(py_err)?.data()[0])
}

#[pyfunction]
fn jaccard(a: Vec<usize>, b: Vec<usize>) -> f64 {
    pp_core::eval::jaccard(&a, &b)
}

#[pyfunction]
fn prr(perf_dense: f64, perf_pruned: f64, runtime_dense: f64, runtime_pruned: f64) -> PyResult<f64> {
    pp_core::eval::prr(&PerfRuntime { perf_dense, perf_pruned, runtime_dense, runtime_pruned }).map_err(py_err)
}

/// Dense and probe MACs for a model shape; LLaMA-2-7B shapes when `model` is None.
#[pyfunction]
#[pyo3(signature = (batch, seq, probe_batch=0.05, probe_seq=0.5, model=None))]
fn flops_estimate<'py>(
    py: Python<'py>,
    batch: usize,
    seq: usize,
    probe_batch: f64,
    probe_seq: f64,
    model: Option<&PyModel>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = model.map_or_else(pp_core::flops::llama2_7b_shapes, |m| m.inner.config().clone());
    let probe = ProbeConfig { batch_frac: probe_batch, seq_frac: probe_seq, ..ProbeConfig::default() };
    to_py(py, &pp_core::flops::estimate(&probe, &cfg, batch, seq).map_err(py_err)?)
}

#[pymodule]
pub fn probe_pruning(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(calibrate_history, m)?)?;
    m.add_function(wrap_pyfunction!(ppsp_scores, m)?)?;
    m.add_function(wrap_pyfunction!(wanda_sp_scores, m)?)?;
    m.add_function(wrap_pyfunction!(select_mask, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(prr, m)?)?;
    m.add_function(wrap_pyfunction!(flops_estimate, m)?)?;
    Ok(())
}
