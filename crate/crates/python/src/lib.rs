//! Python bindings: IR functions, micro-traces, vocabularies, models and
//! the similarity metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use semtrace::corpus::{apply_pipeline, check_equivalence, gen_function, TransformPass};
use semtrace::encoding::{build_vocab, tokenize_trace, Vocab};
use semtrace::ir::{parse_function, parse_irfn, render, render_irfn, Dialect, IrFunction};
use semtrace::microtrace::{dummy_trace, micro_execute, MicroTrace, TracerConfig};
use semtrace::neural::{save_checkpoint, Model, ModelConfig};
use semtrace::pipeline;
use semtrace::similarity;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn dialect(tag: &str) -> PyResult<Dialect> {
    Dialect::from_tag(tag).ok_or_else(|| PyValueError::new_err(format!("unknown dialect {tag:?} (archA or archB)")))
}

/// A function in one of the two IR dialects.
#[pyclass(name = "Function", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFunction(IrFunction);

#[pymethods]
impl PyFunction {
    /// Parses instruction lines in the given dialect.
    #[staticmethod]
    #[pyo3(signature = (text, dialect_tag = "archA"))]
    fn parse(text: &str, dialect_tag: &str) -> PyResult<Self> {
        parse_function(text, dialect(dialect_tag)?).map(PyFunction).map_err(value_err)
    }

    /// Parses a `.irfn` document with its `fn <id> @<dialect>` header.
    #[staticmethod]
    fn parse_irfn(text: &str) -> PyResult<Self> {
        parse_irfn(text).map(PyFunction).map_err(value_err)
    }

    /// A seeded random function of roughly `min_size..=max_size` instructions.
    #[staticmethod]
    #[pyo3(signature = (seed, min_size = 6, max_size = 16))]
    fn generate(seed: u64, min_size: usize, max_size: usize) -> PyResult<Self> {
        if min_size == 0 || min_size > max_size {
            return Err(PyValueError::new_err("need 0 < min_size <= max_size"));
        }
        Ok(PyFunction(gen_function(seed, min_size..=max_size)))
    }

    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    #[getter]
    fn dialect(&self) -> &'static str {
        self.0.dialect.tag()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn with_id(&self, id: &str) -> Self {
        PyFunction(self.0.clone().with_id(id))
    }

    fn render(&self) -> String {
        render(&self.0)
    }

    fn to_irfn(&self) -> String {
        render_irfn(&self.0)
    }

    /// Applies passes given as `name:seed` strings, in order.
    fn transform(&self, passes: Vec<String>) -> PyResult<Self> {
        let passes = passes
            .iter()
            .map(|p| p.parse::<TransformPass>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?;
        Ok(PyFunction(apply_pipeline(&self.0, &passes).function))
    }

    /// True when the passes preserve end states under every seed.
    fn equivalent_after(&self, passes: Vec<String>, seeds: Vec<u64>) -> PyResult<bool> {
        let passes = passes
            .iter()
            .map(|p| p.parse::<TransformPass>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?;
        let t = apply_pipeline(&self.0, &passes);
        Ok(check_equivalence(&self.0, &t, &seeds, &TracerConfig::default()).is_ok())
    }

    #[pyo3(signature = (seed, step_budget = 4096))]
    fn trace(&self, seed: u64, step_budget: usize) -> PyTrace {
        let cfg = TracerConfig {
            step_budget,
            ..TracerConfig::default()
        };
        PyTrace(micro_execute(&self.0, seed, &cfg))
    }

    fn dummy_trace(&self) -> PyTrace {
        PyTrace(dummy_trace(&self.0))
    }

    fn __repr__(&self) -> String {
        format!("Function({:?}, {}, {} instructions)", self.0.id, self.0.dialect.tag(), self.0.len())
    }
}

/// One micro-execution of a function.
#[pyclass(name = "Trace", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTrace(MicroTrace);

#[pymethods]
impl PyTrace {
    #[getter]
    fn fn_id(&self) -> &str {
        &self.0.fn_id
    }

    #[getter]
    fn terminated_by(&self) -> &'static str {
        self.0.terminated_by.as_str()
    }

    #[getter]
    fn is_dummy(&self) -> bool {
        self.0.is_dummy()
    }

    /// `(instruction index, text, values)` per step; `None` marks a dummy.
    fn steps(&self) -> Vec<(usize, String, Vec<Option<u64>>)> {
        self.0
            .steps
            .iter()
            .map(|s| (s.index, s.text.clone(), s.values.clone()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.0.steps.len()
    }
}

#[pyclass(name = "Vocab", frozen)]
struct PyVocab(Vocab);

#[pymethods]
impl PyVocab {
    #[staticmethod]
    fn build(traces: Vec<PyRef<'_, PyTrace>>) -> Self {
        PyVocab(build_vocab(traces.iter().map(|t| &t.0)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::load_vocab(&path).map(PyVocab).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut buf = Vec::new();
        self.0.write(&mut buf).map_err(|e| PyIOError::new_err(e.to_string()))?;
        std::fs::write(path, buf).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn tokens(&self) -> Vec<String> {
        self.0.tokens().to_vec()
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    /// The five aligned model input sequences of a trace.
    fn encode<'py>(&self, py: Python<'py>, trace: &PyTrace) -> PyResult<Bound<'py, PyDict>> {
        let e = tokenize_trace(&trace.0, &self.0).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("tokens", e.tokens)?;
        d.set_item("values", e.values.iter().map(|v| v.to_vec()).collect::<Vec<_>>())?;
        d.set_item("instr_pos", e.instr_pos)?;
        d.set_item("operand_pos", e.operand_pos)?;
        d.set_item("arch", e.arch)?;
        Ok(d)
    }
}

/// Encoder plus pooling head.
#[pyclass(name = "Model", frozen)]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    /// Fresh weights for a preset: desk, full or tiny.
    #[new]
    #[pyo3(signature = (vocab, preset = "desk", seed = 0))]
    fn new(vocab: &PyVocab, preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::preset(preset).map_err(value_err)?;
        Ok(PyModel(Model::new(cfg, vocab.0.len(), seed)))
    }

    /// Loads a checkpoint directory written for `vocab`.
    #[staticmethod]
    fn load(path: PathBuf, vocab: &PyVocab) -> PyResult<Self> {
        pipeline::load_model(&path, &vocab.0).map(PyModel).map_err(value_err)
    }

    fn save(&self, path: PathBuf, vocab: &PyVocab) -> PyResult<()> {
        save_checkpoint(&path, &self.0, &vocab.0.digest()).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.params.count()
    }

    #[getter]
    fn d_func(&self) -> usize {
        self.0.config.d_func
    }

    /// Embedding of the function's static code.
    fn embed(&self, py: Python<'_>, function: &PyFunction, vocab: &PyVocab) -> PyResult<Vec<f64>> {
        py.detach(|| similarity::function_embedding(&self.0, &vocab.0, &function.0))
            .map(|e| e.vector)
            .map_err(value_err)
    }
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    similarity::cosine_similarity(&a, &b).map_err(value_err)
}

/// Pair loss: `1 - cos` when similar (`y = 1`), `max(0, cos - margin)`
/// when dissimilar (`y = -1`).
#[pyfunction]
#[pyo3(signature = (a, b, y, margin = similarity::DEFAULT_MARGIN))]
fn finetune_loss(a: Vec<f64>, b: Vec<f64>, y: i8, margin: f64) -> PyResult<f64> {
    if y != 1 && y != -1 {
        return Err(PyValueError::new_err("y must be 1 or -1"));
    }
    similarity::finetune_loss(&a, &b, y, margin).map_err(value_err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    let pairs: Vec<(f64, bool)> = scores.into_iter().zip(labels).collect();
    similarity::roc_auc(&pairs).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, eps = similarity::KL_EPSILON))]
fn byte_kl_divergence(a: &[u8], b: &[u8], eps: f64) -> f64 {
    similarity::byte_kl_divergence(a, b, eps)
}

/// Writes a corpus directory and returns its counts.
#[pyfunction]
#[pyo3(signature = (out, sources = 100, seed = 0, train_fraction = 0.1))]
fn generate_corpus<'py>(
    py: Python<'py>,
    out: PathBuf,
    sources: usize,
    seed: u64,
    train_fraction: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = pipeline::GenOptions {
        sources,
        seed,
        train_fraction,
        ..Default::default()
    };
    let g = py.detach(|| pipeline::cmd_gen(&opts, &out)).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("sources", g.sources)?;
    d.set_item("variants", g.variants)?;
    d.set_item("train_pairs", g.train_pairs)?;
    d.set_item("test_pairs", g.test_pairs)?;
    Ok(d)
}

/// Test-split metrics of a checkpoint on a corpus directory.
#[pyfunction]
#[pyo3(signature = (corpus, vocab, checkpoint, traces = None))]
fn evaluate<'py>(
    py: Python<'py>,
    corpus: PathBuf,
    vocab: &PyVocab,
    checkpoint: PathBuf,
    traces: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| -> Result<_, pipeline::PipelineError> {
            let c = pipeline::load_corpus(&corpus)?;
            let m = pipeline::load_model(&checkpoint, &vocab.0)?;
            let opts = pipeline::EvalOptions {
                traces,
                ..Default::default()
            };
            pipeline::evaluate(&c, &vocab.0, &m, &opts)
        })
        .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("auc", r.auc)?;
    d.set_item("p_at_1", r.p_at_1)?;
    d.set_item("topk_error", r.topk_error)?;
    d.set_item("ppl", r.ppl)?;
    d.set_item("kl", r.kl)?;
    Ok(d)
}

#[pymodule]
fn semtrace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFunction>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_loss, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(byte_kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
