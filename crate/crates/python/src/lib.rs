//! Python bindings for the head models, decoding, metrics and cache format.

use std::path::{Path, PathBuf};

use layervision::datapipe::{self, Label, QAExample, WindowConfig};
use layervision::eval::{self, DEFAULT_MAX_ANSWER_LEN};
use layervision::heads::{self, HeadKind, Task};
use layervision::pipeline::{self, EvalRequest, RunConfig, SynthRequest};
use layervision::toy::ToyConfig;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through JSON into native Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

/// Head configuration and its parameter accounting.
#[pyclass(name = "HeadSpec", module = "layervision_py", from_py_object)]
#[derive(Clone)]
struct PyHeadSpec {
    inner: heads::HeadSpec,
}

#[pymethods]
impl PyHeadSpec {
    #[new]
    #[pyo3(signature = (task, kind, tokens, hidden, channels, adapter_size = 0, shared = true, use_skip = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        task: &str,
        kind: &str,
        tokens: usize,
        hidden: usize,
        channels: usize,
        adapter_size: usize,
        shared: bool,
        use_skip: bool,
    ) -> PyResult<Self> {
        let inner = heads::HeadSpec {
            adapter_size,
            shared,
            use_skip,
            ..heads::HeadSpec::new(
                parse::<Task>(task)?,
                parse::<HeadKind>(kind)?,
                tokens,
                hidden,
                channels,
            )
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn count_params(&self) -> u64 {
        self.inner.count_params().count
    }

    /// Share of the BERT-large parameter count, in percent.
    fn param_percent(&self) -> f64 {
        self.inner.count_params().percent()
    }

    fn percent_label(&self) -> String {
        self.inner.count_params().percent_label()
    }

    /// Parameter ids with their shapes, in storage order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.param_shapes()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "HeadSpec({})",
            serde_json::to_string(&self.inner).unwrap_or_default()
        )
    }
}

#[pyfunction]
fn normalize_answer(text: &str) -> String {
    eval::normalize_answer(text)
}

/// `(em, f1)` of a prediction against its gold answers; no golds means no-answer.
#[pyfunction]
fn em_f1(pred: &str, golds: Vec<String>) -> (f64, f64) {
    eval::em_f1(pred, &golds)
}

/// Best and second-best spans of one window as a dict.
#[pyfunction]
#[pyo3(signature = (start_logits, end_logits, context_start, context_end, max_answer_len = DEFAULT_MAX_ANSWER_LEN))]
fn decode_window<'py>(
    py: Python<'py>,
    start_logits: Vec<f32>,
    end_logits: Vec<f32>,
    context_start: usize,
    context_end: usize,
    max_answer_len: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let w = eval::decode_window(
        &start_logits,
        &end_logits,
        context_start..context_end,
        max_answer_len,
    )
    .map_err(err)?;
    let span = |c: &eval::SpanCandidate| (c.start, c.end, c.score);
    let d = pyo3::types::PyDict::new(py);
    d.set_item("best", span(&w.best))?;
    d.set_item("second_best", w.second_best.as_ref().map(span))?;
    d.set_item("no_answer_score", w.no_answer_score)?;
    d.set_item("start_probs", w.start_probs)?;
    d.set_item("end_probs", w.end_probs)?;
    Ok(d.into_any())
}

#[pyfunction]
fn ensemble_max(members: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
    let refs: Vec<&[f32]> = members.iter().map(Vec::as_slice).collect();
    layervision::ensemble::ensemble_max(&refs).map_err(err)
}

#[pyfunction]
fn ensemble_argmax(members: Vec<Vec<f32>>) -> PyResult<usize> {
    let refs: Vec<&[f32]> = members.iter().map(Vec::as_slice).collect();
    layervision::ensemble::ensemble_argmax(&refs).map_err(err)
}

/// Splits an example into overlapping windows; returns a list of dicts.
#[pyfunction]
#[pyo3(signature = (question_tokens, context_tokens, answers = Vec::new(), max_len = 384, overlap = 128))]
fn window_example<'py>(
    py: Python<'py>,
    question_tokens: Vec<u32>,
    context_tokens: Vec<u32>,
    answers: Vec<(usize, usize)>,
    max_len: usize,
    overlap: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let ex = QAExample {
        id: "py".into(),
        question_tokens,
        context_tokens,
        answers,
        gold_texts: Vec::new(),
    };
    let ws = datapipe::window_example(&ex, &WindowConfig::new(max_len, overlap)).map_err(err)?;
    to_py(py, &ws)
}

/// Read-only view of an activation cache.
#[pyclass(name = "CacheReader", module = "layervision_py")]
struct PyCacheReader {
    inner: datapipe::CacheReader,
}

#[pymethods]
impl PyCacheReader {
    #[new]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: datapipe::CacheReader::open(&path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.manifest())
    }

    /// `(example_id, window_index)` of record `index`.
    fn key(&self, index: usize) -> PyResult<(String, usize)> {
        let k = self
            .inner
            .key(index)
            .ok_or_else(|| PyValueError::new_err(format!("record {index} out of range")))?;
        Ok((k.example_id.clone(), k.window_index))
    }

    /// `(shape, flat row-major values, label)`; the label is `(start, end)` or a class id.
    fn read<'py>(
        &self,
        py: Python<'py>,
        index: usize,
    ) -> PyResult<(Vec<usize>, Vec<f32>, Bound<'py, PyAny>)> {
        let r = self.inner.read(index).map_err(err)?;
        let s = &r.stack;
        let label = match r.label {
            Label::Span { start, end } => (start, end).into_pyobject(py)?.into_any(),
            Label::Class(c) => c.into_pyobject(py)?.into_any(),
        };
        Ok((
            vec![s.tokens(), s.hidden(), s.channels()],
            s.tensor().data().to_vec(),
            label,
        ))
    }
}

/// Writes `out/<name>.bve` and `out/<name>.jsonl`; returns the manifest.
#[pyfunction]
#[pyo3(signature = (out, n, answerable_fraction = 0.5, sample_seed = 0, task = "span", name = "synth", toy = None))]
#[allow(clippy::too_many_arguments)]
fn synth<'py>(
    py: Python<'py>,
    out: PathBuf,
    n: usize,
    answerable_fraction: f64,
    sample_seed: u64,
    task: &str,
    name: &str,
    toy: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let toy: ToyConfig = match toy {
        Some(j) => serde_json::from_str(j).map_err(err)?,
        None => ToyConfig::default(),
    };
    let req = SynthRequest {
        toy: &toy,
        n,
        answerable_fraction,
        sample_seed,
        task: parse(task)?,
        out: &out,
        name,
    };
    let m = py.detach(|| pipeline::cmd_synth(&req)).map_err(err)?;
    to_py(py, &m)
}

/// Trains from a JSON run config; returns the run record.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(err)?;
    let rec = py.detach(|| pipeline::cmd_train(&cfg)).map_err(err)?;
    to_py(py, &rec)
}

/// Scores a saved model; writes predictions and metrics into `out`.
#[pyfunction]
#[pyo3(signature = (model_dir, cache, out, examples = None, vocab = None, max_answer_len = DEFAULT_MAX_ANSWER_LEN))]
fn evaluate<'py>(
    py: Python<'py>,
    model_dir: PathBuf,
    cache: PathBuf,
    out: PathBuf,
    examples: Option<PathBuf>,
    vocab: Option<PathBuf>,
    max_answer_len: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let req = EvalRequest {
        cache: &cache,
        examples: examples.as_deref(),
        vocab: vocab.as_deref(),
        max_answer_len,
        out: &out,
    };
    let m = py
        .detach(|| pipeline::cmd_eval(Path::new(&model_dir), &req))
        .map_err(err)?;
    to_py(py, &m)
}

#[pymodule]
fn layervision_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHeadSpec>()?;
    m.add_class::<PyCacheReader>()?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(em_f1, m)?)?;
    m.add_function(wrap_pyfunction!(decode_window, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_max, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_argmax, m)?)?;
    m.add_function(wrap_pyfunction!(window_example, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("BERT_LARGE_PARAMS", heads::BERT_LARGE_PARAMS)?;
    Ok(())
}
