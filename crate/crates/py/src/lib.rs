//! Python module `pyhvat`: build, train, evaluate, trace and audit models
//! from Python. Configs cross the boundary as JSON text with the same
//! schema as the `model` and `train` sections of a run config.

use std::path::PathBuf;

use hvat::analysis::{count_params_for_config, estimate_flops, trace_attention, write_trace_csv, Quantity};
use hvat::attention::BlockVariant;
use hvat::cli::gradcheck::{run_suite_seeded, Dims, DEFAULT_SEED};
use hvat::cli::{load_checkpoint, run as run_cli, save_checkpoint, Env};
use hvat::model::{ModelConfig, Seq2SeqModel, BOS, EOS};
use hvat::params::ParamKind;
use hvat::training::{evaluate, train, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(pyhvat, HvatError, PyValueError);

fn py_err(e: impl std::fmt::Display) -> PyErr {
    HvatError::new_err(e.to_string())
}

fn model_config(json: &str) -> PyResult<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_str(json).map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn train_config(json: Option<&str>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = match json {
        Some(text) => serde_json::from_str(text).map_err(py_err)?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn quantity(name: &str) -> PyResult<Quantity> {
    match name {
        "alpha" => Ok(Quantity::Alpha),
        "beta" => Ok(Quantity::Beta),
        "attention" => Ok(Quantity::Attention),
        other => Err(py_err(format!(
            "unknown quantity `{other}` (expected alpha, beta, attention)"
        ))),
    }
}

/// Sequence-to-sequence model with `f32` parameters.
#[pyclass(module = "pyhvat")]
struct Model {
    inner: Seq2SeqModel<f32>,
}

#[pymethods]
impl Model {
    /// Initializes a model from a `model` config given as JSON.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let inner = Seq2SeqModel::build(&model_config(config_json)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Trains in place and returns the metrics rows as dicts.
    #[pyo3(signature = (train_json=None))]
    fn train<'py>(&mut self, py: Python<'py>, train_json: Option<&str>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = train_config(train_json)?;
        let data = cfg.datasets(self.inner.config().vocab_size).map_err(py_err)?;
        let rows = train(&mut self.inner, &cfg, &data).map_err(py_err)?;
        rows.iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("step", r.step)?;
                d.set_item("split", r.split.name())?;
                d.set_item("loss", r.loss)?;
                d.set_item("token_accuracy", r.token_accuracy)?;
                d.set_item("ppl", r.ppl)?;
                Ok(d)
            })
            .collect()
    }

    /// Loss, token accuracy and perplexity on the validation stream of the
    /// training config.
    #[pyo3(signature = (train_json=None))]
    fn evaluate<'py>(&self, py: Python<'py>, train_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = train_config(train_json)?;
        let pairs = cfg.validation_set(self.inner.config().vocab_size).map_err(py_err)?;
        let m = evaluate(&self.inner, &pairs, cfg.batch_size).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("loss", m.loss)?;
        d.set_item("token_accuracy", m.token_accuracy)?;
        d.set_item("ppl", m.ppl)?;
        Ok(d)
    }

    /// Logits `[len(tgt)][vocab_size]` for one pair.
    fn logits(&self, src: Vec<usize>, tgt: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let t = self.inner.forward(&src, &tgt).map_err(py_err)?;
        t.rows().map_err(py_err)
    }

    /// Greedy output tokens, without the start and end markers.
    #[pyo3(signature = (src, max_steps=None))]
    fn greedy_decode(&self, src: Vec<usize>, max_steps: Option<usize>) -> PyResult<Vec<usize>> {
        let steps = max_steps.unwrap_or(self.inner.config().max_len.saturating_sub(1).max(1));
        self.inner.greedy_decode(&src, steps, BOS, EOS).map_err(py_err)
    }

    /// Attention trace of one pair as CSV text, computed in `f64`.
    fn trace(&self, src: Vec<usize>, tgt: Vec<usize>, quantities: Vec<String>) -> PyResult<String> {
        let q = quantities.iter().map(|s| quantity(s)).collect::<PyResult<Vec<_>>>()?;
        let records = trace_attention(&self.inner.cast::<f64>(), &src, &tgt, &q).map_err(py_err)?;
        let mut buf = Vec::new();
        write_trace_csv(&records, &mut buf).map_err(py_err)?;
        String::from_utf8(buf).map_err(py_err)
    }
}

/// Parameter counts per category for a `model` config, plus `total`.
#[pyfunction]
fn count_params<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let report = count_params_for_config(&model_config(config_json)?);
    let d = PyDict::new(py);
    for kind in ParamKind::ALL {
        d.set_item(kind.name(), report.count(kind))?;
    }
    d.set_item("total", report.total)?;
    Ok(d)
}

/// Multiply-accumulate estimate of one encoder block on `n` tokens, as the
/// CSV rows of `hvat count`.
#[pyfunction]
fn estimate_flops_csv(config_json: &str, n: usize) -> PyResult<String> {
    let report = estimate_flops(&model_config(config_json)?, n).map_err(py_err)?;
    Ok(report.to_csv())
}

/// Maximum relative error per check, keyed by operation or block name.
#[pyfunction]
#[pyo3(signature = (variant="all", dims="N=3,D=8,M=2,Da=2", seed=DEFAULT_SEED))]
fn gradcheck<'py>(py: Python<'py>, variant: &str, dims: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let variants = if variant.eq_ignore_ascii_case("all") {
        BlockVariant::ALL.to_vec()
    } else {
        vec![variant.parse().map_err(py_err)?]
    };
    let dims: Dims = dims.parse().map_err(py_err)?;
    let report = run_suite_seeded(&variants, &dims, None, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    for r in report.ops.iter().chain(&report.blocks) {
        d.set_item(&r.name, r.report.max_relative_error)?;
    }
    Ok(d)
}

/// Runs a command line as the `hvat` binary would and returns the exit
/// code with captured standard output and error.
#[pyfunction]
#[pyo3(signature = (args, seed_env=None))]
fn run(args: Vec<String>, seed_env: Option<String>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("hvat".to_string()).chain(args);
    let code = run_cli(argv, &Env { seed: seed_env }, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

#[pymodule]
fn pyhvat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HvatError", m.py().get_type::<HvatError>())?;
    m.add("BOS", BOS)?;
    m.add("EOS", EOS)?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flops_csv, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
