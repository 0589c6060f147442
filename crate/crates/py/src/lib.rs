//! Python bindings. Tensors cross the boundary as nested lists of floats;
//! all computation runs in 64-bit.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hierarq::config::RunConfig;
use hierarq::container;
use hierarq::memory::{BankConfig, Granularity, MemoryBank, MergeRule, UpdatePolicy};
use hierarq::model::HierarQ;
use hierarq::modulator::FrameFeature;
use hierarq::prompt::{build_prompt_bundle, extract_entities, EntityLexicon};
use hierarq::synthetic::SyntheticTask;
use hierarq::train::{model_for, run_lexicon, train};
use hierarq::Tensor;

create_exception!(hierarq_py, HierarqError, PyException);

fn err(e: hierarq::HierarqError) -> PyErr {
    HierarqError::new_err(format!("{}: {e}", e.kind()))
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn frames(video: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<FrameFeature<f64>>> {
    video
        .into_iter()
        .enumerate()
        .map(|(i, f)| FrameFeature::new(i, tensor(f)?).map_err(err))
        .collect()
}

fn run_config(json: Option<&str>) -> PyResult<RunConfig> {
    let mut cfg = match json {
        Some(text) => RunConfig::from_json(text).map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(err)?;
    cfg.model.precision = hierarq::config::Precision::F64;
    Ok(cfg)
}

/// Streaming model with its run configuration.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: RunConfig,
    model: HierarQ<f64>,
}

#[pymethods]
impl PyModel {
    /// `config` is a run-configuration JSON string; defaults apply when
    /// omitted.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config)?;
        let model = model_for(&cfg).map_err(err)?;
        Ok(PyModel { cfg, model })
    }

    /// Load weights written by `save` or by the command-line trainer.
    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let mut cfg = run_config(config)?;
        let model: HierarQ<f64> = container::load_checkpoint(&path).map_err(err)?;
        cfg.model = model.cfg().clone();
        cfg.flags = model.arch.flags.clone();
        Ok(PyModel { cfg, model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        container::save_checkpoint(&path, &self.model).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.numel()
    }

    /// Closed-form bound on live stream state, in floats.
    #[getter]
    fn state_bound(&self) -> usize {
        self.model.arch.state_bound()
    }

    /// Run a whole video (`T × N_v × D_vis`) and return the final query
    /// tokens, class logits and per-frame gate summaries.
    fn process_video<'py>(
        &self,
        py: Python<'py>,
        video: Vec<Vec<Vec<f64>>>,
        prompt: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let fs = frames(video)?;
        let lex = run_lexicon(&self.cfg).map_err(err)?;
        let bundle = build_prompt_bundle::<f64>(prompt, &lex, self.model.cfg()).map_err(err)?;
        let out = self.model.process_video(&fs, &bundle).map_err(err)?;
        let logits = self.model.logits(&out).map_err(err)?;
        let gates = serde_json::to_string(&out.gates).map_err(|e| HierarqError::new_err(e.to_string()))?;
        let d = PyDict::new(py);
        d.set_item("scene", rows(&out.scene))?;
        d.set_item("entity", rows(&out.entity))?;
        d.set_item("logits", logits)?;
        d.set_item("frames", out.frames)?;
        d.set_item("peak_live_floats", out.peak_live_floats)?;
        d.set_item("entities", bundle.entity_tokens)?;
        d.set_item("gates_json", gates)?;
        Ok(d)
    }

    /// Train on the configured synthetic task; returns the final metrics.
    fn train<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let report = train(&self.cfg, &mut self.model, |_| {}).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("steps", report.steps)?;
        d.set_item("final_val_loss", report.final_val_loss)?;
        d.set_item("final_val_accuracy", report.final_val_accuracy)?;
        d.set_item("reached_target_at", report.reached_target_at)?;
        d.set_item("oracle_accuracy", report.oracle_accuracy)?;
        Ok(d)
    }
}

/// Capacity-bounded token-grid memory.
#[pyclass(name = "MemoryBank")]
struct PyMemoryBank {
    bank: MemoryBank<f64>,
}

#[pymethods]
impl PyMemoryBank {
    #[new]
    #[pyo3(signature = (rows, dim, capacity, policy="fifo", granularity="token", merge="mean"))]
    fn new(rows: usize, dim: usize, capacity: usize, policy: &str, granularity: &str, merge: &str) -> PyResult<Self> {
        let bad = |what: &str, v: &str| HierarqError::new_err(format!("config: unknown {what} {v:?}"));
        let policy = match policy {
            "fifo" => UpdatePolicy::Fifo,
            "mbc" => UpdatePolicy::Mbc,
            v => return Err(bad("policy", v)),
        };
        let granularity = match granularity {
            "token" => Granularity::Token,
            "frame" => Granularity::Frame,
            v => return Err(bad("granularity", v)),
        };
        let merge = match merge {
            "mean" => MergeRule::Mean,
            "count_weighted" => MergeRule::CountWeighted,
            v => return Err(bad("merge rule", v)),
        };
        let cfg = BankConfig {
            rows,
            dim,
            capacity,
            policy,
            granularity,
            merge,
        };
        Ok(PyMemoryBank {
            bank: MemoryBank::new(cfg).map_err(err)?,
        })
    }

    fn push(&mut self, grid: Vec<Vec<f64>>) -> PyResult<()> {
        self.bank.push(&tensor(grid)?).map(|_| ()).map_err(err)
    }

    /// All entries in temporal order, `(len·rows) × dim`.
    fn flatten(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.bank.flatten().map_err(err)?))
    }

    /// `(first, last, count)` source-time interval of every entry of `slot`.
    fn spans(&self, slot: usize) -> PyResult<Vec<(usize, usize, usize)>> {
        if slot >= self.bank.config().rows {
            return Err(HierarqError::new_err(format!("input: slot {slot} out of range")));
        }
        Ok(self.bank.spans(slot).iter().map(|s| (s.first, s.last, s.count)).collect())
    }

    fn __len__(&self) -> usize {
        self.bank.len()
    }
}

/// Entity words of `prompt` under the built-in lexicon.
#[pyfunction]
fn entities(prompt: &str) -> Vec<String> {
    extract_entities(prompt, &EntityLexicon::builtin())
}

#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let fs = container::read_features::<f64>(&path).map_err(err)?;
    Ok(fs.iter().map(|f| rows(&f.tokens)).collect())
}

#[pyfunction]
fn write_features(path: PathBuf, video: Vec<Vec<Vec<f64>>>) -> PyResult<()> {
    container::write_features(&path, &frames(video)?).map_err(err)
}

/// One labelled stream from the synthetic entity task: `(video, label)`.
#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn synthetic_sample(seed: u64, config: Option<&str>) -> PyResult<(Vec<Vec<Vec<f64>>>, usize)> {
    let cfg = run_config(config)?;
    let task = SyntheticTask::new(&cfg.synthetic, &cfg.model).map_err(err)?;
    let sample = task.dataset::<f64>(1, seed).remove(0);
    Ok((sample.frames.iter().map(|f| rows(&f.tokens)).collect(), sample.label))
}

#[pymodule]
fn hierarq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HierarqError", m.py().get_type::<HierarqError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_function(wrap_pyfunction!(entities, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_sample, m)?)?;
    Ok(())
}
