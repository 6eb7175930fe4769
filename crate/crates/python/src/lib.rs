//! Python bindings: model loading and inference, training runs, the
//! gradient-check suite and the segmented scan.

use std::borrow::Cow;
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pmnet::checkpoint::{Checkpoint, Embedded};
use pmnet::eval::{self, AblationSpec};
use pmnet::experiment::{self, ExperimentConfig};
use pmnet::model::{self, ModelConfig, Params, VOCAB};
use pmnet::task::{self, CopyPasteConfig};
use pmnet::{gradcheck, rng, scan, Tape, Tensor};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn ablation(spec: &str) -> PyResult<AblationSpec> {
    AblationSpec::parse(spec).map_err(value_err)
}

/// A byte-level model with its parameters.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: ModelConfig,
    params: Params<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters for a JSON model config (`"{}"` for defaults).
    #[staticmethod]
    #[pyo3(signature = (config_json = "{}", seed = 0))]
    fn init(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(value_err)?;
        let params = Params::init(&cfg, seed).map_err(value_err)?;
        Ok(PyModel { cfg, params })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::<f32>::load(Path::new(path)).map_err(runtime_err)?;
        ckpt.params
            .check_against(&ckpt.config.model)
            .map_err(value_err)?;
        Ok(PyModel {
            cfg: ckpt.config.model,
            params: ckpt.params,
        })
    }

    #[pyo3(signature = (path, step = 0, seed = 0))]
    fn save(&self, path: &str, step: u64, seed: u64) -> PyResult<()> {
        Checkpoint {
            config: Embedded {
                model: self.cfg.clone(),
                experiment: serde_json::Value::Null,
            },
            step,
            seed,
            params: self.params.clone(),
        }
        .save(Path::new(path))
        .map_err(runtime_err)
    }

    /// Model config as JSON.
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.cfg).map_err(runtime_err)
    }

    fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Next-byte logits for every position of `tokens`, `len(tokens)` rows of 256.
    #[pyo3(signature = (tokens, chunk = None, ablation = "none"))]
    fn logits(
        &self,
        py: Python<'_>,
        tokens: &[u8],
        chunk: Option<usize>,
        ablation: &str,
    ) -> PyResult<Vec<Vec<f32>>> {
        let spec = self::ablation(ablation)?;
        let params = spec.apply(&self.cfg, &self.params);
        let s = tokens.len();
        let chunk = chunk.unwrap_or(s.max(1));
        let out = py
            .detach(|| {
                model::infer_chunked(
                    &self.cfg,
                    &params,
                    tokens,
                    1,
                    s,
                    chunk,
                    spec.forward_options(),
                    spec.disable_recurrence_eval,
                )
            })
            .map_err(value_err)?;
        Ok(out.data().chunks(VOCAB).map(<[f32]>::to_vec).collect())
    }

    /// Bits spent on each byte of `data` after the first.
    #[pyo3(signature = (data, chunk = 256, ablation = "none"))]
    fn position_bits(
        &self,
        py: Python<'_>,
        data: &[u8],
        chunk: usize,
        ablation: &str,
    ) -> PyResult<Vec<f64>> {
        let spec = self::ablation(ablation)?;
        py.detach(|| eval::position_bits(&self.cfg, &self.params, data, chunk, &spec))
            .map_err(value_err)
    }

    /// Teacher-forced copy-paste accuracy per N as `(n, accuracy)` pairs.
    #[pyo3(signature = (n_values, trials = 32, ablation = "none", seed = 0))]
    fn copy_accuracy(
        &self,
        py: Python<'_>,
        n_values: Vec<usize>,
        trials: usize,
        ablation: &str,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64)>> {
        let spec = self::ablation(ablation)?;
        let task = CopyPasteConfig::default();
        let rows = py
            .detach(|| {
                eval::exact_accuracy(
                    &self.cfg,
                    &self.params,
                    &task,
                    &n_values,
                    trials,
                    &spec,
                    seed,
                    16,
                    self.cfg.max_seq_len,
                )
            })
            .map_err(value_err)?;
        Ok(rows.into_iter().map(|r| (r.n, r.accuracy)).collect())
    }
}

/// Runs a training experiment; returns `(final_checkpoint_path, final_train_loss)`.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, overrides = Vec::new()))]
fn train(
    py: Python<'_>,
    config_path: &str,
    out_dir: &str,
    overrides: Vec<String>,
) -> PyResult<(String, f64)> {
    let cfg = ExperimentConfig::load(Path::new(config_path), &overrides).map_err(value_err)?;
    let out = py
        .detach(|| experiment::run_experiment(&cfg, Path::new(out_dir)))
        .map_err(runtime_err)?;
    Ok((
        out.final_checkpoint.display().to_string(),
        out.final_train_loss,
    ))
}

/// Finite-difference check of every op: `(name, instances, max_rel_err, passed)`.
#[pyfunction]
#[pyo3(signature = (instances = 20, seed = 2024))]
fn run_gradcheck(
    py: Python<'_>,
    instances: usize,
    seed: u64,
) -> PyResult<Vec<(String, usize, f64, bool)>> {
    let report = py
        .detach(|| gradcheck::run_suite(seed, instances, None))
        .map_err(runtime_err)?;
    Ok(report
        .ops
        .iter()
        .map(|o| (o.name.to_string(), o.instances, o.max_rel_err, o.passed()))
        .collect())
}

fn grid_tensor(grid: &[Vec<f64>], groups: &[usize]) -> PyResult<(Tensor<f64>, usize)> {
    if grid.len() != groups.len() {
        return Err(value_err(format!(
            "{} rows for {} group indices",
            grid.len(),
            groups.len()
        )));
    }
    let w = grid.first().map_or(1, Vec::len);
    if grid.iter().any(|r| r.len() != w) {
        return Err(value_err("ragged grid"));
    }
    let flat: Vec<f64> = grid.iter().flatten().copied().collect();
    Ok((
        Tensor::new(&[1, groups.len(), w], flat).map_err(value_err)?,
        w,
    ))
}

fn rows(t: &Tensor<f64>, w: usize) -> Vec<Vec<f64>> {
    t.data().chunks(w.max(1)).map(<[f64]>::to_vec).collect()
}

/// Inclusive per-group phase prefix sums mod 2pi of `grid` rows (one per token).
#[pyfunction]
fn segmented_scan(
    grid: Vec<Vec<f64>>,
    groups: Vec<usize>,
    n_groups: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let (t, w) = grid_tensor(&grid, &groups)?;
    let plan = scan::build_plan(&groups, 1, groups.len(), n_groups).map_err(value_err)?;
    let mut tape = Tape::new();
    let g = tape.constant(t);
    let out = scan::segmented_scan(&mut tape, g, &plan).map_err(value_err)?;
    Ok(rows(tape.value(out), w))
}

/// Recurrent reference for [`segmented_scan`].
#[pyfunction]
fn sequential_oracle(grid: Vec<Vec<f64>>, groups: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
    let (t, w) = grid_tensor(&grid, &groups)?;
    Ok(rows(
        &scan::sequential_oracle(&t, &groups, 1, groups.len()),
        w,
    ))
}

/// One copy-paste sequence `source | source` with an `n`-byte source.
#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn copy_paste_instance(n: usize, seed: u64) -> PyResult<Cow<'static, [u8]>> {
    if n == 0 {
        return Err(value_err("n must be positive"));
    }
    let mut r = rng::stream(seed, "python");
    Ok(Cow::Owned(
        task::sample_instance(&mut r, &CopyPasteConfig::default(), n).bytes(),
    ))
}

#[pymodule]
#[pyo3(name = "pmnet")]
fn pmnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(segmented_scan, m)?)?;
    m.add_function(wrap_pyfunction!(sequential_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(copy_paste_instance, m)?)?;
    Ok(())
}
