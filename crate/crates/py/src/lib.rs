//! Python bindings. Matrices cross the boundary as lists of rows and latents
//! as flat lists plus a shape.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::sparse_forcing::attention::{self, RecallUnit};
use ::sparse_forcing::bench::{self, BenchGeometry};
use ::sparse_forcing::blockify::{self as blk, BlockLayout, BlockShape};
use ::sparse_forcing::rollout::{self, RolloutConfig};
use ::sparse_forcing::router::{self, BlockMask};
use ::sparse_forcing::tensor::{DenseMatrix, Latent4D};
use ::sparse_forcing::verify::{self, VerifyOptions};
use ::sparse_forcing::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(py_err)
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn shape(b: (usize, usize, usize)) -> PyResult<BlockShape> {
    BlockShape::new(b.0, b.1, b.2).map_err(py_err)
}

/// Rearranges a flat `(t, h, w, d)` latent into block-major order.
#[pyfunction]
fn blockify(data: Vec<f32>, dims: (usize, usize, usize, usize), block: (usize, usize, usize)) -> PyResult<Vec<f32>> {
    let x = Latent4D::new(dims.0, dims.1, dims.2, dims.3, data).map_err(py_err)?;
    Ok(blk::blockify(&x, shape(block)?).map_err(py_err)?.data().to_vec())
}

#[pyfunction]
fn unblockify(data: Vec<f32>, dims: (usize, usize, usize, usize), block: (usize, usize, usize)) -> PyResult<Vec<f32>> {
    let layout = BlockLayout::new(dims.0, dims.1, dims.2, dims.3, shape(block)?).map_err(py_err)?;
    let xb = blk::BlockedTensor::from_parts(layout, data).map_err(py_err)?;
    Ok(blk::unblockify(&xb).map_err(py_err)?.into_data())
}

/// `(block_id, in_block_offset)` of a flat `(t, h, w)` token index.
#[pyfunction]
fn block_index_map(dims: (usize, usize, usize), block: (usize, usize, usize), index: usize) -> PyResult<(usize, usize)> {
    let layout = BlockLayout::new(dims.0, dims.1, dims.2, 1, shape(block)?).map_err(py_err)?;
    blk::block_index_map(&layout, index).map_err(py_err)
}

/// Row-wise Top-K over a coarse attention matrix; returns sorted indices per row.
#[pyfunction]
fn select_topk(a_local: Vec<Vec<f32>>, topk_ratio: f64) -> PyResult<Vec<Vec<usize>>> {
    Ok(router::select_topk(&matrix(a_local)?, topk_ratio).map_err(py_err)?.visible)
}

#[pyfunction]
fn topk_budget(n_local_blocks: usize, topk_ratio: f64) -> PyResult<usize> {
    router::topk_budget(n_local_blocks, topk_ratio).map_err(py_err)
}

/// `softmax(q·kᵀ/√d + mask)·v` with an additive mask of 0 / -inf entries.
#[pyfunction]
fn attention_reference(
    q: Vec<Vec<f32>>,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    mask: Vec<Vec<f32>>,
) -> PyResult<Vec<Vec<f32>>> {
    let out = attention::attention_reference(&matrix(q)?, &matrix(k)?, &matrix(v)?, &matrix(mask)?).map_err(py_err)?;
    Ok(to_rows(&out))
}

/// Max-abs gap between the streaming kernel and the dense reference on a
/// seeded random problem.
#[pyfunction]
#[pyo3(signature = (seed, topk_ratio=None))]
fn oracle_error(seed: u64, topk_ratio: Option<f64>) -> PyResult<f32> {
    verify::OracleCase::random(seed, topk_ratio).error().map_err(py_err)
}

/// `(probs, visible, n_persistent_blocks, n_local_blocks)`.
type PyRecallUnit = (Vec<Vec<f32>>, Vec<Vec<usize>>, usize, usize);

/// Mean and population std of recall over units.
#[pyfunction]
fn attention_recall(units: Vec<PyRecallUnit>) -> PyResult<(f64, f64)> {
    let units = units
        .into_iter()
        .enumerate()
        .map(|(i, (probs, visible, n_p, n_l))| {
            Ok(RecallUnit {
                layer: 0,
                head: i,
                probs: matrix(probs)?,
                mask: BlockMask {
                    n_query_blocks: visible.len(),
                    n_persistent_blocks: n_p,
                    n_local_blocks: n_l,
                    visible,
                },
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let stats = attention::attention_recall(&units).map_err(py_err)?;
    Ok((stats.mean, stats.std))
}

#[pyfunction]
fn flop_count(n_q: usize, n_p: usize, n_l: usize, b: usize, k_selected: usize, d: usize) -> (f64, f64, f64) {
    let f = attention::flop_count(n_q, n_p, n_l, b, k_selected, d);
    (f.dense_flops, f.sparse_flops, f.ratio)
}

/// `(N_L, N_P, N_KV)` for a benchmark geometry.
#[pyfunction]
fn kv_length(n_c: usize, local_ratio: f64, persist_ratio: f64) -> PyResult<(usize, usize, usize)> {
    let g = BenchGeometry {
        n_c,
        local_ratio,
        persist_ratio,
        ..BenchGeometry::default()
    };
    let l = bench::kv_length(&g).map_err(py_err)?;
    Ok((l.n_l, l.n_p, l.n_kv))
}

#[pyfunction]
fn kv_bytes(tokens: u64, layers: u64, kv_heads: u64, head_dim: u64, bytes_per_element: u64) -> u128 {
    bench::kv_bytes(tokens, layers, kv_heads, head_dim, bytes_per_element)
}

#[pyfunction]
#[pyo3(signature = (topk_ratio=0.0625, n_c=672, local_ratio=2.0, persist_ratio=0.25, d=64, reps=5, block_tokens=48, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_benchmark<'py>(
    py: Python<'py>,
    topk_ratio: f64,
    n_c: usize,
    local_ratio: f64,
    persist_ratio: f64,
    d: usize,
    reps: usize,
    block_tokens: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let g = BenchGeometry {
        topk_ratio,
        n_c,
        local_ratio,
        persist_ratio,
        d,
        reps,
        block_tokens,
        seed,
        ..BenchGeometry::default()
    };
    let r = py.detach(|| bench::run_benchmark(&g)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("n_kv", r.lengths.n_kv)?;
    out.set_item("sparse_ms", r.sparse.median_ms)?;
    out.set_item("dense_ms", r.dense.median_ms)?;
    out.set_item("speedup", r.speedup)?;
    out.set_item("flop_ratio", r.flops.ratio)?;
    let stages = PyDict::new(py);
    for (s, p) in &r.breakdown.percentages {
        stages.set_item(s.label(), *p)?;
    }
    out.set_item("stages", stages)?;
    out.set_item("warnings", r.warnings)?;
    Ok(out)
}

/// Toy rollout configuration; defaults follow the canonical demo.
#[pyclass(name = "RolloutConfig", from_py_object)]
#[derive(Clone)]
struct PyRolloutConfig {
    inner: RolloutConfig,
}

#[pymethods]
impl PyRolloutConfig {
    #[new]
    #[pyo3(signature = (frames=4, steps=4, topk=0.25, capacity_frames=6, window_frames=6, seed=0))]
    fn new(frames: usize, steps: usize, topk: f64, capacity_frames: usize, window_frames: usize, seed: u64) -> PyResult<Self> {
        let inner = RolloutConfig {
            num_frames: frames,
            timesteps: RolloutConfig::even_timesteps(steps),
            topk_ratio: topk,
            capacity_frames,
            window_frames,
            seed,
            ..RolloutConfig::default()
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.num_frames
    }

    #[getter]
    fn timesteps(&self) -> Vec<f32> {
        self.inner.timesteps.clone()
    }

    #[getter]
    fn capacity_blocks(&self) -> PyResult<usize> {
        self.inner.capacity_blocks().map_err(py_err)
    }

    #[getter]
    fn blocks_per_chunk(&self) -> PyResult<usize> {
        self.inner.blocks_per_chunk().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "RolloutConfig(frames={}, steps={}, topk={}, seed={})",
            self.inner.num_frames,
            self.inner.steps(),
            self.inner.topk_ratio,
            self.inner.seed
        )
    }
}

/// Runs inference; returns `(frames, trace_jsonl)` with each frame a flat list.
#[pyfunction]
fn run_inference(py: Python<'_>, config: PyRolloutConfig) -> PyResult<(Vec<Vec<f32>>, String)> {
    let cfg = config.inner;
    let out = py
        .detach(|| rollout::run_inference(&cfg, &rollout::make_toy_denoiser(cfg.seed)))
        .map_err(py_err)?;
    Ok((out.frames.into_iter().map(Latent4D::into_data).collect(), out.trace.to_jsonl()))
}

/// One training-schedule iteration; returns `(s, trace_jsonl)`.
#[pyfunction]
fn run_training_schedule(py: Python<'_>, config: PyRolloutConfig) -> PyResult<(usize, String)> {
    let cfg = config.inner;
    let out = py
        .detach(|| rollout::run_training_schedule(&cfg, &rollout::make_toy_denoiser(cfg.seed)))
        .map_err(py_err)?;
    Ok((out.s, out.trace.to_jsonl()))
}

/// Runs the seeded suites; returns `(passed, summary)`.
#[pyfunction]
#[pyo3(signature = (seeds=50, seed=0))]
fn run_verify(py: Python<'_>, seeds: usize, seed: u64) -> (bool, String) {
    let report = py.detach(|| {
        verify::run_verify(&VerifyOptions {
            seeds,
            base_seed: seed,
            fault: None,
        })
    });
    (report.passed(), report.to_string())
}

#[pymodule]
#[pyo3(name = "sparse_forcing")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRolloutConfig>()?;
    m.add_function(wrap_pyfunction!(blockify, m)?)?;
    m.add_function(wrap_pyfunction!(unblockify, m)?)?;
    m.add_function(wrap_pyfunction!(block_index_map, m)?)?;
    m.add_function(wrap_pyfunction!(select_topk, m)?)?;
    m.add_function(wrap_pyfunction!(topk_budget, m)?)?;
    m.add_function(wrap_pyfunction!(attention_reference, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_error, m)?)?;
    m.add_function(wrap_pyfunction!(attention_recall, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(kv_length, m)?)?;
    m.add_function(wrap_pyfunction!(kv_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_inference, m)?)?;
    m.add_function(wrap_pyfunction!(run_training_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
