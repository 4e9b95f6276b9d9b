//! Autoregressive diffusion rollout over a seeded toy denoiser.
//!
//! Each chunk starts from Gaussian noise and is denoised along the timestep
//! ladder. Every denoiser call runs block-sparse attention against the
//! per-head persistent memory and local window. Once a chunk is finished its
//! clean KV is produced by a `t = 0` pass, pushed into the window, and the
//! evicted blocks compete for persistent slots by coarse relevance.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_probs, attention_sparse_view, row_recall, AttentionConfig, RecallStats, UnitRecall};
use crate::blockify::{blockify, unblockify, BlockLayout, BlockShape, BlockedTensor};
use crate::error::{shape, Error, Result};
use crate::memory::{BlockEntry, BlockId, KvView, LocalWindow, PersistentMemory, ScoreMap};
use crate::router::{aggregate_scores, coarse_attention, compress_blocks, compress_keys, select_topk, BlockMask};
use crate::tensor::{matmul, write_tensor, DenseMatrix, Latent4D, Tensor};

/// Piecewise-linear noise level σ(t) through `(t, σ)` knots starting at (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RenoiseSchedule {
    knots: Vec<(f32, f32)>,
}

impl Default for RenoiseSchedule {
    fn default() -> Self {
        Self::linear()
    }
}

impl RenoiseSchedule {
    /// σ(t) = t.
    pub fn linear() -> Self {
        Self {
            knots: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn from_knots(knots: Vec<(f32, f32)>) -> Result<Self> {
        if knots.first() != Some(&(0.0, 0.0)) {
            return Err(Error::Config("noise schedule must start at σ(0) = 0".into()));
        }
        let monotone = knots.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1);
        if !monotone || knots.iter().any(|&(_, s)| !(0.0..=1.0).contains(&s)) {
            return Err(Error::Config("noise schedule must be monotone with σ in [0, 1]".into()));
        }
        Ok(Self { knots })
    }

    pub fn sigma(&self, t: f32) -> f32 {
        let last = *self.knots.last().expect("nonempty");
        if t >= last.0 {
            return last.1;
        }
        if t <= 0.0 {
            return 0.0;
        }
        let i = self.knots.partition_point(|&(kt, _)| kt <= t);
        let (t0, s0) = self.knots[i - 1];
        let (t1, s1) = self.knots[i];
        s0 + (s1 - s0) * (t - t0) / (t1 - t0)
    }
}

/// `(1 − σ(t))·x̂₀ + σ(t)·ε`.
pub fn renoise(x0_hat: &[f32], eps: &[f32], t: f32, sched: &RenoiseSchedule) -> Result<Vec<f32>> {
    if x0_hat.len() != eps.len() {
        return Err(shape(format!("x0 has {} values, noise has {}", x0_hat.len(), eps.len())));
    }
    let sigma = sched.sigma(t);
    if sigma == 0.0 {
        return Ok(x0_hat.to_vec());
    }
    if sigma == 1.0 {
        return Ok(eps.to_vec());
    }
    Ok(x0_hat
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (1.0 - sigma) * x + sigma * e)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Number of generated chunks `M`.
    pub num_frames: usize,
    /// Denoise ladder `t_T, …, t_1`, strictly decreasing in (0, 1].
    pub timesteps: Vec<f32>,
    pub topk_ratio: f64,
    pub capacity_frames: usize,
    pub window_frames: usize,
    pub block_shape: BlockShape,
    pub chunk_frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            num_frames: 4,
            timesteps: vec![1.0, 0.75, 0.5, 0.25],
            topk_ratio: 0.25,
            capacity_frames: 6,
            window_frames: 6,
            block_shape: BlockShape { b_t: 3, b_h: 4, b_w: 4 },
            chunk_frames: 3,
            height: 8,
            width: 8,
            dim: 16,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    /// Evenly spaced ladder `1, (T−1)/T, …, 1/T`.
    pub fn even_timesteps(steps: usize) -> Vec<f32> {
        (0..steps).map(|i| (steps - i) as f32 / steps as f32).collect()
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn chunk_layout(&self) -> Result<BlockLayout> {
        BlockLayout::new(self.chunk_frames, self.height, self.width, self.dim, self.block_shape)
            .map_err(|e| Error::Config(format!("chunk dims vs block shape: {e}")))
    }

    pub fn blocks_per_chunk(&self) -> Result<usize> {
        Ok(self.chunk_layout()?.n_blocks())
    }

    /// Persistent capacity `C` in blocks.
    pub fn capacity_blocks(&self) -> Result<usize> {
        let layout = self.chunk_layout()?;
        Ok(self.capacity_frames / self.block_shape.b_t * layout.n_h * layout.n_w)
    }

    /// Window capacity `L_local` in chunks.
    pub fn window_chunks(&self) -> usize {
        self.window_frames / self.chunk_frames.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_frames == 0 {
            return fail("num_frames must be at least 1".into());
        }
        if self.timesteps.is_empty() {
            return fail("timesteps must be nonempty".into());
        }
        if self.timesteps.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return fail("timesteps must lie in (0, 1]".into());
        }
        if self.timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return fail("timesteps must be strictly decreasing".into());
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return fail(format!("topk ratio {} is outside (0, 1]", self.topk_ratio));
        }
        if self.chunk_frames == 0 || self.height == 0 || self.width == 0 || self.dim == 0 {
            return fail("chunk dims must be positive".into());
        }
        BlockShape::new(self.block_shape.b_t, self.block_shape.b_h, self.block_shape.b_w)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.chunk_layout()?;
        if !self.capacity_frames.is_multiple_of(self.block_shape.b_t) {
            return fail(format!(
                "capacity of {} frames is not a whole number of {}-frame blocks",
                self.capacity_frames, self.block_shape.b_t
            ));
        }
        if self.capacity_frames < self.chunk_frames {
            return fail(format!(
                "capacity of {} frames cannot hold the {}-frame sink chunk",
                self.capacity_frames, self.chunk_frames
            ));
        }
        if self.window_frames < self.chunk_frames || !self.window_frames.is_multiple_of(self.chunk_frames) {
            return fail(format!(
                "window of {} frames is not a positive multiple of the {}-frame chunk",
                self.window_frames, self.chunk_frames
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadWeights {
    w_q: DenseMatrix,
    w_k: DenseMatrix,
    w_v: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    heads: Vec<HeadWeights>,
    w_o: DenseMatrix,
}

/// Seeded linear attention stack standing in for the video backbone.
///
/// Each layer projects tokens to per-head Q/K/V, runs block-sparse attention,
/// and adds `W_o · concat(heads)` back onto the residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    d_model: usize,
    n_heads: usize,
    layers: Vec<LayerWeights>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect();
    DenseMatrix::new(rows, cols, data).expect("rows x cols")
}

impl ToyDenoiser {
    pub fn new(seed: u64, d_model: usize, n_layers: usize, n_heads: usize) -> Result<Self> {
        if d_model == 0 || n_layers == 0 || n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "model dim {d_model} must be a positive multiple of {n_heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_head = d_model / n_heads;
        let in_std = (d_model as f32).powf(-0.5);
        let layers = (0..n_layers)
            .map(|_| {
                let heads = (0..n_heads)
                    .map(|_| HeadWeights {
                        w_q: gaussian_matrix(&mut rng, d_model, d_head, in_std),
                        w_k: gaussian_matrix(&mut rng, d_model, d_head, in_std),
                        w_v: gaussian_matrix(&mut rng, d_model, d_head, in_std),
                    })
                    .collect();
                LayerWeights {
                    heads,
                    w_o: gaussian_matrix(&mut rng, d_model, d_model, 0.5 * in_std),
                }
            })
            .collect();
        Ok(Self {
            d_model,
            n_heads,
            layers,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_units(&self) -> usize {
        self.n_layers() * self.n_heads
    }
}

/// Two layers, two heads, 16-wide model.
pub fn make_toy_denoiser(seed: u64) -> ToyDenoiser {
    ToyDenoiser::new(seed, 16, 2, 2).expect("default geometry is valid")
}

/// KV memory of one (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitMemory {
    pub persistent: PersistentMemory,
    pub window: LocalWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Denoise,
    CacheUpdate,
}

/// Everything one attention call saw, for observers that replay or analyze it.
pub struct AttentionEvent<'a> {
    pub frame: usize,
    pub step: usize,
    pub pass: Pass,
    pub layer: usize,
    pub head: usize,
    pub q: &'a BlockedTensor,
    pub view: &'a KvView<'a>,
    pub mask: &'a BlockMask,
    /// Coarse attention over local key blocks; `None` with an empty window.
    pub coarse_local: Option<&'a DenseMatrix>,
    pub output: &'a DenseMatrix,
}

pub trait RolloutObserver {
    fn on_attention(&mut self, _event: &AttentionEvent<'_>) {}
}

impl RolloutObserver for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSnapshot {
    pub layer: usize,
    pub head: usize,
    pub persistent: Vec<BlockId>,
    pub window: Vec<BlockId>,
    pub evicted: Vec<BlockId>,
    /// Coarse relevance of every key block at the cache update.
    pub scores: Vec<(BlockId, f64)>,
}

/// One record per denoiser call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame: usize,
    pub step: usize,
    pub timestep: f32,
    pub cache_updated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_enabled: Option<bool>,
    pub units: Vec<UnitSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryTrace {
    pub records: Vec<TraceRecord>,
}

impl MemoryTrace {
    pub fn denoise_calls(&self) -> usize {
        self.records.len()
    }

    pub fn cache_updates(&self) -> usize {
        self.records.iter().filter(|r| r.cache_updated).count()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub frames: Vec<Latent4D>,
    pub trace: MemoryTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    /// Gradient step sampled for this iteration, in `1..=T`.
    pub s: usize,
    pub frames: Vec<Latent4D>,
    pub trace: MemoryTrace,
}

struct ForwardOut {
    x0_hat: BlockedTensor,
    /// Current-chunk KV entries per unit.
    current: Vec<Vec<BlockEntry>>,
    /// Coarse scores over `[P; L; current]` per unit, on cache-update passes.
    scores: Vec<ScoreMap>,
}

struct Rollout<'a> {
    cfg: &'a RolloutConfig,
    model: &'a ToyDenoiser,
    sched: RenoiseSchedule,
    layout: BlockLayout,
    memory: Vec<UnitMemory>,
    rng: ChaCha8Rng,
}

impl<'a> Rollout<'a> {
    fn new(cfg: &'a RolloutConfig, model: &'a ToyDenoiser) -> Result<Self> {
        cfg.validate()?;
        if cfg.dim != model.d_model() {
            return Err(Error::Config(format!(
                "chunk feature dim {} does not match model dim {}",
                cfg.dim,
                model.d_model()
            )));
        }
        let capacity = cfg.capacity_blocks()?;
        let memory = (0..model.n_units())
            .map(|_| {
                Ok(UnitMemory {
                    persistent: PersistentMemory::new(capacity),
                    window: LocalWindow::new(cfg.window_chunks())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            model,
            sched: RenoiseSchedule::linear(),
            layout: cfg.chunk_layout()?,
            memory,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    fn gaussian(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.rng.sample::<f32, _>(StandardNormal)).collect()
    }

    fn initial_noise(&mut self) -> Result<BlockedTensor> {
        let (t, h, w, d) = (self.cfg.chunk_frames, self.cfg.height, self.cfg.width, self.cfg.dim);
        let x = Latent4D::new(t, h, w, d, self.gaussian(t * h * w * d))?;
        blockify(&x, self.cfg.block_shape)
    }

    /// One denoiser call on chunk `chunk_idx` (0-based).
    fn forward(
        &self,
        x: &BlockedTensor,
        t: f32,
        chunk_idx: usize,
        pass: Pass,
        step: usize,
        observer: &mut dyn RolloutObserver,
    ) -> Result<ForwardOut> {
        let model = self.model;
        let (n_tokens, b) = (self.layout.tokens(), self.layout.block_tokens());
        let n_qb = self.layout.n_blocks();
        let d_head = model.d_head();
        let head_layout = self.layout.with_feature_dim(d_head);
        let cfg_attn = AttentionConfig::new(d_head, model.n_heads())?;

        let sigma = self.sched.sigma(t);
        let c_in = 1.0 / (sigma * sigma + (1.0 - sigma) * (1.0 - sigma)).sqrt();
        let mut h = DenseMatrix::new(
            n_tokens,
            model.d_model(),
            x.data().iter().map(|&v| v * c_in).collect(),
        )?;

        let mut current = Vec::with_capacity(model.n_units());
        let mut scores = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            let mut concat = DenseMatrix::zeros(n_tokens, model.d_model());
            for (hd, w) in layer.heads.iter().enumerate() {
                let unit = &self.memory[l * model.n_heads() + hd];
                let q = BlockedTensor::from_parts(head_layout, matmul(&h, &w.w_q)?.into_data())?;
                let k = matmul(&h, &w.w_k)?;
                let v = matmul(&h, &w.w_v)?;
                let entries = (0..n_qb)
                    .map(|j| {
                        let rows = j * b * d_head..(j + 1) * b * d_head;
                        BlockEntry::new(
                            BlockId::from_stream(chunk_idx as u64, j as u64, n_qb as u64),
                            DenseMatrix::new(b, d_head, k.data()[rows.clone()].to_vec())?,
                            DenseMatrix::new(b, d_head, v.data()[rows].to_vec())?,
                            chunk_idx == 0,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;

                let view = KvView::new(&unit.persistent, &unit.window, &entries);
                let qc = compress_blocks(&q);
                let (mask, coarse_local) = if unit.window.n_blocks() == 0 {
                    (BlockMask::full(n_qb, view.persistent.len(), 0), None)
                } else {
                    let kc = compress_keys(view.local.iter().copied(), d_head)?;
                    let a_local = coarse_attention(&qc, &kc)?;
                    let mask = select_topk(&a_local, self.cfg.topk_ratio)?.with_persistent(view.persistent.len());
                    (mask, Some(a_local))
                };
                let y = attention_sparse_view(&q, &view, &mask, &cfg_attn)?;
                observer.on_attention(&AttentionEvent {
                    frame: chunk_idx + 1,
                    step,
                    pass,
                    layer: l,
                    head: hd,
                    q: &q,
                    view: &view,
                    mask: &mask,
                    coarse_local: coarse_local.as_ref(),
                    output: &y,
                });

                if pass == Pass::CacheUpdate {
                    let kc_all = compress_keys(view.blocks().map(|(_, e)| e), d_head)?;
                    let s = aggregate_scores(&coarse_attention(&qc, &kc_all)?);
                    scores.push(view.blocks().map(|(_, e)| e.id).zip(s.scores).collect::<ScoreMap>());
                }

                let cdata = concat.data_mut();
                let dm = model.d_model();
                for r in 0..n_tokens {
                    cdata[r * dm + hd * d_head..r * dm + (hd + 1) * d_head].copy_from_slice(y.row(r));
                }
                current.push(entries);
            }
            let delta = matmul(&concat, &layer.w_o)?;
            for (a, &dv) in h.data_mut().iter_mut().zip(delta.data()) {
                *a += dv;
            }
        }
        Ok(ForwardOut {
            x0_hat: BlockedTensor::from_parts(self.layout, h.into_data())?,
            current,
            scores,
        })
    }

    fn snapshots(&self, evicted: Option<&[Vec<BlockId>]>, scores: Option<&[ScoreMap]>) -> Vec<UnitSnapshot> {
        let heads = self.model.n_heads();
        self.memory
            .iter()
            .enumerate()
            .map(|(u, m)| UnitSnapshot {
                layer: u / heads,
                head: u % heads,
                persistent: m.persistent.ids(),
                window: m.window.ids(),
                evicted: evicted.map(|e| e[u].clone()).unwrap_or_default(),
                scores: scores
                    .map(|s| s[u].iter().map(|(&id, &v)| (id, v)).collect())
                    .unwrap_or_default(),
            })
            .collect()
    }

    fn update_cache(&mut self, out: ForwardOut) -> Result<Vec<Vec<BlockId>>> {
        let mut evicted_ids = Vec::with_capacity(self.memory.len());
        for ((unit, entries), scores) in self.memory.iter_mut().zip(out.current).zip(&out.scores) {
            let evicted = unit.window.push_chunk(entries)?;
            evicted_ids.push(evicted.ids());
            let p = std::mem::replace(&mut unit.persistent, PersistentMemory::new(0));
            unit.persistent = p.update(evicted, scores)?;
        }
        Ok(evicted_ids)
    }

    /// Runs every chunk down to step `stop` (1-based ladder index).
    fn run(
        &mut self,
        stop: usize,
        training: bool,
        observer: &mut dyn RolloutObserver,
    ) -> Result<(Vec<Latent4D>, MemoryTrace)> {
        let steps = self.cfg.steps();
        let mut frames = Vec::with_capacity(self.cfg.num_frames);
        let mut trace = MemoryTrace::default();
        for i in 0..self.cfg.num_frames {
            let mut x = self.initial_noise()?;
            for j in (stop..=steps).rev() {
                let t = self.cfg.timesteps[steps - j];
                let out = self.forward(&x, t, i, Pass::Denoise, j, observer)?;
                if j == stop {
                    frames.push(unblockify(&out.x0_hat)?);
                    let kv = self.forward(&out.x0_hat, 0.0, i, Pass::CacheUpdate, j, observer)?;
                    let scores = kv.scores.clone();
                    let evicted = self.update_cache(kv)?;
                    trace.records.push(TraceRecord {
                        frame: i + 1,
                        step: j,
                        timestep: t,
                        cache_updated: true,
                        grad_enabled: training.then_some(true),
                        units: self.snapshots(Some(&evicted), Some(&scores)),
                    });
                } else {
                    let eps = self.gaussian(out.x0_hat.data().len());
                    let t_next = self.cfg.timesteps[steps - j + 1];
                    let noisy = renoise(out.x0_hat.data(), &eps, t_next, &self.sched)?;
                    x = BlockedTensor::from_parts(self.layout, noisy)?;
                    trace.records.push(TraceRecord {
                        frame: i + 1,
                        step: j,
                        timestep: t,
                        cache_updated: false,
                        grad_enabled: training.then_some(false),
                        units: self.snapshots(None, None),
                    });
                }
            }
        }
        Ok((frames, trace))
    }
}

pub fn run_inference_observed(
    cfg: &RolloutConfig,
    denoiser: &ToyDenoiser,
    observer: &mut dyn RolloutObserver,
) -> Result<RolloutOutput> {
    let mut r = Rollout::new(cfg, denoiser)?;
    let (frames, trace) = r.run(1, false, observer)?;
    Ok(RolloutOutput { frames, trace })
}

pub fn run_inference(cfg: &RolloutConfig, denoiser: &ToyDenoiser) -> Result<RolloutOutput> {
    run_inference_observed(cfg, denoiser, &mut ())
}

/// One training-schedule iteration with a fixed gradient step `s`.
pub fn run_training_schedule_at(
    cfg: &RolloutConfig,
    denoiser: &ToyDenoiser,
    s: usize,
    observer: &mut dyn RolloutObserver,
) -> Result<TrainingTrace> {
    if s == 0 || s > cfg.steps() {
        return Err(Error::Config(format!("gradient step {s} outside 1..={}", cfg.steps())));
    }
    let mut r = Rollout::new(cfg, denoiser)?;
    let (frames, trace) = r.run(s, true, observer)?;
    Ok(TrainingTrace { s, frames, trace })
}

/// One training-schedule iteration; `s ~ Uniform{1..T}` is drawn from the
/// config seed before any frame is generated.
pub fn run_training_schedule(cfg: &RolloutConfig, denoiser: &ToyDenoiser) -> Result<TrainingTrace> {
    cfg.validate()?;
    let s = sample_grad_step(cfg.seed, cfg.steps());
    run_training_schedule_at(cfg, denoiser, s, &mut ())
}

/// The gradient step a training iteration with `seed` will use.
pub fn sample_grad_step(seed: u64, steps: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a stream separate from the one that draws the noise
    rng.set_stream(1);
    rng.random_range(1..=steps.max(1))
}

/// Records prior-decode attention recall during a rollout.
///
/// On every denoise call with a nonempty window, dense probabilities over
/// `[P; L]` are scored against the Top-K visibility each ratio in `topks`
/// would select from the same coarse attention. With `dump` set, each call's
/// probabilities and the rollout's own mask are written as
/// `L{l}H{h}_f{frame}_s{step}.probs.pbt` / `.mask.json`.
#[derive(Debug, Default)]
pub struct RecallProbe {
    pub topks: Vec<f64>,
    pub dump: Option<PathBuf>,
    /// Per ratio, one entry per observed call.
    pub recalls: Vec<Vec<UnitRecall>>,
    error: Option<Error>,
}

impl RecallProbe {
    pub fn new(topks: Vec<f64>, dump: Option<PathBuf>) -> Self {
        let recalls = vec![Vec::new(); topks.len()];
        Self {
            topks,
            dump,
            recalls,
            error: None,
        }
    }

    fn observe(&mut self, ev: &AttentionEvent<'_>) -> Result<()> {
        let Some(a_local) = ev.coarse_local else {
            return Ok(());
        };
        let d = ev.q.d();
        let kparts: Vec<&DenseMatrix> = ev.view.persistent.iter().chain(&ev.view.local).map(|e| &e.k).collect();
        let probs = attention_probs(&ev.q.to_matrix(), &DenseMatrix::vstack(d, &kparts)?, None)?;
        let n_p = ev.view.persistent.len();
        for (i, &ratio) in self.topks.iter().enumerate() {
            let mask = select_topk(a_local, ratio)?.with_persistent(n_p);
            let rows = row_recall(&probs, &mask)?;
            self.recalls[i].push(UnitRecall {
                layer: ev.layer,
                head: ev.head,
                recall: rows.iter().sum::<f64>() / rows.len().max(1) as f64,
            });
        }
        if let Some(dir) = &self.dump {
            let stem = format!("L{}H{}_f{:04}_s{}", ev.layer, ev.head, ev.frame, ev.step);
            write_tensor(dir.join(format!("{stem}.probs.pbt")), &Tensor::Matrix(probs))?;
            std::fs::write(dir.join(format!("{stem}.mask.json")), serde_json::to_vec(ev.mask)?)?;
        }
        Ok(())
    }

    /// Recall per `(layer, head)` averaged over calls, one entry per ratio.
    pub fn stats(self) -> Result<Vec<(f64, RecallStats)>> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(self
            .topks
            .into_iter()
            .zip(self.recalls)
            .map(|(ratio, calls)| (ratio, recall_by_unit(&calls)))
            .collect())
    }
}

impl RolloutObserver for RecallProbe {
    fn on_attention(&mut self, ev: &AttentionEvent<'_>) {
        if ev.pass != Pass::Denoise || self.error.is_some() {
            return;
        }
        if let Err(e) = self.observe(ev) {
            self.error = Some(e);
        }
    }
}

/// Averages repeated observations of each `(layer, head)` unit.
pub fn recall_by_unit(calls: &[UnitRecall]) -> RecallStats {
    let mut by_unit: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for c in calls {
        let slot = by_unit.entry((c.layer, c.head)).or_default();
        slot.0 += c.recall;
        slot.1 += 1;
    }
    RecallStats::from_units(
        by_unit
            .into_iter()
            .map(|((layer, head), (sum, n))| UnitRecall {
                layer,
                head,
                recall: sum / n as f64,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(frames: usize, steps: usize) -> RolloutConfig {
        RolloutConfig {
            num_frames: frames,
            timesteps: RolloutConfig::even_timesteps(steps),
            ..RolloutConfig::default()
        }
    }

    #[test]
    fn renoise_boundaries() {
        let s = RenoiseSchedule::linear();
        let x = [1.5f32, -0.0, 3.0];
        let e = [0.25f32, 7.0, -1.0];
        assert_eq!(renoise(&x, &e, 0.0, &s).unwrap(), x.to_vec());
        assert_eq!(renoise(&x, &e, 1.0, &s).unwrap(), e.to_vec());
        assert_eq!(renoise(&[2.0], &[0.0], 0.5, &s).unwrap(), vec![1.0]);
        assert!(renoise(&[1.0], &[1.0, 2.0], 0.5, &s).is_err());
    }

    #[test]
    fn custom_schedule_validation() {
        assert!(RenoiseSchedule::from_knots(vec![(0.1, 0.0)]).is_err());
        assert!(RenoiseSchedule::from_knots(vec![(0.0, 0.0), (0.5, 0.8), (1.0, 0.4)]).is_err());
        let s = RenoiseSchedule::from_knots(vec![(0.0, 0.0), (0.5, 0.8), (1.0, 1.0)]).unwrap();
        assert!((s.sigma(0.25) - 0.4).abs() < 1e-6);
        assert_eq!(s.sigma(0.0), 0.0);
    }

    #[test]
    fn default_ladder() {
        assert_eq!(RolloutConfig::even_timesteps(4), vec![1.0, 0.75, 0.5, 0.25]);
        assert_eq!(RolloutConfig::default().timesteps, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn config_conversion() {
        let cfg = RolloutConfig::default();
        // 3x8x8 chunk with (3,4,4) blocks -> 4 blocks per chunk
        assert_eq!(cfg.blocks_per_chunk().unwrap(), 4);
        assert_eq!(cfg.capacity_blocks().unwrap(), 8);
        assert_eq!(cfg.window_chunks(), 2);
    }

    #[test]
    fn config_validation_names_invariant() {
        let bad = RolloutConfig { num_frames: 0, ..RolloutConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("num_frames"));
        let bad = RolloutConfig { timesteps: vec![0.5, 0.75], ..RolloutConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("decreasing"));
        let bad = RolloutConfig { height: 6, ..RolloutConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RolloutConfig { window_frames: 4, ..RolloutConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RolloutConfig { capacity_frames: 0, ..RolloutConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_frame_single_step() {
        let out = run_inference(&small_cfg(1, 1), &make_toy_denoiser(3)).unwrap();
        assert_eq!(out.trace.denoise_calls(), 1);
        assert_eq!(out.trace.cache_updates(), 1);
        assert!(out.trace.records[0].units.iter().all(|u| u.evicted.is_empty()));
        assert_eq!(out.frames.len(), 1);
        assert_eq!(out.frames[0].dims(), [3, 8, 8, 16]);
    }

    #[test]
    fn four_by_four_loop() {
        let out = run_inference(&small_cfg(4, 4), &make_toy_denoiser(3)).unwrap();
        assert_eq!(out.trace.denoise_calls(), 16);
        assert_eq!(out.trace.cache_updates(), 4);
        assert!(out.trace.records.iter().filter(|r| r.cache_updated).all(|r| r.step == 1));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = small_cfg(1, 1);
        let model = make_toy_denoiser(5);
        let r = Rollout::new(&cfg, &model).unwrap();
        let zero = BlockedTensor::from_parts(r.layout, vec![0.0; r.layout.tokens() * cfg.dim]).unwrap();
        let out = r.forward(&zero, 0.5, 0, Pass::Denoise, 1, &mut ()).unwrap();
        assert!(out.x0_hat.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = small_cfg(3, 2);
        let a = run_inference(&cfg, &make_toy_denoiser(1)).unwrap();
        let b = run_inference(&cfg, &make_toy_denoiser(1)).unwrap();
        assert_eq!(a, b);
        let c = run_inference(&RolloutConfig { seed: 9, ..cfg }, &make_toy_denoiser(1)).unwrap();
        assert_ne!(a.frames, c.frames);
        let d = run_inference(&small_cfg(3, 2), &make_toy_denoiser(2)).unwrap();
        assert_ne!(a.frames, d.frames);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let out = run_inference(&small_cfg(3, 2), &make_toy_denoiser(1)).unwrap();
        let text = out.trace.to_jsonl();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(MemoryTrace::from_jsonl(&text).unwrap(), out.trace);
        assert!(!text.contains("grad_enabled"));
    }

    #[test]
    fn training_schedule_fixed_s() {
        let cfg = small_cfg(3, 4);
        let tr = run_training_schedule_at(&cfg, &make_toy_denoiser(1), 2, &mut ()).unwrap();
        let grads: Vec<(usize, usize)> = tr
            .trace
            .records
            .iter()
            .filter(|r| r.grad_enabled == Some(true))
            .map(|r| (r.frame, r.step))
            .collect();
        assert_eq!(grads, vec![(1, 2), (2, 2), (3, 2)]);
        let updates: Vec<(usize, usize)> = tr
            .trace
            .records
            .iter()
            .filter(|r| r.cache_updated)
            .map(|r| (r.frame, r.step))
            .collect();
        assert_eq!(updates, grads);
        assert_eq!(tr.trace.denoise_calls(), 3 * (4 - 2 + 1));
        assert!(run_training_schedule_at(&cfg, &make_toy_denoiser(1), 5, &mut ()).is_err());
    }

    #[test]
    fn training_with_one_step_matches_inference_pattern() {
        let cfg = small_cfg(2, 1);
        let tr = run_training_schedule(&cfg, &make_toy_denoiser(1)).unwrap();
        assert_eq!(tr.s, 1);
        let inf = run_inference(&cfg, &make_toy_denoiser(1)).unwrap();
        assert_eq!(tr.frames, inf.frames);
        let pattern = |t: &MemoryTrace| t.records.iter().map(|r| (r.frame, r.step, r.cache_updated)).collect::<Vec<_>>();
        assert_eq!(pattern(&tr.trace), pattern(&inf.trace));
    }
}
