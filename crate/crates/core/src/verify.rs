//! Seeded oracle and invariant suites.
//!
//! Every check compares a production path against an independently written
//! oracle: the dense masked reference for the streaming kernel, nested-loop
//! enumeration for blockify, rank counting for Top-C, and replayed counting
//! for rollout traces.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_reference, attention_sparse, AttentionConfig};
use crate::blockify::{block_index_map, blockify, unblockify, BlockLayout, BlockShape, BlockedTensor};
use crate::error::Result;
use crate::memory::{assemble_kv, BlockEntry, BlockId, EvictionBatch, LocalWindow, PersistentMemory, ScoreMap};
use crate::rollout::{make_toy_denoiser, run_inference, MemoryTrace, RolloutConfig};
use crate::router::{build_mask, coarse_attention, compress_blocks, compress_keys, select_topk, BlockMask};
use crate::tensor::{DenseMatrix, Latent4D};

pub const TOPK_GRID: [f64; 4] = [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

/// Deliberate corruption used as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Removes one sink from persistent memory after each Top-C update.
    DropSink,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seeds: usize,
    pub base_seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 200,
            base_seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<Counterexample>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>6} {:>8}  status", "suite", "cases", "failures")?;
        for s in &self.suites {
            let status = if s.passed() { "pass" } else { "FAIL" };
            writeln!(f, "{:<22} {:>6} {:>8}  {status}", s.name, s.cases, s.failures.len())?;
        }
        for s in self.suites.iter().filter(|s| !s.passed()) {
            for c in s.failures.iter().take(5) {
                writeln!(f, "{} seed {}: {}", s.name, c.seed, c.detail)?;
            }
        }
        Ok(())
    }
}

fn rng_for(seed: u64, suite: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(suite);
    rng
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0f32..2.0)).collect())
        .expect("rows x cols")
}

fn random_entry(rng: &mut ChaCha8Rng, id: u64, b: usize, d: usize, is_sink: bool) -> BlockEntry {
    let k = random_matrix(rng, b, d);
    let v = random_matrix(rng, b, d);
    BlockEntry::new(BlockId(id), k, v, is_sink).expect("matching shapes")
}

/// A random PBSA problem: queries, persistent memory, a multi-chunk window.
pub struct OracleCase {
    pub q: BlockedTensor,
    pub persistent: PersistentMemory,
    pub window: LocalWindow,
    pub topk_ratio: f64,
}

impl OracleCase {
    /// `n_q ≤ 8` query blocks, `n_ℓ ≤ 16` local blocks, `b ≤ 16`, `d ≤ 32`.
    pub fn random(seed: u64, topk_ratio: Option<f64>) -> Self {
        let mut rng = rng_for(seed, 1);
        let n_q = rng.random_range(1..=8);
        let n_l: usize = rng.random_range(1..=16);
        let n_p = rng.random_range(0..=6);
        let b = rng.random_range(1..=16);
        let d = rng.random_range(1..=32);
        let topk_ratio = topk_ratio.unwrap_or_else(|| TOPK_GRID[rng.random_range(0..TOPK_GRID.len())]);

        let mut id = 0u64;
        let dynamic = (0..n_p)
            .map(|_| {
                id += 1;
                random_entry(&mut rng, id, b, d, false)
            })
            .collect();
        let persistent = PersistentMemory::from_parts(n_p, Vec::new(), dynamic).expect("fits");

        let chunk = rng.random_range(1..=n_l);
        let mut window = LocalWindow::new(n_l.div_ceil(chunk)).expect("capacity >= 1");
        let mut left = n_l;
        while left > 0 {
            let take = left.min(chunk);
            let entries = (0..take)
                .map(|_| {
                    id += 1;
                    random_entry(&mut rng, id, b, d, false)
                })
                .collect();
            window.push_chunk(entries).expect("fresh ids");
            left -= take;
        }
        let q = BlockedTensor::from_token_matrix(random_matrix(&mut rng, n_q * b, d), b).expect("whole blocks");
        Self {
            q,
            persistent,
            window,
            topk_ratio,
        }
    }

    pub fn mask(&self) -> Result<BlockMask> {
        let qc = compress_blocks(&self.q);
        let kc = compress_keys(self.window.blocks(), self.q.d())?;
        Ok(select_topk(&coarse_attention(&qc, &kc)?, self.topk_ratio)?.with_persistent(self.persistent.len()))
    }

    pub fn sparse(&self, mask: &BlockMask) -> Result<DenseMatrix> {
        let cfg = AttentionConfig::new(self.q.d(), 1)?;
        attention_sparse(&self.q, &self.persistent, &self.window, mask, &cfg)
    }

    /// Dense reference; with `mask = None` nothing is masked.
    pub fn reference(&self, mask: Option<&BlockMask>) -> Result<DenseMatrix> {
        let kv = assemble_kv(&self.persistent, &self.window)?;
        let b = self.q.block_tokens();
        let m = match mask {
            Some(m) => build_mask(m, b)?,
            None => DenseMatrix::zeros(self.q.n_blocks() * b, kv.k.rows()),
        };
        attention_reference(&self.q.to_matrix(), &kv.k, &kv.v, &m)
    }

    /// Max-abs gap between the sparse kernel and the masked reference.
    pub fn error(&self) -> Result<f32> {
        let mask = self.mask()?;
        self.sparse(&mask)?.max_abs_diff(&self.reference(Some(&mask))?)
    }
}

fn check_oracle(seed: u64) -> std::result::Result<(), String> {
    let case = OracleCase::random(seed, None);
    let err = case.error().map_err(|e| e.to_string())?;
    if err <= 1e-5 {
        Ok(())
    } else {
        Err(format!(
            "max-abs error {err:e} at n_q={} b={} d={} topk={}",
            case.q.n_blocks(),
            case.q.block_tokens(),
            case.q.d(),
            case.topk_ratio
        ))
    }
}

fn check_full_density(seed: u64) -> std::result::Result<(), String> {
    let case = OracleCase::random(seed, Some(1.0));
    let mask = case.mask().map_err(|e| e.to_string())?;
    let sparse = case.sparse(&mask).map_err(|e| e.to_string())?;
    let dense = case.reference(None).map_err(|e| e.to_string())?;
    let err = sparse.max_abs_diff(&dense).map_err(|e| e.to_string())?;
    if err <= 1e-6 {
        Ok(())
    } else {
        Err(format!("full-density output differs from unmasked attention by {err:e}"))
    }
}

/// `(t, h, w)` extents with the block shapes that tile them.
pub fn blockify_grid() -> Vec<((usize, usize, usize), BlockShape)> {
    let bs = |t, h, w| BlockShape { b_t: t, b_h: h, b_w: w };
    vec![
        ((3, 8, 8), bs(3, 4, 4)),
        ((6, 8, 8), bs(3, 4, 4)),
        ((9, 12, 8), bs(3, 4, 4)),
        ((3, 4, 4), bs(3, 4, 4)),
        ((1, 8, 8), bs(1, 8, 8)),
        ((3, 8, 8), bs(1, 8, 8)),
        ((4, 16, 8), bs(1, 8, 8)),
        ((2, 3, 5), bs(1, 1, 1)),
        ((4, 4, 2), bs(2, 2, 2)),
        ((2, 6, 4), bs(2, 3, 2)),
        ((5, 2, 7), bs(5, 2, 7)),
    ]
}

/// Walks blocks in block-major order and token offsets in raster order,
/// checking each position against the production layout.
pub fn check_blockify(extent: (usize, usize, usize), shape: BlockShape, d: usize, seed: u64) -> std::result::Result<(), String> {
    let (t, h, w) = extent;
    let mut rng = rng_for(seed, 3);
    let x = Latent4D::new(t, h, w, d, (0..t * h * w * d).map(|_| rng.random::<f32>()).collect())
        .map_err(|e| e.to_string())?;
    let xb = blockify(&x, shape).map_err(|e| e.to_string())?;
    let layout = BlockLayout::new(t, h, w, d, shape).map_err(|e| e.to_string())?;
    let back = unblockify(&xb).map_err(|e| e.to_string())?;
    let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    if bits(back.data()) != bits(x.data()) {
        return Err(format!("{extent:?}/{shape:?}: round trip is not bit-exact"));
    }

    let (nt, nh, nw) = (t / shape.b_t, h / shape.b_h, w / shape.b_w);
    let mut block = 0;
    for it in 0..nt {
        for ih in 0..nh {
            for iw in 0..nw {
                let mut offset = 0;
                for dt in 0..shape.b_t {
                    for dh in 0..shape.b_h {
                        for dw in 0..shape.b_w {
                            let (tt, hh, ww) = (it * shape.b_t + dt, ih * shape.b_h + dh, iw * shape.b_w + dw);
                            let flat = (tt * h + hh) * w + ww;
                            let got = block_index_map(&layout, flat).map_err(|e| e.to_string())?;
                            if got != (block, offset) {
                                return Err(format!(
                                    "{extent:?}/{shape:?}: token ({tt},{hh},{ww}) maps to {got:?}, expected ({block},{offset})"
                                ));
                            }
                            let src = &x.data()[flat * d..(flat + 1) * d];
                            let dst = &xb.block(block)[offset * d..(offset + 1) * d];
                            if bits(src) != bits(dst) {
                                return Err(format!("{extent:?}/{shape:?}: token ({tt},{hh},{ww}) payload moved"));
                            }
                            offset += 1;
                        }
                    }
                }
                block += 1;
            }
        }
    }
    Ok(())
}

/// A random Top-C update problem with at most 16 candidates.
#[derive(Debug, Clone)]
pub struct TopCCase {
    pub memory: PersistentMemory,
    pub evicted: EvictionBatch,
    pub scores: ScoreMap,
}

impl TopCCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = rng_for(seed, 4);
        let capacity = rng.random_range(1..=8);
        let n_sinks = rng.random_range(0..=capacity.min(3));
        let n_dynamic = rng.random_range(0..=capacity - n_sinks);
        let n_evicted_sinks = rng.random_range(0..=(capacity - n_sinks).min(2));
        let n_evicted = rng.random_range(0..=(16 - n_dynamic).min(10));

        let mut ids: Vec<u64> = (0..64).collect();
        ids.shuffle(&mut rng);
        let mut ids = ids.into_iter();
        let mut entry = |rng: &mut ChaCha8Rng, sink| {
            let mut e = random_entry(rng, ids.next().expect("enough ids"), 1, 2, sink);
            // coarse score grid so ties are common
            e.score = f64::from(rng.random_range(0..6u8)) / 4.0;
            e
        };
        let sinks: Vec<_> = (0..n_sinks).map(|_| entry(&mut rng, true)).collect();
        let dynamic: Vec<_> = (0..n_dynamic).map(|_| entry(&mut rng, false)).collect();
        let mut evicted: Vec<_> = (0..n_evicted_sinks).map(|_| entry(&mut rng, true)).collect();
        evicted.extend((0..n_evicted).map(|_| entry(&mut rng, false)));

        let mut scores = ScoreMap::new();
        for e in dynamic.iter().chain(&evicted).chain(&sinks) {
            if !e.is_sink || rng.random_bool(0.5) {
                scores.insert(e.id, f64::from(rng.random_range(0..6u8)) / 4.0);
            }
        }
        Self {
            memory: PersistentMemory::from_parts(capacity, sinks, dynamic).expect("fits"),
            evicted: EvictionBatch { entries: evicted },
            scores,
        }
    }

    /// Expected `(sinks, dynamic)` id sets by counting how many candidates
    /// outrank each one.
    pub fn oracle(&self) -> (BTreeSet<BlockId>, BTreeSet<BlockId>) {
        let sinks: BTreeSet<BlockId> = self
            .memory
            .sinks()
            .iter()
            .chain(self.evicted.entries.iter().filter(|e| e.is_sink))
            .map(|e| e.id)
            .collect();
        let candidates: Vec<(BlockId, f64)> = self
            .memory
            .dynamic()
            .iter()
            .chain(self.evicted.entries.iter().filter(|e| !e.is_sink))
            .map(|e| (e.id, self.scores[&e.id]))
            .collect();
        let slots = self.memory.capacity() - sinks.len();
        let dynamic = candidates
            .iter()
            .filter(|&&(id, s)| {
                let above = candidates
                    .iter()
                    .filter(|&&(oid, os)| os > s || (os == s && oid < id))
                    .count();
                above < slots
            })
            .map(|&(id, _)| id)
            .collect();
        (sinks, dynamic)
    }
}

pub fn check_topc(case: &TopCCase, fault: Option<Fault>) -> std::result::Result<(), String> {
    let (want_sinks, want_dynamic) = case.oracle();
    let mut got = case
        .memory
        .clone()
        .update(case.evicted.clone(), &case.scores)
        .map_err(|e| e.to_string())?;
    if fault == Some(Fault::DropSink) && !got.sinks().is_empty() {
        let sinks = got.sinks()[1..].to_vec();
        let dynamic = got.dynamic().to_vec();
        got = PersistentMemory::from_parts(got.capacity(), sinks, dynamic).map_err(|e| e.to_string())?;
    }
    if got.len() > got.capacity() {
        return Err(format!("|P| = {} exceeds C = {}", got.len(), got.capacity()));
    }
    let got_sinks: BTreeSet<BlockId> = got.sinks().iter().map(|e| e.id).collect();
    if let Some(lost) = want_sinks.difference(&got_sinks).next() {
        return Err(format!("sink retention violated: sink block {} was dropped", lost.0));
    }
    if got_sinks != want_sinks {
        return Err(format!("unexpected sinks {got_sinks:?}"));
    }
    let got_dynamic: BTreeSet<BlockId> = got.dynamic().iter().map(|e| e.id).collect();
    if got_dynamic != want_dynamic {
        return Err(format!("retained {got_dynamic:?}, oracle keeps {want_dynamic:?}"));
    }
    Ok(())
}

/// Replays the inference trace contract for `cfg`.
pub fn check_inference_trace(cfg: &RolloutConfig, trace: &MemoryTrace) -> std::result::Result<(), String> {
    let (m, t) = (cfg.num_frames, cfg.steps());
    if trace.denoise_calls() != m * t {
        return Err(format!("{} denoise calls, expected M·T = {}", trace.denoise_calls(), m * t));
    }
    if trace.cache_updates() != m {
        return Err(format!("{} cache updates, expected {m}", trace.cache_updates()));
    }
    let c = cfg.capacity_blocks().map_err(|e| e.to_string())?;
    let l_blocks = cfg.window_chunks() * cfg.blocks_per_chunk().map_err(|e| e.to_string())?;
    let mut last_evicted: Vec<Option<BlockId>> = Vec::new();
    for (i, r) in trace.records.iter().enumerate() {
        let (frame, step) = (i / t + 1, t - i % t);
        if (r.frame, r.step) != (frame, step) {
            return Err(format!("record {i} is (frame {}, step {}), expected ({frame}, {step})", r.frame, r.step));
        }
        if r.cache_updated != (step == 1) {
            return Err(format!("frame {frame} step {step}: cache_updated = {}", r.cache_updated));
        }
        last_evicted.resize(r.units.len(), None);
        for (u, unit) in r.units.iter().enumerate() {
            if unit.persistent.len() > c {
                return Err(format!("frame {frame}: |P| = {} > C = {c}", unit.persistent.len()));
            }
            if unit.window.len() > l_blocks {
                return Err(format!("frame {frame}: window holds {} > {l_blocks} blocks", unit.window.len()));
            }
            for &id in &unit.evicted {
                if last_evicted[u].is_some_and(|prev| id <= prev) {
                    return Err(format!("frame {frame}: eviction id {} not increasing", id.0));
                }
                last_evicted[u] = Some(id);
            }
        }
    }
    Ok(())
}

fn check_trace(seed: u64) -> std::result::Result<(), String> {
    let mut rng = rng_for(seed, 5);
    let steps = [1, 2, 4][rng.random_range(0..3)];
    let cfg = RolloutConfig {
        num_frames: rng.random_range(1..=6),
        timesteps: RolloutConfig::even_timesteps(steps),
        topk_ratio: TOPK_GRID[rng.random_range(0..TOPK_GRID.len())],
        seed,
        ..RolloutConfig::default()
    };
    let model = make_toy_denoiser(seed);
    let a = run_inference(&cfg, &model).map_err(|e| e.to_string())?;
    check_inference_trace(&cfg, &a.trace)?;
    let b = run_inference(&cfg, &model).map_err(|e| e.to_string())?;
    if a.trace.to_jsonl() != b.trace.to_jsonl() || a.frames != b.frames {
        return Err("rerun with identical seed differs".into());
    }
    Ok(())
}

fn run_suite(name: &'static str, seeds: impl Iterator<Item = u64>, check: impl Fn(u64) -> std::result::Result<(), String>) -> SuiteResult {
    let mut cases = 0;
    let mut failures = Vec::new();
    for seed in seeds {
        cases += 1;
        if let Err(detail) = check(seed) {
            failures.push(Counterexample { seed, detail });
        }
    }
    SuiteResult { name, cases, failures }
}

/// Rollouts are the slowest case; their suite is capped.
const TRACE_CASES: usize = 8;

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let seeds = || opts.base_seed..opts.base_seed + opts.seeds as u64;
    let fault = opts.fault;
    let grid = blockify_grid();
    let suites = vec![
        run_suite("sparse_vs_reference", seeds(), check_oracle),
        run_suite("full_density", seeds().take(50.min(opts.seeds)), check_full_density),
        run_suite("blockify", 0..(grid.len() * 2) as u64, |i| {
            let (extent, shape) = grid[i as usize / 2];
            check_blockify(extent, shape, 1 + 2 * (i as usize % 2), opts.base_seed + i)
        }),
        run_suite("topc", seeds(), |s| check_topc(&TopCCase::random(s), fault)),
        run_suite("rollout_trace", seeds().take(TRACE_CASES.min(opts.seeds)), check_trace),
    ];
    VerifyReport { suites }
}
