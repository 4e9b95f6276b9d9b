//! Kernel benchmark harness: KV geometry arithmetic, memory footprint, and
//! wall-clock comparison of the routed sparse path against full attention
//! over the same KV, with a per-stage latency breakdown.
//!
//! Timed regions are single-threaded. The first [`WARMUP_REPS`] repetitions
//! are discarded and medians are reported.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_sparse_view, flop_count, AttentionConfig, FlopReport};
use crate::blockify::BlockedTensor;
use crate::error::{invalid, Result};
use crate::memory::{BlockEntry, BlockId, KvView, LocalWindow, PersistentMemory};
use crate::router::{coarse_attention, compress_blocks, compress_keys, select_topk, topk_budget, BlockMask};
use crate::tensor::DenseMatrix;

pub const WARMUP_REPS: usize = 3;

/// Dense medians below this are dominated by timer noise.
const MIN_RELIABLE: Duration = Duration::from_micros(200);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchGeometry {
    pub topk_ratio: f64,
    /// Current-chunk (query) token count.
    pub n_c: usize,
    /// `N_L / N_C`.
    pub local_ratio: f64,
    /// `N_P / N_L`.
    pub persist_ratio: f64,
    pub d: usize,
    pub n_heads: usize,
    pub reps: usize,
    pub block_tokens: usize,
    pub seed: u64,
}

impl Default for BenchGeometry {
    fn default() -> Self {
        Self {
            topk_ratio: 0.0625,
            n_c: 5376 / 8,
            local_ratio: 2.0,
            persist_ratio: 0.25,
            d: 64,
            n_heads: 1,
            reps: 5,
            block_tokens: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KvLengths {
    pub n_l: usize,
    pub n_p: usize,
    pub n_kv: usize,
}

fn integral(x: f64, what: &str) -> Result<usize> {
    let r = x.round();
    if !x.is_finite() || x < 0.0 || (x - r).abs() > 1e-9 {
        return Err(invalid(format!("{what} = {x} is not a whole token count")));
    }
    Ok(r as usize)
}

/// `N_L = r_L·N_C`, `N_P = r_P·N_L`, `N_KV = N_L + N_P`.
pub fn kv_length(g: &BenchGeometry) -> Result<KvLengths> {
    if g.local_ratio.is_nan() || g.local_ratio <= 0.0 || g.persist_ratio < 0.0 {
        return Err(invalid("local ratio must be positive and persist ratio nonnegative"));
    }
    let n_l = integral(g.local_ratio * g.n_c as f64, "N_L")?;
    let n_p = integral(g.persist_ratio * n_l as f64, "N_P")?;
    Ok(KvLengths {
        n_l,
        n_p,
        n_kv: n_l + n_p,
    })
}

/// `2 · layers · tokens · kv_heads · head_dim · bytes_per_element`.
pub fn kv_bytes(tokens: u64, layers: u64, kv_heads: u64, head_dim: u64, bytes_per_element: u64) -> u128 {
    2 * u128::from(layers) * u128::from(tokens) * u128::from(kv_heads) * u128::from(head_dim) * u128::from(bytes_per_element)
}

impl BenchGeometry {
    pub fn validate(&self) -> Result<KvLengths> {
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(invalid(format!("topk ratio {} is outside (0, 1]", self.topk_ratio)));
        }
        if self.d == 0 || self.n_heads == 0 || self.block_tokens == 0 || self.n_c == 0 {
            return Err(invalid("geometry sizes must be positive"));
        }
        let lens = kv_length(self)?;
        for (name, n) in [("N_C", self.n_c), ("N_L", lens.n_l), ("N_P", lens.n_p)] {
            if n % self.block_tokens != 0 {
                return Err(invalid(format!(
                    "{name} = {n} is not divisible by the {}-token block",
                    self.block_tokens
                )));
            }
        }
        Ok(lens)
    }

    pub fn local_blocks(&self) -> Result<usize> {
        Ok(self.validate()?.n_l / self.block_tokens)
    }

    /// Ideal FLOP ratio from the attention cost model.
    pub fn flops(&self) -> Result<FlopReport> {
        let lens = self.validate()?;
        let k = topk_budget(lens.n_l / self.block_tokens, self.topk_ratio)?;
        Ok(flop_count(self.n_c, lens.n_p, lens.n_l, self.block_tokens, k, self.d))
    }
}

/// The 24 rows of the kernel benchmark table, in table order.
pub fn appendix_grid() -> Vec<BenchGeometry> {
    let mut out = Vec::with_capacity(24);
    for topk in [0.0625, 0.125, 0.25] {
        for n_c in [5376, 21504] {
            for local in [2.0, 4.0] {
                for persist in [0.25, 0.5] {
                    out.push(BenchGeometry {
                        topk_ratio: topk,
                        n_c,
                        local_ratio: local,
                        persist_ratio: persist,
                        ..BenchGeometry::default()
                    });
                }
            }
        }
    }
    out
}

/// Divides `n_c` by `scale`, rounding down to the nearest multiple of the
/// block size at which `N_L` and `N_P` are also whole blocks.
pub fn scale_geometry(g: &BenchGeometry, scale: usize) -> BenchGeometry {
    let b = g.block_tokens.max(1);
    let top = (g.n_c / scale.max(1)) / b;
    (1..=top.max(1))
        .rev()
        .map(|m| BenchGeometry { n_c: m * b, ..*g })
        .find(|s| s.validate().is_ok())
        .unwrap_or(BenchGeometry { n_c: b, ..*g })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Compression,
    RepresentativeAttention,
    Broadcasting,
    TopkSelection,
    MaskGeneration,
    SparseAttention,
    Others,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Compression,
        Stage::RepresentativeAttention,
        Stage::Broadcasting,
        Stage::TopkSelection,
        Stage::MaskGeneration,
        Stage::SparseAttention,
        Stage::Others,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Compression => "compression",
            Stage::RepresentativeAttention => "representative_attention",
            Stage::Broadcasting => "broadcasting",
            Stage::TopkSelection => "topk_selection",
            Stage::MaskGeneration => "mask_generation",
            Stage::SparseAttention => "sparse_attention",
            Stage::Others => "others",
        }
    }
}

/// Accumulated wall time per stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    totals: [Duration; 7],
}

impl StageTimings {
    pub fn add(&mut self, stage: Stage, dt: Duration) {
        self.totals[stage as usize] += dt;
    }

    pub fn get(&self, stage: Stage) -> Duration {
        self.totals[stage as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageBreakdown {
    pub percentages: Vec<(Stage, f64)>,
}

impl StageBreakdown {
    pub fn get(&self, stage: Stage) -> f64 {
        self.percentages
            .iter()
            .find(|(s, _)| *s == stage)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn largest(&self) -> Stage {
        self.percentages
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(Stage::Others, |(s, _)| *s)
    }
}

pub fn stage_breakdown(timings: &StageTimings) -> StageBreakdown {
    let total: f64 = timings.totals.iter().map(Duration::as_secs_f64).sum();
    let percentages = Stage::ALL
        .iter()
        .map(|&s| {
            let share = if total > 0.0 {
                100.0 * timings.get(s).as_secs_f64() / total
            } else {
                0.0
            };
            (s, share)
        })
        .collect();
    StageBreakdown { percentages }
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
}

impl Latency {
    pub fn from_samples(samples: &[Duration]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let q = |p: f64| -> f64 {
            if ms.is_empty() {
                return 0.0;
            }
            let pos = p * (ms.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            ms[lo] + (ms[hi] - ms[lo]) * (pos - lo as f64)
        };
        Self {
            median_ms: q(0.5),
            q1_ms: q(0.25),
            q3_ms: q(0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub geometry: BenchGeometry,
    pub lengths: KvLengths,
    pub sparse: Latency,
    pub dense: Latency,
    /// Median over repetitions of the paired dense/sparse time ratio.
    pub speedup: f64,

    pub breakdown: StageBreakdown,
    pub flops: FlopReport,
    pub warnings: Vec<String>,
}

struct BenchData {
    q: BlockedTensor,
    persistent: PersistentMemory,
    window: LocalWindow,
}

fn random_block(rng: &mut ChaCha8Rng, id: u64, b: usize, d: usize) -> BlockEntry {
    let mut mat = |_: ()| {
        DenseMatrix::new(b, d, (0..b * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("b x d")
    };
    let k = mat(());
    let v = mat(());
    BlockEntry::new(BlockId(id), k, v, false).expect("matching shapes")
}

fn bench_data(g: &BenchGeometry, lens: &KvLengths) -> Result<BenchData> {
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let b = g.block_tokens;
    let q = DenseMatrix::new(
        g.n_c,
        g.d,
        (0..g.n_c * g.d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )?;
    let q = BlockedTensor::from_token_matrix(q, b)?;
    let n_p_blocks = lens.n_p / b;
    let dynamic = (0..n_p_blocks as u64).map(|i| random_block(&mut rng, i, b, g.d)).collect();
    let persistent = PersistentMemory::from_parts(n_p_blocks, Vec::new(), dynamic)?;

    // Local history arrives in chunks of N_C tokens where the ratio allows.
    let n_l_blocks = lens.n_l / b;
    let chunk_blocks = if lens.n_l.is_multiple_of(g.n_c) { g.n_c / b } else { n_l_blocks };
    let mut window = LocalWindow::new(n_l_blocks.div_ceil(chunk_blocks).max(1))?;
    let mut next = n_p_blocks as u64;
    let mut remaining = n_l_blocks;
    while remaining > 0 {
        let take = remaining.min(chunk_blocks);
        let chunk = (0..take)
            .map(|i| random_block(&mut rng, next + i as u64, b, g.d))
            .collect();
        next += take as u64;
        remaining -= take;
        window.push_chunk(chunk)?;
    }
    Ok(BenchData { q, persistent, window })
}

/// Runs the routed sparse path once, charging each stage to `timings`.
fn sparse_pass(data: &BenchData, g: &BenchGeometry, cfg: &AttentionConfig, timings: &mut StageTimings) -> Result<DenseMatrix> {
    let t = Instant::now();
    let qc = compress_blocks(&data.q);
    let kc = compress_keys(data.window.blocks(), g.d)?;
    timings.add(Stage::Compression, t.elapsed());

    let t = Instant::now();
    let a_local = coarse_attention(&qc, &kc)?;
    timings.add(Stage::RepresentativeAttention, t.elapsed());

    // hand each query tile its own coarse row
    let t = Instant::now();
    let tile_rows: Vec<DenseMatrix> = (0..a_local.rows())
        .map(|r| DenseMatrix::new(1, a_local.cols(), a_local.row(r).to_vec()))
        .collect::<Result<_>>()?;
    timings.add(Stage::Broadcasting, t.elapsed());

    let t = Instant::now();
    let per_tile = tile_rows
        .iter()
        .map(|row| select_topk(row, g.topk_ratio).map(|m| m.visible.into_iter().next().unwrap_or_default()))
        .collect::<Result<Vec<_>>>()?;
    timings.add(Stage::TopkSelection, t.elapsed());

    let t = Instant::now();
    let mask = BlockMask {
        n_query_blocks: data.q.n_blocks(),
        n_persistent_blocks: data.persistent.len(),
        n_local_blocks: kc.n_blocks(),
        visible: per_tile,
    };
    mask.validate()?;
    let view = KvView::new(&data.persistent, &data.window, &[]);
    timings.add(Stage::MaskGeneration, t.elapsed());

    let t = Instant::now();
    let out = attention_sparse_view(&data.q, &view, &mask, cfg)?;
    timings.add(Stage::SparseAttention, t.elapsed());
    Ok(out)
}

fn dense_pass(data: &BenchData, cfg: &AttentionConfig) -> Result<DenseMatrix> {
    let view = KvView::new(&data.persistent, &data.window, &[]);
    let mask = BlockMask::full(data.q.n_blocks(), data.persistent.len(), data.window.n_blocks());
    attention_sparse_view(&data.q, &view, &mask, cfg)
}

pub fn run_benchmark(g: &BenchGeometry) -> Result<LatencyReport> {
    let lens = g.validate()?;
    let cfg = AttentionConfig::new(g.d, g.n_heads)?;
    let data = bench_data(g, &lens)?;
    let mut warnings = Vec::new();
    if g.reps < 3 {
        warnings.push(format!("only {} timed repetitions; medians will be unstable", g.reps));
    }

    let mut timings = StageTimings::default();
    let mut sparse = Vec::with_capacity(g.reps);
    let mut dense = Vec::with_capacity(g.reps);
    for rep in 0..WARMUP_REPS + g.reps.max(1) {
        let warm = rep < WARMUP_REPS;
        let mut rep_timings = StageTimings::default();

        let time_sparse = |timings: &mut StageTimings| -> Result<Duration> {
            let t = Instant::now();
            for _ in 0..g.n_heads {
                std::hint::black_box(sparse_pass(&data, g, &cfg, timings)?);
            }
            Ok(t.elapsed())
        };
        let time_dense = || -> Result<Duration> {
            let t = Instant::now();
            for _ in 0..g.n_heads {
                std::hint::black_box(dense_pass(&data, &cfg)?);
            }
            Ok(t.elapsed())
        };
        // alternate which variant runs first
        let (sparse_dt, dense_dt) = if rep % 2 == 0 {
            let s = time_sparse(&mut rep_timings)?;
            (s, time_dense()?)
        } else {
            let d = time_dense()?;
            (time_sparse(&mut rep_timings)?, d)
        };

        if !warm {
            let staged: Duration = Stage::ALL[..6].iter().map(|&s| rep_timings.get(s)).sum();
            rep_timings.add(Stage::Others, sparse_dt.saturating_sub(staged));
            for s in Stage::ALL {
                timings.add(s, rep_timings.get(s));
            }
            sparse.push(sparse_dt);
            dense.push(dense_dt);
        }
    }

    let mut ratios: Vec<f64> = dense
        .iter()
        .zip(&sparse)
        .map(|(d, s)| d.as_secs_f64() / s.as_secs_f64().max(1e-12))
        .collect();
    ratios.sort_by(f64::total_cmp);
    let speedup = median(&ratios);
    let sparse = Latency::from_samples(&sparse);
    let dense = Latency::from_samples(&dense);
    if dense.median_ms * 1e-3 < MIN_RELIABLE.as_secs_f64() {
        warnings.push(format!(
            "dense median {:.4} ms is too small to time reliably",
            dense.median_ms
        ));
    }
    Ok(LatencyReport {
        geometry: *g,
        lengths: lens,
        speedup,
        sparse,
        dense,
        breakdown: stage_breakdown(&timings),
        flops: g.flops()?,
        warnings,
    })
}

pub const CSV_HEADER: &str = "topk,n_c,local_ratio,persist_ratio,n_kv,sparse_ms,dense_ms,speedup,\
compression_pct,representative_attention_pct,broadcasting_pct,topk_selection_pct,\
mask_generation_pct,sparse_attention_pct,others_pct,dense_flops,sparse_flops,flop_ratio";

impl LatencyReport {
    pub fn csv_row(&self) -> String {
        let g = &self.geometry;
        let mut fields = vec![
            g.topk_ratio.to_string(),
            g.n_c.to_string(),
            g.local_ratio.to_string(),
            g.persist_ratio.to_string(),
            self.lengths.n_kv.to_string(),
            format!("{:.4}", self.sparse.median_ms),
            format!("{:.4}", self.dense.median_ms),
            format!("{:.3}", self.speedup),
        ];
        fields.extend(Stage::ALL.iter().map(|&s| format!("{:.2}", self.breakdown.get(s))));
        fields.push(format!("{:.0}", self.flops.dense_flops));
        fields.push(format!("{:.0}", self.flops.sparse_flops));
        fields.push(format!("{:.3}", self.flops.ratio));
        fields.join(",")
    }

    pub fn json_row(&self) -> serde_json::Value {
        let g = &self.geometry;
        let mut row = serde_json::json!({
            "topk": g.topk_ratio,
            "n_c": g.n_c,
            "local_ratio": g.local_ratio,
            "persist_ratio": g.persist_ratio,
            "n_kv": self.lengths.n_kv,
            "sparse_ms": self.sparse.median_ms,
            "dense_ms": self.dense.median_ms,
            "speedup": self.speedup,
            "dense_flops": self.flops.dense_flops,
            "sparse_flops": self.flops.sparse_flops,
            "flop_ratio": self.flops.ratio,
        });
        for s in Stage::ALL {
            row[format!("{}_pct", s.label())] = self.breakdown.get(s).into();
        }
        row
    }
}
