//! Fine stage of persistent block-sparse attention.
//!
//! [`attention_sparse`] walks only the visible key blocks of each query block
//! and folds them into a streaming softmax (running max, rescaled sum and
//! accumulator). [`attention_reference`] materializes the full masked score
//! matrix and is the oracle the sparse path is checked against.

use serde::Serialize;

use crate::blockify::BlockedTensor;
use crate::error::{invalid, shape, Result};
use crate::memory::{BlockEntry, KvView, LocalWindow, PersistentMemory};
use crate::router::BlockMask;
use crate::tensor::{masked_softmax_rows, matmul, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub d: usize,
    pub n_heads: usize,
    pub scale: f64,
}

impl AttentionConfig {
    pub fn new(d: usize, n_heads: usize) -> Result<Self> {
        if d == 0 || n_heads == 0 {
            return Err(invalid("head dim and head count must be positive"));
        }
        Ok(Self {
            d,
            n_heads,
            scale: (d as f64).powf(-0.5),
        })
    }
}

/// Masked attention probabilities `softmax(q·kᵀ/√d + mask)`.
pub fn attention_probs(q: &DenseMatrix, k_cat: &DenseMatrix, mask: Option<&DenseMatrix>) -> Result<DenseMatrix> {
    if q.cols() != k_cat.cols() {
        return Err(shape(format!("q has d={}, k has d={}", q.cols(), k_cat.cols())));
    }
    let mut logits = matmul(q, &k_cat.transpose())?;
    let scale = (q.cols() as f64).powf(-0.5);
    for x in logits.data_mut() {
        *x = (f64::from(*x) * scale) as f32;
    }
    masked_softmax_rows(&logits, mask)
}

/// Dense oracle: `softmax(q·kᵀ/√d + mask)·v`.
pub fn attention_reference(
    q: &DenseMatrix,
    k_cat: &DenseMatrix,
    v_cat: &DenseMatrix,
    mask: &DenseMatrix,
) -> Result<DenseMatrix> {
    if k_cat.rows() != v_cat.rows() || k_cat.cols() != v_cat.cols() {
        return Err(shape("k and v differ in shape"));
    }
    if mask.rows() != q.rows() || mask.cols() != k_cat.rows() {
        return Err(shape(format!(
            "mask {}x{} for {} queries over {} keys",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k_cat.rows()
        )));
    }
    let probs = attention_probs(q, k_cat, Some(mask))?;
    matmul(&probs, v_cat)
}

#[inline]
fn dot(q: &[f64], k: &[f32]) -> f64 {
    // four fixed lanes, combined in a fixed order
    let mut lanes = [0.0f64; 4];
    let mut qc = q.chunks_exact(4);
    let mut kc = k.chunks_exact(4);
    for (a, b) in (&mut qc).zip(&mut kc) {
        lanes[0] += a[0] * f64::from(b[0]);
        lanes[1] += a[1] * f64::from(b[1]);
        lanes[2] += a[2] * f64::from(b[2]);
        lanes[3] += a[3] * f64::from(b[3]);
    }
    let mut tail = 0.0;
    for (a, b) in qc.remainder().iter().zip(kc.remainder()) {
        tail += a * f64::from(*b);
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Per-group budget for query and accumulator state.
const TILE_GROUP_BYTES: usize = 256 * 1024;

/// Streaming softmax state for one tile of query rows.
struct OnlineTile {
    d: usize,
    max: Vec<f64>,
    sum: Vec<f64>,
    acc: Vec<f64>,
    q: Vec<f64>,
    scores: Vec<f64>,
}

impl OnlineTile {
    fn new(rows: usize, d: usize) -> Self {
        Self {
            d,
            max: vec![f64::NEG_INFINITY; rows],
            sum: vec![0.0; rows],
            acc: vec![0.0; rows * d],
            q: vec![0.0; rows * d],
            scores: Vec::new(),
        }
    }

    fn reset(&mut self, q: &[f32], scale: f64) {
        self.max.fill(f64::NEG_INFINITY);
        self.sum.fill(0.0);
        self.acc.fill(0.0);
        for (dst, &src) in self.q.iter_mut().zip(q) {
            *dst = f64::from(src) * scale;
        }
    }

    fn absorb(&mut self, block: &BlockEntry) {
        let d = self.d;
        let n = block.tokens();
        let (k, v) = (block.k.data(), block.v.data());
        self.scores.resize(n, 0.0);
        for r in 0..self.max.len() {
            let qr = &self.q[r * d..(r + 1) * d];
            let mut block_max = f64::NEG_INFINITY;
            for (j, s) in self.scores.iter_mut().enumerate() {
                *s = dot(qr, &k[j * d..(j + 1) * d]);
                block_max = block_max.max(*s);
            }
            let acc = &mut self.acc[r * d..(r + 1) * d];
            if block_max > self.max[r] {
                let alpha = (self.max[r] - block_max).exp();
                self.sum[r] *= alpha;
                acc.iter_mut().for_each(|a| *a *= alpha);
                self.max[r] = block_max;
            }
            let m = self.max[r];
            let mut sum = 0.0;
            for (j, &s) in self.scores.iter().enumerate() {
                let p = (s - m).exp();
                sum += p;
                for (a, &vv) in acc.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *a += p * f64::from(vv);
                }
            }
            self.sum[r] += sum;
        }
    }

    fn emit(&self, out: &mut Vec<f32>) {
        let d = self.d;
        for r in 0..self.max.len() {
            let l = self.sum[r];
            let acc = &self.acc[r * d..(r + 1) * d];
            if l > 0.0 {
                out.extend(acc.iter().map(|a| (a / l) as f32));
            } else {
                out.extend(std::iter::repeat_n(0.0, d));
            }
        }
    }
}

fn check_geometry(q_blocks: &BlockedTensor, view: &KvView<'_>, mask: &BlockMask, cfg: &AttentionConfig) -> Result<()> {
    mask.validate()?;
    let (b, d) = (q_blocks.block_tokens(), q_blocks.d());
    if d != cfg.d {
        return Err(shape(format!("queries have d={d}, config says {}", cfg.d)));
    }
    if mask.n_query_blocks != q_blocks.n_blocks() {
        return Err(shape(format!(
            "mask covers {} query blocks, got {}",
            mask.n_query_blocks,
            q_blocks.n_blocks()
        )));
    }
    if mask.n_persistent_blocks != view.persistent.len() || mask.n_local_blocks != view.local.len() {
        return Err(shape(format!(
            "mask expects {}+{} persistent+local blocks, memory has {}+{}",
            mask.n_persistent_blocks,
            mask.n_local_blocks,
            view.persistent.len(),
            view.local.len()
        )));
    }
    if let Some((_, e)) = view.blocks().find(|(_, e)| e.tokens() != b || e.dim() != d) {
        return Err(shape(format!(
            "block {} is {}x{}, expected {b}x{d}",
            e.id.0,
            e.tokens(),
            e.dim()
        )));
    }
    Ok(())
}

/// Block-sparse attention over a full KV view: persistent and current blocks
/// densely, local blocks only where `mask` makes them visible.
pub fn attention_sparse_view(
    q_blocks: &BlockedTensor,
    view: &KvView<'_>,
    mask: &BlockMask,
    cfg: &AttentionConfig,
) -> Result<DenseMatrix> {
    check_geometry(q_blocks, view, mask, cfg)?;
    let (b, d) = (q_blocks.block_tokens(), q_blocks.d());
    let n_qb = q_blocks.n_blocks();
    // Tiles of one group share each KV block while it is cache-resident.
    // Every tile still absorbs its blocks in the same order.
    let group = (TILE_GROUP_BYTES / (b * d * 16).max(1)).clamp(1, n_qb.max(1));
    let mut out = Vec::with_capacity(n_qb * b * d);
    let mut tiles: Vec<OnlineTile> = (0..group).map(|_| OnlineTile::new(b, d)).collect();
    let mut cursor = vec![0usize; group];
    for first in (0..n_qb).step_by(group) {
        let members = first..(first + group).min(n_qb);
        let tiles = &mut tiles[..members.len()];
        for (tile, qb) in tiles.iter_mut().zip(members.clone()) {
            tile.reset(q_blocks.block(qb), cfg.scale);
        }
        for e in &view.persistent {
            tiles.iter_mut().for_each(|t| t.absorb(e));
        }
        cursor.fill(0);
        for (lb, e) in view.local.iter().enumerate() {
            for ((tile, qb), c) in tiles.iter_mut().zip(members.clone()).zip(cursor.iter_mut()) {
                if mask.visible[qb].get(*c) == Some(&lb) {
                    tile.absorb(e);
                    *c += 1;
                }
            }
        }
        for e in &view.current {
            tiles.iter_mut().for_each(|t| t.absorb(e));
        }
        for tile in tiles.iter() {
            tile.emit(&mut out);
        }
    }
    DenseMatrix::new(n_qb * b, d, out)
}

pub fn attention_sparse(
    q_blocks: &BlockedTensor,
    p: &PersistentMemory,
    window: &LocalWindow,
    mask: &BlockMask,
    cfg: &AttentionConfig,
) -> Result<DenseMatrix> {
    attention_sparse_view(q_blocks, &KvView::new(p, window, &[]), mask, cfg)
}

/// Per-row share of dense probability mass inside the visible set.
pub fn row_recall(dense_probs: &DenseMatrix, mask: &BlockMask) -> Result<Vec<f64>> {
    mask.validate()?;
    let n_blocks = mask.n_persistent_blocks + mask.n_local_blocks;
    if n_blocks == 0 || !dense_probs.cols().is_multiple_of(n_blocks) {
        return Err(shape(format!(
            "{} probability columns do not split over {n_blocks} key blocks",
            dense_probs.cols()
        )));
    }
    let b = dense_probs.cols() / n_blocks;
    if dense_probs.rows() != mask.n_query_blocks * b {
        return Err(shape(format!(
            "{} probability rows for {} query blocks of {b}",
            dense_probs.rows(),
            mask.n_query_blocks
        )));
    }
    let n_p = mask.n_persistent_blocks * b;
    Ok((0..dense_probs.rows())
        .map(|r| {
            let row = dense_probs.row(r);
            let persistent: f64 = row[..n_p].iter().map(|&x| f64::from(x)).sum();
            let local: f64 = mask.visible[r / b]
                .iter()
                .flat_map(|&lb| &row[n_p + lb * b..n_p + (lb + 1) * b])
                .map(|&x| f64::from(x))
                .sum();
            (persistent + local).clamp(0.0, 1.0)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct RecallUnit {
    pub layer: usize,
    pub head: usize,
    pub probs: DenseMatrix,
    pub mask: BlockMask,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitRecall {
    pub layer: usize,
    pub head: usize,
    pub recall: f64,
}

impl UnitRecall {
    pub fn label(&self) -> String {
        format!("L{}H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallStats {
    pub mean: f64,
    /// Population standard deviation across units.
    pub std: f64,
    pub per_unit: Vec<UnitRecall>,
}

impl RecallStats {
    pub fn from_units(per_unit: Vec<UnitRecall>) -> Self {
        let n = per_unit.len().max(1) as f64;
        let mean = per_unit.iter().map(|u| u.recall).sum::<f64>() / n;
        let var = per_unit.iter().map(|u| (u.recall - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            per_unit,
        }
    }
}

/// Unit recall is the mean row recall; stats are taken across units.
pub fn attention_recall(units: &[RecallUnit]) -> Result<RecallStats> {
    let per_unit = units
        .iter()
        .map(|u| {
            let rows = row_recall(&u.probs, &u.mask)?;
            let recall = rows.iter().sum::<f64>() / rows.len().max(1) as f64;
            Ok(UnitRecall {
                layer: u.layer,
                head: u.head,
                recall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallStats::from_units(per_unit))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopReport {
    pub dense_flops: f64,
    pub sparse_flops: f64,
    pub ratio: f64,
}

/// Multiply-adds count as two flops; exponentials are not counted.
pub fn flop_count(n_q: usize, n_p: usize, n_l: usize, b: usize, k_selected: usize, d: usize) -> FlopReport {
    let (n_q, n_p, n_l, b, k, d) = (n_q as f64, n_p as f64, n_l as f64, b as f64, k_selected as f64, d as f64);
    let dense = 4.0 * n_q * (n_p + n_l) * d;
    let coarse = 4.0 * (n_q / b) * ((n_p + n_l) / b) * d;
    let sparse = 4.0 * n_q * (n_p + k * b) * d + coarse;
    FlopReport {
        dense_flops: dense,
        sparse_flops: sparse,
        ratio: dense / sparse,
    }
}
