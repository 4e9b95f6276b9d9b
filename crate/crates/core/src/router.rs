//! Coarse routing stage: mean-pooled block representatives, block-level
//! attention, per-key-block relevance scores, and row-wise Top-K selection
//! of visible local blocks.

use serde::{Deserialize, Serialize};

use crate::blockify::BlockedTensor;
use crate::error::{invalid, shape, Result};
use crate::memory::BlockEntry;
use crate::tensor::{masked_softmax_rows, matmul, DenseMatrix};

/// One mean-pooled row per block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRepresentatives {
    pub reps: DenseMatrix,
}

impl BlockRepresentatives {
    pub fn n_blocks(&self) -> usize {
        self.reps.rows()
    }

    pub fn d(&self) -> usize {
        self.reps.cols()
    }
}

fn mean_pool_into(out: &mut Vec<f32>, block: &[f32], tokens: usize, d: usize, acc: &mut [f64]) {
    acc.iter_mut().for_each(|a| *a = 0.0);
    for tok in block.chunks_exact(d) {
        for (a, &x) in acc.iter_mut().zip(tok) {
            *a += f64::from(x);
        }
    }
    let inv = 1.0 / tokens as f64;
    out.extend(acc.iter().map(|a| (a * inv) as f32));
}

pub fn compress_blocks(xb: &BlockedTensor) -> BlockRepresentatives {
    let (n, b, d) = (xb.n_blocks(), xb.block_tokens(), xb.d());
    let mut data = Vec::with_capacity(n * d);
    let mut acc = vec![0.0f64; d];
    for j in 0..n {
        mean_pool_into(&mut data, xb.block(j), b, d, &mut acc);
    }
    BlockRepresentatives {
        reps: DenseMatrix::new(n, d, data).expect("n x d"),
    }
}

/// Mean-pools the key tokens of cached blocks.
pub fn compress_keys<'a>(blocks: impl IntoIterator<Item = &'a BlockEntry>, d: usize) -> Result<BlockRepresentatives> {
    let mut data = Vec::new();
    let mut acc = vec![0.0f64; d];
    let mut n = 0;
    for e in blocks {
        if e.dim() != d || e.tokens() == 0 {
            return Err(shape(format!("block {} has dim {}, expected {d}", e.id.0, e.dim())));
        }
        mean_pool_into(&mut data, e.k.data(), e.tokens(), d, &mut acc);
        n += 1;
    }
    Ok(BlockRepresentatives {
        reps: DenseMatrix::new(n, d, data)?,
    })
}

/// `softmax(Qc·Kcᵀ / √d)`.
pub fn coarse_attention(qc: &BlockRepresentatives, kc: &BlockRepresentatives) -> Result<DenseMatrix> {
    if qc.d() != kc.d() {
        return Err(shape(format!("query reps d={} vs key reps d={}", qc.d(), kc.d())));
    }
    let mut logits = matmul(&qc.reps, &kc.reps.transpose())?;
    let scale = (qc.d() as f64).powf(-0.5);
    for x in logits.data_mut() {
        *x = (f64::from(*x) * scale) as f32;
    }
    masked_softmax_rows(&logits, None)
}

/// Mean coarse attention received by each key block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub scores: Vec<f64>,
}

pub fn aggregate_scores(a: &DenseMatrix) -> BlockScores {
    let (rows, cols) = (a.rows(), a.cols());
    let mut scores = vec![0.0f64; cols];
    for r in 0..rows {
        for (s, &x) in scores.iter_mut().zip(a.row(r)) {
            *s += f64::from(x);
        }
    }
    if rows > 0 {
        scores.iter_mut().for_each(|s| *s /= rows as f64);
    }
    BlockScores { scores }
}

/// Per-query-block visibility over local key blocks. The persistent region
/// is always visible and carries no per-row state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub n_query_blocks: usize,
    pub n_persistent_blocks: usize,
    pub n_local_blocks: usize,
    /// Ascending local block indices per query block.
    pub visible: Vec<Vec<usize>>,
}

impl BlockMask {
    /// Every local block visible to every query block.
    pub fn full(n_query_blocks: usize, n_persistent_blocks: usize, n_local_blocks: usize) -> Self {
        Self {
            n_query_blocks,
            n_persistent_blocks,
            n_local_blocks,
            visible: vec![(0..n_local_blocks).collect(); n_query_blocks],
        }
    }

    pub fn with_persistent(mut self, n_persistent_blocks: usize) -> Self {
        self.n_persistent_blocks = n_persistent_blocks;
        self
    }

    pub fn budget(&self) -> usize {
        self.visible.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visible.len() != self.n_query_blocks {
            return Err(invalid(format!(
                "{} visibility rows for {} query blocks",
                self.visible.len(),
                self.n_query_blocks
            )));
        }
        let k = self.budget();
        for (q, row) in self.visible.iter().enumerate() {
            if row.len() != k {
                return Err(invalid(format!("query block {q} sees {} blocks, expected {k}", row.len())));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&j| j >= self.n_local_blocks) {
                return Err(invalid(format!("query block {q} has unsorted or out-of-range indices")));
            }
        }
        Ok(())
    }

    pub fn is_visible(&self, q: usize, local: usize) -> bool {
        self.visible[q].binary_search(&local).is_ok()
    }
}

/// `max(1, ⌈n · ratio⌉)`, capped at `n`.
pub fn topk_budget(n_local_blocks: usize, topk_ratio: f64) -> Result<usize> {
    if !(topk_ratio > 0.0 && topk_ratio <= 1.0) {
        return Err(invalid(format!("topk ratio {topk_ratio} is outside (0, 1]")));
    }
    // The epsilon absorbs representation error in products like 30 × 0.1.
    let k = (n_local_blocks as f64 * topk_ratio - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n_local_blocks.max(1)))
}

/// Row-wise Top-K over the local coarse attention; ties go to the lower index.
pub fn select_topk(a_local: &DenseMatrix, topk_ratio: f64) -> Result<BlockMask> {
    let n_local = a_local.cols();
    if n_local == 0 {
        return Err(invalid("Top-K selection needs at least one local block"));
    }
    let k = topk_budget(n_local, topk_ratio)?;
    let mut order: Vec<usize> = Vec::with_capacity(n_local);
    let visible = (0..a_local.rows())
        .map(|q| {
            let row = a_local.row(q);
            order.clear();
            order.extend(0..n_local);
            let by_score = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
            if k < n_local {
                order.select_nth_unstable_by(k - 1, by_score);
            }
            let mut picked = order[..k].to_vec();
            picked.sort_unstable();
            picked
        })
        .collect();
    Ok(BlockMask {
        n_query_blocks: a_local.rows(),
        n_persistent_blocks: 0,
        n_local_blocks: n_local,
        visible,
    })
}

/// Token-level additive mask `[0 | M_L]` of shape
/// `(n_q·b) × ((n_p + n_ℓ)·b)`.
pub fn build_mask(mask: &BlockMask, block_tokens: usize) -> Result<DenseMatrix> {
    build_mask_with_current(mask, block_tokens, 0)
}

/// As [`build_mask`], with `n_current_blocks` always-visible blocks of the
/// chunk being generated appended after the local region.
pub fn build_mask_with_current(mask: &BlockMask, block_tokens: usize, n_current_blocks: usize) -> Result<DenseMatrix> {
    mask.validate()?;
    let b = block_tokens;
    let n_p = mask.n_persistent_blocks * b;
    let n_l = mask.n_local_blocks * b;
    let cols = n_p + n_l + n_current_blocks * b;
    let mut out = DenseMatrix::zeros(mask.n_query_blocks * b, cols);
    let data = out.data_mut();
    for q in 0..mask.n_query_blocks {
        for r in q * b..(q + 1) * b {
            let row = &mut data[r * cols..(r + 1) * cols];
            for (lb, chunk) in row[n_p..n_p + n_l].chunks_exact_mut(b).enumerate() {
                if !mask.is_visible(q, lb) {
                    chunk.fill(f32::NEG_INFINITY);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reps(rows: &[&[f32]]) -> BlockRepresentatives {
        BlockRepresentatives {
            reps: DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        }
    }

    #[test]
    fn identical_tokens_pool_to_themselves() {
        let m = DenseMatrix::from_rows(&[vec![1.5, -2.0], vec![1.5, -2.0], vec![1.5, -2.0]]).unwrap();
        let xb = BlockedTensor::from_token_matrix(m, 3).unwrap();
        assert_eq!(compress_blocks(&xb).reps.data(), &[1.5, -2.0]);
    }

    #[test]
    fn unit_blocks_are_tokens() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let xb = BlockedTensor::from_token_matrix(m.clone(), 1).unwrap();
        assert_eq!(compress_blocks(&xb).reps, m);
    }

    #[test]
    fn mean_of_two_tokens() {
        let m = DenseMatrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        let xb = BlockedTensor::from_token_matrix(m, 2).unwrap();
        assert_eq!(compress_blocks(&xb).reps.data(), &[1.0, 1.0]);
    }

    #[test]
    fn single_key_block_rows_are_one() {
        let a = coarse_attention(&reps(&[&[1.0, 2.0], &[-3.0, 0.5]]), &reps(&[&[0.3, 0.3]])).unwrap();
        assert_eq!(a.data(), &[1.0, 1.0]);
    }

    #[test]
    fn orthogonal_keys_give_uniform_rows() {
        let q = reps(&[&[0.0, 0.0, 1.0]]);
        let k = reps(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let a = coarse_attention(&q, &k).unwrap();
        assert!((a.get(0, 0) - 0.5).abs() < 1e-7 && (a.get(0, 1) - 0.5).abs() < 1e-7);
        assert!(coarse_attention(&q, &reps(&[&[1.0, 0.0]])).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let one = DenseMatrix::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        let s = aggregate_scores(&one).scores;
        assert!((s[0] - 0.2).abs() < 1e-7 && (s[2] - 0.5).abs() < 1e-7);
        let id = DenseMatrix::identity(2);
        assert_eq!(aggregate_scores(&id).scores, vec![0.5, 0.5]);
        let uni = DenseMatrix::new(3, 4, vec![0.25; 12]).unwrap();
        assert_eq!(aggregate_scores(&uni).scores, vec![0.25; 4]);
    }

    #[test]
    fn budget_rule() {
        assert_eq!(topk_budget(8, 0.25).unwrap(), 2);
        assert_eq!(topk_budget(28, 0.0625).unwrap(), 2);
        assert_eq!(topk_budget(3, 0.01).unwrap(), 1);
        assert_eq!(topk_budget(30, 0.1).unwrap(), 3);
        assert_eq!(topk_budget(5, 1.0).unwrap(), 5);
        assert!(topk_budget(5, 0.0).is_err());
        assert!(topk_budget(5, 1.5).is_err());
        assert!(topk_budget(5, f64::NAN).is_err());
    }

    #[test]
    fn argmax_selection() {
        let a = DenseMatrix::from_rows(&[vec![0.1, 0.7, 0.2]]).unwrap();
        assert_eq!(select_topk(&a, 1.0 / 3.0).unwrap().visible, vec![vec![1]]);
        let full = select_topk(&a, 1.0).unwrap();
        assert_eq!(full.visible, vec![vec![0, 1, 2]]);
        assert!(select_topk(&DenseMatrix::zeros(2, 0), 0.5).is_err());
    }

    #[test]
    fn ties_go_low() {
        let a = DenseMatrix::from_rows(&[vec![0.25; 4]]).unwrap();
        assert_eq!(select_topk(&a, 0.5).unwrap().visible, vec![vec![0, 1]]);
    }

    #[test]
    fn anti_diagonal_mask() {
        let mask = BlockMask {
            n_query_blocks: 2,
            n_persistent_blocks: 0,
            n_local_blocks: 2,
            visible: vec![vec![1], vec![0]],
        };
        let m = build_mask(&mask, 2).unwrap();
        let ninf = f32::NEG_INFINITY;
        let expected = [
            [ninf, ninf, 0.0, 0.0],
            [ninf, ninf, 0.0, 0.0],
            [0.0, 0.0, ninf, ninf],
            [0.0, 0.0, ninf, ninf],
        ];
        for (r, row) in expected.iter().enumerate() {
            assert_eq!(m.row(r), row);
        }
    }

    #[test]
    fn persistent_columns_stay_open() {
        let mask = BlockMask {
            n_query_blocks: 1,
            n_persistent_blocks: 2,
            n_local_blocks: 3,
            visible: vec![vec![2]],
        };
        let m = build_mask_with_current(&mask, 2, 1).unwrap();
        assert_eq!(m.cols(), 12);
        for r in 0..2 {
            assert!(m.row(r)[..4].iter().all(|&x| x == 0.0));
            assert!(m.row(r)[4..8].iter().all(|&x| x == f32::NEG_INFINITY));
            assert!(m.row(r)[8..].iter().all(|&x| x == 0.0));
        }
        let single = build_mask(&BlockMask::full(1, 0, 1), 3).unwrap();
        assert!(single.data().iter().all(|&x| x == 0.0));
    }
}
