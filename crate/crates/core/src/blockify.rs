//! Locality-preserving spatiotemporal block rearrange.
//!
//! A `T × H × W × d` latent is cut into `(B_t, B_h, B_w)` blocks. Blocks are
//! numbered t-major, then h, then w, and the `B = B_t·B_h·B_w` tokens of one
//! block are stored contiguously, giving an `N_b × B × d` block-major buffer.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tensor::{DenseMatrix, Latent4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockShape {
    pub b_t: usize,
    pub b_h: usize,
    pub b_w: usize,
}

impl BlockShape {
    pub fn new(b_t: usize, b_h: usize, b_w: usize) -> Result<Self> {
        if b_t == 0 || b_h == 0 || b_w == 0 {
            return Err(invalid(format!("block shape ({b_t},{b_h},{b_w}) has a zero axis")));
        }
        Ok(Self { b_t, b_h, b_w })
    }

    pub fn tokens(&self) -> usize {
        self.b_t * self.b_h * self.b_w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub shape: BlockShape,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl BlockLayout {
    /// Fails with the offending axis when `shape` does not tile `(t, h, w)`.
    pub fn new(t: usize, h: usize, w: usize, d: usize, shape: BlockShape) -> Result<Self> {
        for (axis, dim, blk) in [("t", t, shape.b_t), ("h", h, shape.b_h), ("w", w, shape.b_w)] {
            if blk == 0 || dim % blk != 0 {
                return Err(invalid(format!(
                    "axis {axis}: size {dim} is not divisible by block extent {blk}"
                )));
            }
        }
        Ok(Self {
            shape,
            t,
            h,
            w,
            d,
            n_t: t / shape.b_t,
            n_h: h / shape.b_h,
            n_w: w / shape.b_w,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.n_t * self.n_h * self.n_w
    }

    pub fn block_tokens(&self) -> usize {
        self.shape.tokens()
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Same token geometry with a different feature width.
    pub fn with_feature_dim(&self, d: usize) -> Self {
        Self { d, ..*self }
    }

    fn block_id(&self, bt: usize, bh: usize, bw: usize) -> usize {
        (bt * self.n_h + bh) * self.n_w + bw
    }

    fn in_block(&self, dt: usize, dh: usize, dw: usize) -> usize {
        (dt * self.shape.b_h + dh) * self.shape.b_w + dw
    }
}

/// Block-major `(n_b, b, d)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedTensor {
    layout: BlockLayout,
    data: Vec<f32>,
}

impl BlockedTensor {
    pub fn from_parts(layout: BlockLayout, data: Vec<f32>) -> Result<Self> {
        let need = layout.tokens() * layout.d;
        if data.len() != need {
            return Err(shape(format!(
                "blocked tensor needs {need} values, got {}",
                data.len()
            )));
        }
        Ok(Self { layout, data })
    }

    /// Wraps a flat `(n_blocks·b) × d` token matrix as `n_blocks` blocks of
    /// `b` tokens laid along one axis.
    pub fn from_token_matrix(m: DenseMatrix, block_tokens: usize) -> Result<Self> {
        if block_tokens == 0 || !m.rows().is_multiple_of(block_tokens) {
            return Err(invalid(format!(
                "{} token rows do not split into blocks of {block_tokens}",
                m.rows()
            )));
        }
        let layout = BlockLayout::new(
            m.rows() / block_tokens,
            1,
            block_tokens,
            m.cols(),
            BlockShape::new(1, 1, block_tokens)?,
        )?;
        Self::from_parts(layout, m.into_data())
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn n_blocks(&self) -> usize {
        self.layout.n_blocks()
    }

    pub fn block_tokens(&self) -> usize {
        self.layout.block_tokens()
    }

    pub fn d(&self) -> usize {
        self.layout.d
    }

    /// The `b × d` slab of block `j`.
    pub fn block(&self, j: usize) -> &[f32] {
        let stride = self.block_tokens() * self.layout.d;
        &self.data[j * stride..(j + 1) * stride]
    }

    /// Block-major token rows as a `(n_b·b) × d` matrix.
    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::new(self.layout.tokens(), self.layout.d, self.data.clone())
            .expect("layout-consistent buffer")
    }
}

pub fn blockify(x: &Latent4D, shape: BlockShape) -> Result<BlockedTensor> {
    let layout = BlockLayout::new(x.t, x.h, x.w, x.d, shape)?;
    let (d, h, w) = (x.d, x.h, x.w);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for bt in 0..layout.n_t {
        for bh in 0..layout.n_h {
            for bw in 0..layout.n_w {
                for dt in 0..shape.b_t {
                    for dh in 0..shape.b_h {
                        // The w-run of one block row is contiguous in the source.
                        let tt = bt * shape.b_t + dt;
                        let hh = bh * shape.b_h + dh;
                        let ww = bw * shape.b_w;
                        let start = ((tt * h + hh) * w + ww) * d;
                        out.extend_from_slice(&src[start..start + shape.b_w * d]);
                    }
                }
            }
        }
    }
    BlockedTensor::from_parts(layout, out)
}

pub fn unblockify(xb: &BlockedTensor) -> Result<Latent4D> {
    let layout = xb.layout;
    let shape = layout.shape;
    let (t, h, w, d) = (layout.t, layout.h, layout.w, layout.d);
    if xb.data.len() != t * h * w * d {
        return Err(invalid("blocked data length does not match its layout"));
    }
    let mut out = vec![0.0f32; xb.data.len()];
    let mut cursor = 0;
    for bt in 0..layout.n_t {
        for bh in 0..layout.n_h {
            for bw in 0..layout.n_w {
                for dt in 0..shape.b_t {
                    for dh in 0..shape.b_h {
                        let tt = bt * shape.b_t + dt;
                        let hh = bh * shape.b_h + dh;
                        let ww = bw * shape.b_w;
                        let start = ((tt * h + hh) * w + ww) * d;
                        let run = shape.b_w * d;
                        out[start..start + run].copy_from_slice(&xb.data[cursor..cursor + run]);
                        cursor += run;
                    }
                }
            }
        }
    }
    Latent4D::new(t, h, w, d, out)
}

/// Maps a flat `(t, h, w)` source token index to `(block_id, in_block_offset)`.
pub fn block_index_map(layout: &BlockLayout, flat_source_index: usize) -> Result<(usize, usize)> {
    if flat_source_index >= layout.tokens() {
        return Err(invalid(format!(
            "source index {flat_source_index} out of range for {} tokens",
            layout.tokens()
        )));
    }
    let ww = flat_source_index % layout.w;
    let hh = (flat_source_index / layout.w) % layout.h;
    let tt = flat_source_index / (layout.w * layout.h);
    let s = layout.shape;
    Ok((
        layout.block_id(tt / s.b_t, hh / s.b_h, ww / s.b_w),
        layout.in_block(tt % s.b_t, hh % s.b_h, ww % s.b_w),
    ))
}
