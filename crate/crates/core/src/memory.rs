//! Structured KV memory: a persistent anchor set plus a sliding local window.
//!
//! Blocks leave the window whole-chunk, oldest first. Evicted blocks become
//! candidates for the persistent set, which keeps sinks unconditionally and
//! fills the remaining capacity with the best-scoring candidates.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tensor::DenseMatrix;

/// Stream-ordered block identifier. Later chunks always get larger ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u64);

impl BlockId {
    pub fn from_stream(chunk: u64, block: u64, blocks_per_chunk: u64) -> Self {
        BlockId(chunk * blocks_per_chunk + block)
    }
}

pub type ScoreMap = BTreeMap<BlockId, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockEntry {
    pub id: BlockId,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub score: f64,
    pub is_sink: bool,
}

impl BlockEntry {
    pub fn new(id: BlockId, k: DenseMatrix, v: DenseMatrix, is_sink: bool) -> Result<Self> {
        if k.rows() != v.rows() || k.cols() != v.cols() {
            return Err(shape(format!(
                "block {:?}: k is {}x{}, v is {}x{}",
                id,
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            )));
        }
        Ok(Self {
            id,
            k,
            v,
            score: 0.0,
            is_sink,
        })
    }

    pub fn tokens(&self) -> usize {
        self.k.rows()
    }

    pub fn dim(&self) -> usize {
        self.k.cols()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvictionBatch {
    pub entries: Vec<BlockEntry>,
}

impl EvictionBatch {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<BlockId> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

/// FIFO of recent chunks, bounded in chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalWindow {
    capacity_chunks: usize,
    chunks: VecDeque<Vec<BlockEntry>>,
    last_id: Option<BlockId>,
}

impl LocalWindow {
    pub fn new(capacity_chunks: usize) -> Result<Self> {
        if capacity_chunks == 0 {
            return Err(invalid("local window capacity must be at least one chunk"));
        }
        Ok(Self {
            capacity_chunks,
            chunks: VecDeque::new(),
            last_id: None,
        })
    }

    pub fn capacity_chunks(&self) -> usize {
        self.capacity_chunks
    }

    pub fn chunks(&self) -> impl Iterator<Item = &[BlockEntry]> {
        self.chunks.iter().map(Vec::as_slice)
    }

    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockEntry> {
        self.chunks.iter().flatten()
    }

    pub fn n_blocks(&self) -> usize {
        self.chunks.iter().map(Vec::len).sum()
    }

    pub fn ids(&self) -> Vec<BlockId> {
        self.blocks().map(|e| e.id).collect()
    }

    /// Appends a chunk and evicts the oldest one once capacity is exceeded.
    pub fn push_chunk(&mut self, chunk: Vec<BlockEntry>) -> Result<EvictionBatch> {
        if chunk.is_empty() {
            return Err(invalid("cannot push an empty chunk"));
        }
        let mut prev = self.last_id;
        for e in &chunk {
            if prev.is_some_and(|p| e.id <= p) {
                return Err(invalid(format!(
                    "block id {} is not greater than preceding id {}",
                    e.id.0,
                    prev.map_or(0, |p| p.0)
                )));
            }
            prev = Some(e.id);
        }
        self.last_id = prev;
        self.chunks.push_back(chunk);
        if self.chunks.len() > self.capacity_chunks {
            let entries = self.chunks.pop_front().unwrap_or_default();
            Ok(EvictionBatch { entries })
        } else {
            Ok(EvictionBatch::default())
        }
    }
}

/// Bounded anchor set: sinks (never dropped) followed by dynamic survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentMemory {
    capacity_c: usize,
    sinks: Vec<BlockEntry>,
    dynamic: Vec<BlockEntry>,
}

fn rank_order(a: &BlockEntry, b: &BlockEntry) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

impl PersistentMemory {
    pub fn new(capacity_c: usize) -> Self {
        Self {
            capacity_c,
            sinks: Vec::new(),
            dynamic: Vec::new(),
        }
    }

    /// Builds a memory directly, e.g. for benchmarks or replay.
    pub fn from_parts(capacity_c: usize, sinks: Vec<BlockEntry>, mut dynamic: Vec<BlockEntry>) -> Result<Self> {
        if sinks.len() + dynamic.len() > capacity_c {
            return Err(invalid(format!(
                "{} blocks exceed persistent capacity {capacity_c}",
                sinks.len() + dynamic.len()
            )));
        }
        dynamic.sort_by(rank_order);
        Ok(Self {
            capacity_c,
            sinks,
            dynamic,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity_c
    }

    pub fn sinks(&self) -> &[BlockEntry] {
        &self.sinks
    }

    /// Dynamic members ordered by `(score desc, id asc)`.
    pub fn dynamic(&self) -> &[BlockEntry] {
        &self.dynamic
    }

    pub fn len(&self) -> usize {
        self.sinks.len() + self.dynamic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assembly order: sinks by id, then dynamic members by id.
    pub fn ordered_blocks(&self) -> Vec<&BlockEntry> {
        let mut dynamic: Vec<&BlockEntry> = self.dynamic.iter().collect();
        dynamic.sort_by_key(|e| e.id);
        let mut sinks: Vec<&BlockEntry> = self.sinks.iter().collect();
        sinks.sort_by_key(|e| e.id);
        sinks.into_iter().chain(dynamic).collect()
    }

    pub fn ids(&self) -> Vec<BlockId> {
        self.ordered_blocks().iter().map(|e| e.id).collect()
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.sinks.iter().chain(&self.dynamic).any(|e| e.id == id)
    }

    /// Top-C retention over `dynamic ∪ evicted`.
    ///
    /// Evicted sink blocks join the sink list. Every dynamic member and every
    /// non-sink candidate needs a score in `scores`; sink scores are refreshed
    /// when present.
    pub fn update(mut self, evicted: EvictionBatch, scores: &ScoreMap) -> Result<Self> {
        let (new_sinks, candidates): (Vec<_>, Vec<_>) =
            evicted.entries.into_iter().partition(|e| e.is_sink);
        self.sinks.extend(new_sinks);
        if self.sinks.len() > self.capacity_c {
            return Err(invalid(format!(
                "{} sink blocks exceed persistent capacity {}",
                self.sinks.len(),
                self.capacity_c
            )));
        }
        for s in &mut self.sinks {
            if let Some(&score) = scores.get(&s.id) {
                s.score = score;
            }
        }
        let mut pool: Vec<BlockEntry> = self.dynamic.into_iter().chain(candidates).collect();
        for e in &mut pool {
            e.score = *scores
                .get(&e.id)
                .ok_or_else(|| invalid(format!("no score for candidate block {}", e.id.0)))?;
        }
        pool.sort_by(rank_order);
        pool.truncate(self.capacity_c - self.sinks.len());
        self.dynamic = pool;
        Ok(self)
    }
}

pub fn push_chunk(window: &mut LocalWindow, chunk: Vec<BlockEntry>) -> Result<EvictionBatch> {
    window.push_chunk(chunk)
}

pub fn update_persistent(p: PersistentMemory, evicted: EvictionBatch, scores: &ScoreMap) -> Result<PersistentMemory> {
    p.update(evicted, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Persistent,
    Local,
    Current,
}

/// Ordered borrowed view of every key/value block one attention call sees:
/// persistent, then local window, then the chunk being generated.
#[derive(Debug, Clone)]
pub struct KvView<'a> {
    pub persistent: Vec<&'a BlockEntry>,
    pub local: Vec<&'a BlockEntry>,
    pub current: Vec<&'a BlockEntry>,
}

impl<'a> KvView<'a> {
    pub fn new(p: &'a PersistentMemory, window: &'a LocalWindow, current: &'a [BlockEntry]) -> Self {
        Self {
            persistent: p.ordered_blocks(),
            local: window.blocks().collect(),
            current: current.iter().collect(),
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = (Region, &'a BlockEntry)> + '_ {
        self.persistent
            .iter()
            .map(|e| (Region::Persistent, *e))
            .chain(self.local.iter().map(|e| (Region::Local, *e)))
            .chain(self.current.iter().map(|e| (Region::Current, *e)))
    }

    pub fn n_blocks(&self) -> usize {
        self.persistent.len() + self.local.len() + self.current.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledKv {
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub index_map: Vec<(Region, BlockId)>,
}

/// Concatenates the view into dense `K` and `V`.
pub fn assemble_view(view: &KvView<'_>) -> Result<AssembledKv> {
    let dim = view.blocks().next().map_or(0, |(_, e)| e.dim());
    let mut ks = Vec::with_capacity(view.n_blocks());
    let mut vs = Vec::with_capacity(view.n_blocks());
    let mut index_map = Vec::with_capacity(view.n_blocks());
    for (region, e) in view.blocks() {
        if e.dim() != dim {
            return Err(shape(format!(
                "block {} has dim {}, expected {dim}",
                e.id.0,
                e.dim()
            )));
        }
        ks.push(&e.k);
        vs.push(&e.v);
        index_map.push((region, e.id));
    }
    Ok(AssembledKv {
        k: DenseMatrix::vstack(dim, &ks)?,
        v: DenseMatrix::vstack(dim, &vs)?,
        index_map,
    })
}

/// `[K_P; K_L]`, `[V_P; V_L]`.
pub fn assemble_kv(p: &PersistentMemory, window: &LocalWindow) -> Result<AssembledKv> {
    assemble_view(&KvView::new(p, window, &[]))
}
