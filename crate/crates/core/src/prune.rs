//! Confidence pruning: keep the `capacity` most confident anchors of every frame.

use std::cmp::{Ordering, Reverse};
use std::collections::binary_heap::PeekMut;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActionId, BoundingBox, Detection, DetectionStore, Store};

/// Ranking key: higher score first, then lower tie key first.
///
/// `Ord` is arranged so that a *greater* `Rank` is the *better* anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rank {
    pub score: f64,
    pub tie: usize,
}

impl Eq for Rank {}

impl Ord for Rank {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.tie.cmp(&self.tie))
    }
}

impl PartialOrd for Rank {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Entry<T> {
    rank: Rank,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.rank == other.rank
    }
}
impl<T> Eq for Entry<T> {}
impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank.cmp(&other.rank)
    }
}

/// Size-bounded heap retaining the top-`capacity` items by [`Rank`].
///
/// Internally min-ordered so the least confident entry sits at the root: it is
/// read in O(1) and replaced in O(log capacity) when a better item arrives.
pub struct BoundedConfidenceHeap<T> {
    heap: BinaryHeap<Reverse<Entry<T>>>,
    capacity: usize,
}

impl<T> BoundedConfidenceHeap<T> {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "heap capacity must be positive");
        Self {
            heap: BinaryHeap::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Rank of the least confident retained entry.
    pub fn min_rank(&self) -> Option<Rank> {
        self.heap.peek().map(|Reverse(e)| e.rank)
    }

    /// Inserts while under capacity; once full, replaces the least confident
    /// entry only if `rank` outranks it. Returns whether the item was kept.
    pub fn insert(&mut self, rank: Rank, item: T) -> bool {
        if self.heap.len() < self.capacity {
            self.heap.push(Reverse(Entry { rank, item }));
            return true;
        }
        let mut least: PeekMut<'_, _> = self.heap.peek_mut().expect("full heap is non-empty");
        if rank > least.0.rank {
            // sifts down when `least` drops
            *least = Reverse(Entry { rank, item });
            return true;
        }
        false
    }

    /// Retained entries, best first.
    pub fn into_sorted_vec(self) -> Vec<(Rank, T)> {
        // into_sorted_vec on Reverse<_> is ascending in Reverse order, i.e. best first.
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|Reverse(e)| (e.rank, e.item))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    /// Rows sharing exact box coordinates within a frame form one anchor
    /// scored by their maximum score.
    #[default]
    Box,
    /// Every row is its own anchor.
    Row,
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMode::Box => "box",
            PruneMode::Row => "row",
        })
    }
}

impl FromStr for PruneMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" => Ok(PruneMode::Box),
            "row" => Ok(PruneMode::Row),
            other => Err(format!("unknown prune mode {other:?} (expected box or row)")),
        }
    }
}

/// An anchor within one frame: a box and the detection rows that share it.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub bbox: BoundingBox,
    pub score: f64,
    /// `(action_id, score)` of every row carried by this anchor.
    pub rows: Vec<(ActionId, f64)>,
    /// Indices of those rows within the frame, ascending.
    pub row_indices: Vec<usize>,
}

/// Groups a frame's rows into anchors, in order of first appearance.
pub fn frame_anchors(rows: &[Detection], mode: PruneMode) -> Vec<Anchor> {
    match mode {
        PruneMode::Row => rows
            .iter()
            .enumerate()
            .map(|(i, d)| Anchor {
                bbox: d.bbox,
                score: d.score,
                rows: vec![(d.action_id, d.score)],
                row_indices: vec![i],
            })
            .collect(),
        PruneMode::Box => {
            let mut anchors: Vec<Anchor> = Vec::new();
            let mut by_box: HashMap<[u64; 4], usize> = HashMap::new();
            for (i, d) in rows.iter().enumerate() {
                let slot = *by_box.entry(d.bbox.bits()).or_insert_with(|| {
                    anchors.push(Anchor {
                        bbox: d.bbox,
                        score: f64::NEG_INFINITY,
                        rows: Vec::new(),
                        row_indices: Vec::new(),
                    });
                    anchors.len() - 1
                });
                let a = &mut anchors[slot];
                a.score = a.score.max(d.score);
                a.rows.push((d.action_id, d.score));
                a.row_indices.push(i);
            }
            anchors
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PruneError {
    #[error("capacity must be at least 1 (capacity 0 would drop all anchors)")]
    ZeroCapacity,
}

/// Keeps the top-`capacity` anchors of every frame, ranked by
/// `(score desc, first row index asc)`. Surviving rows keep their order.
pub fn prune(
    store: &DetectionStore,
    capacity: usize,
    mode: PruneMode,
) -> Result<DetectionStore, PruneError> {
    if capacity == 0 {
        return Err(PruneError::ZeroCapacity);
    }
    let mut out = BTreeMap::new();
    for (key, rows) in store.frames() {
        out.insert(key.clone(), prune_frame(rows, capacity, mode));
    }
    Ok(Store::from_frames(out))
}

fn prune_frame(rows: &[Detection], capacity: usize, mode: PruneMode) -> Vec<Detection> {
    let anchors = frame_anchors(rows, mode);
    if anchors.len() <= capacity {
        return rows.to_vec();
    }
    let mut heap = BoundedConfidenceHeap::new(capacity);
    for (tie, anchor) in anchors.iter().enumerate() {
        heap.insert(
            Rank {
                score: anchor.score,
                tie,
            },
            tie,
        );
    }
    let mut keep = vec![false; rows.len()];
    for (_, idx) in heap.into_sorted_vec() {
        for &r in &anchors[idx].row_indices {
            keep[r] = true;
        }
    }
    rows.iter()
        .zip(keep)
        .filter(|&(_, k)| k)
        .map(|(d, _)| d.clone())
        .collect()
}
