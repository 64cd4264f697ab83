//! Offline evidence store: per-modality ball embeddings tagged with a
//! fine-grained leaf label, plus the tri-modal retrieval distance and an
//! exact deterministic top-k scan.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::poincare::{dist_slices, PoincarePoint};
use crate::query::{FusionWeights, SampleQueries};
use crate::tree::EmotionTree;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KbError {
    #[error("record {index}: unknown label `{label}`")]
    UnknownLabel { index: usize, label: String },
    #[error("record {index}: label `{label}` is not a leaf")]
    NonLeafLabel { index: usize, label: String },
    #[error("record {index}: embedding dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("record {index}: duplicate item id `{id}`")]
    DuplicateId { index: usize, id: String },
    #[error("record {1}: {0}")]
    InvalidPoint(crate::poincare::GeometryError, usize),
    #[error("knowledge base dimension {kb} does not match query dimension {query}")]
    QueryDimension { kb: usize, query: usize },
}

/// One unvalidated evidence record (already split into fields).
#[derive(Debug, Clone)]
pub struct ItemRecord {
    pub id: String,
    pub label: String,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
    pub caption: String,
}

/// A validated evidence item.
#[derive(Debug, Clone)]
pub struct KnowledgeItem {
    pub id: String,
    /// Tree index of the leaf this item supports.
    pub leaf: usize,
    pub audio: PoincarePoint,
    pub visual: PoincarePoint,
    pub text: PoincarePoint,
    pub caption: String,
}

impl KnowledgeItem {
    pub fn embeddings(&self) -> [&PoincarePoint; 3] {
        [&self.audio, &self.visual, &self.text]
    }
}

/// Immutable, leaf-indexed evidence store.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    items: Vec<KnowledgeItem>,
    by_leaf: BTreeMap<usize, Vec<usize>>,
    dim: usize,
}

impl KnowledgeBase {
    /// Validates and indexes `records` against `tree`. Labels must be tree
    /// leaves; embeddings must share one dimension.
    pub fn build(records: &[ItemRecord], tree: &EmotionTree) -> Result<Self, KbError> {
        let mut items = Vec::with_capacity(records.len());
        let mut by_leaf: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut dim: Option<usize> = None;

        for (index, rec) in records.iter().enumerate() {
            if !seen.insert(rec.id.as_str()) {
                return Err(KbError::DuplicateId {
                    index,
                    id: rec.id.clone(),
                });
            }
            let leaf = tree.node_index(&rec.label).map_err(|_| KbError::UnknownLabel {
                index,
                label: rec.label.clone(),
            })?;
            if !tree.is_leaf(leaf) {
                return Err(KbError::NonLeafLabel {
                    index,
                    label: rec.label.clone(),
                });
            }
            let d = *dim.get_or_insert(rec.audio.len());
            for part in [&rec.audio, &rec.visual, &rec.text] {
                if part.len() != d {
                    return Err(KbError::DimensionMismatch {
                        index,
                        found: part.len(),
                        expected: d,
                    });
                }
            }
            let mk = |v: &Vec<f64>| {
                PoincarePoint::new(v.clone()).map_err(|e| KbError::InvalidPoint(e, index))
            };
            by_leaf.entry(leaf).or_default().push(items.len());
            items.push(KnowledgeItem {
                id: rec.id.clone(),
                leaf,
                audio: mk(&rec.audio)?,
                visual: mk(&rec.visual)?,
                text: mk(&rec.text)?,
                caption: rec.caption.clone(),
            });
        }

        Ok(KnowledgeBase {
            items,
            by_leaf,
            dim: dim.unwrap_or(0),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Embedding dimension; 0 for an empty store.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn item(&self, idx: usize) -> &KnowledgeItem {
        &self.items[idx]
    }

    pub fn items(&self) -> &[KnowledgeItem] {
        &self.items
    }

    /// Item indices per leaf, in insertion order.
    pub fn items_for_leaf(&self, leaf: usize) -> &[usize] {
        self.by_leaf.get(&leaf).map_or(&[], |v| v.as_slice())
    }

    pub fn leaves_with_items(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_leaf.keys().copied()
    }
}

/// Fusion-weighted sum of the three per-modality geodesic distances.
pub fn retrieval_distance(
    item: &KnowledgeItem,
    qs: &SampleQueries,
    w: &FusionWeights,
) -> Result<f64, KbError> {
    if item.audio.dim() != qs.dim() {
        return Err(KbError::QueryDimension {
            kb: item.audio.dim(),
            query: qs.dim(),
        });
    }
    let [aa, av, at] = w.alphas();
    Ok(aa * dist_slices(qs.audio_q.coords(), item.audio.coords())
        + av * dist_slices(qs.visual_q.coords(), item.visual.coords())
        + at * dist_slices(qs.text_q.coords(), item.text.coords()))
}

/// The `k` closest items among those labeled with one of `leaves`,
/// ascending by distance, ties broken by item id. Returns fewer than `k`
/// when the pool is smaller.
pub fn top_k_in_leaves(
    kb: &KnowledgeBase,
    leaves: &BTreeSet<usize>,
    qs: &SampleQueries,
    w: &FusionWeights,
    k: usize,
) -> Result<Vec<(usize, f64)>, KbError> {
    let mut pool: Vec<(usize, f64)> = Vec::new();
    for &leaf in leaves {
        for &idx in kb.items_for_leaf(leaf) {
            let d = retrieval_distance(&kb.items[idx], qs, w)?;
            pool.push((idx, d));
        }
    }
    pool.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| kb.items[a.0].id.cmp(&kb.items[b.0].id))
    });
    pool.truncate(k);
    Ok(pool)
}
