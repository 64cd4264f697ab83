//! The deliberation evidence graph: concept nodes along the selected
//! path, evidence nodes for retrieved items, support edges tying evidence
//! to the concepts it backs, and proximity edges between evidence items
//! that sit close together in the ball.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::deliberation::DeliberationResult;
use crate::kb::KnowledgeBase;
use crate::matrix::Matrix;
use crate::poincare::{
    dist_slices, exp_map_origin, log_map_origin, PoincarePoint, TangentVector,
};
use crate::query::FusionWeights;
use crate::rng::standard_normal;
use crate::tree::EmotionTree;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("deliberation result carries an empty path")]
    EmptyPath,
    #[error("node level {level} exceeds the level table ({rows} rows)")]
    LevelOutOfRange { level: usize, rows: usize },
    #[error("proximity threshold must be finite and non-negative, got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Concept,
    Evidence,
}

/// One graph node with its initial feature (base + type + level embedding).
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub level: usize,
    /// Ball point the node was initialized from: a concept prototype or
    /// the fused evidence embedding.
    pub source: PoincarePoint,
    pub init_feature: Vec<f64>,
    /// Tree node id for concepts, item id for evidence.
    pub ref_id: String,
}

/// Learnable type and level embedding tables (`2 x d_g`, `L x d_g`).
#[derive(Debug, Clone)]
pub struct GraphEmbeddingTables {
    pub type_table: Matrix,
    pub level_table: Matrix,
}

impl GraphEmbeddingTables {
    pub fn init<R: rand::Rng>(d_g: usize, level_rows: usize, rng: &mut R) -> Self {
        let fill = |rows: usize, rng: &mut R| {
            Matrix::from_vec(
                rows,
                d_g,
                (0..rows * d_g).map(|_| standard_normal(rng) * 0.02).collect(),
            )
        };
        GraphEmbeddingTables {
            type_table: fill(2, rng),
            level_table: fill(level_rows, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.type_table.cols()
    }
}

/// Immutable evidence graph. Nodes `0..concept_count` are the path
/// concepts in root-to-leaf order; the rest are evidence nodes.
#[derive(Debug, Clone)]
pub struct EvidenceGraph {
    nodes: Vec<GraphNode>,
    edges: BTreeSet<(usize, usize)>,
    concept_count: usize,
}

impl EvidenceGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, idx: usize) -> &GraphNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn concept_count(&self) -> usize {
        self.concept_count
    }

    /// Undirected edges as `(low, high)` index pairs.
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Symmetric boolean adjacency (diagonal false; self-connection is the
    /// attention mask's business).
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.nodes.len();
        let mut adj = vec![false; n * n];
        for &(a, b) in &self.edges {
            adj[a * n + b] = true;
            adj[b * n + a] = true;
        }
        adj
    }

    /// Initial node features stacked into an `N x d_g` matrix.
    pub fn init_features(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.init_feature.clone()).collect();
        Matrix::from_rows(&rows)
    }

    /// True when every node can reach node 0 over the given edge set.
    pub fn is_connected_over(&self, edges: &BTreeSet<(usize, usize)>) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in edges {
                let other = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn is_connected(&self) -> bool {
        self.is_connected_over(&self.edges)
    }
}

fn pad_to(v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let keep = v.len().min(d);
    out[..keep].copy_from_slice(&v[..keep]);
    out
}

fn init_feature(
    source: &PoincarePoint,
    kind: NodeKind,
    level: usize,
    tables: &GraphEmbeddingTables,
) -> Result<Vec<f64>, GraphError> {
    if level >= tables.level_table.rows() {
        return Err(GraphError::LevelOutOfRange {
            level,
            rows: tables.level_table.rows(),
        });
    }
    let d_g = tables.feature_dim();
    let base = pad_to(log_map_origin(source).coords(), d_g);
    let type_row = tables.type_table.row(match kind {
        NodeKind::Concept => 0,
        NodeKind::Evidence => 1,
    });
    let level_row = tables.level_table.row(level);
    Ok((0..d_g).map(|i| base[i] + type_row[i] + level_row[i]).collect())
}

/// Fuses an item's three modality embeddings in the tangent space with the
/// current fusion weights; mirrors the sample-query fusion.
pub fn fuse_evidence_point(
    item: &crate::kb::KnowledgeItem,
    w: &FusionWeights,
) -> PoincarePoint {
    let [aa, av, at] = w.alphas();
    let la = log_map_origin(&item.audio);
    let lv = log_map_origin(&item.visual);
    let lt = log_map_origin(&item.text);
    let d = la.dim();
    let mixed: Vec<f64> = (0..d)
        .map(|i| aa * la.coords()[i] + av * lv.coords()[i] + at * lt.coords()[i])
        .collect();
    exp_map_origin(&TangentVector::new(mixed).expect("finite fusion"))
}

/// Builds the evidence graph for one deliberation result.
///
/// Edges: (a) consecutive path concepts; (b) each evidence node to the
/// deepest path concept that is an ancestor of (or equal to) its own leaf;
/// (c) evidence pairs closer than `proximity_threshold` in the ball.
pub fn build_graph(
    result: &DeliberationResult,
    tree: &EmotionTree,
    kb: &KnowledgeBase,
    tables: &GraphEmbeddingTables,
    fusion: &FusionWeights,
    proximity_threshold: f64,
) -> Result<EvidenceGraph, GraphError> {
    if result.path.is_empty() {
        return Err(GraphError::EmptyPath);
    }
    // A zero threshold is valid and simply disables proximity edges.
    if proximity_threshold < 0.0 || !proximity_threshold.is_finite() {
        return Err(GraphError::BadThreshold(proximity_threshold));
    }

    let mut nodes = Vec::with_capacity(result.path.len() + result.evidence.len());
    for &tn in &result.path {
        let source = tree.prototype(tn);
        let level = tree.node(tn).level;
        nodes.push(GraphNode {
            kind: NodeKind::Concept,
            level,
            init_feature: init_feature(&source, NodeKind::Concept, level, tables)?,
            source,
            ref_id: tree.node(tn).id.clone(),
        });
    }
    let concept_count = nodes.len();

    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 1..concept_count {
        edges.insert((i - 1, i));
    }

    for &(item_idx, _) in &result.evidence {
        let item = kb.item(item_idx);
        let source = fuse_evidence_point(item, fusion);
        let level = tree.node(item.leaf).level + 1;
        let g_idx = nodes.len();
        nodes.push(GraphNode {
            kind: NodeKind::Evidence,
            level,
            init_feature: init_feature(&source, NodeKind::Evidence, level, tables)?,
            source,
            ref_id: item.id.clone(),
        });

        // Deepest path concept that covers this item's leaf; the root
        // always qualifies, so the search cannot come up empty.
        let support = (0..concept_count)
            .rev()
            .find(|&c| tree.is_ancestor_or_self(result.path[c], item.leaf))
            .expect("path starts at the root");
        edges.insert((support, g_idx));
    }

    for a in concept_count..nodes.len() {
        for b in (a + 1)..nodes.len() {
            let d = dist_slices(nodes[a].source.coords(), nodes[b].source.coords());
            if d < proximity_threshold {
                edges.insert((a, b));
            }
        }
    }

    Ok(EvidenceGraph {
        nodes,
        edges,
        concept_count,
    })
}
