//! The emotion taxonomy: a rooted, leveled tree whose nodes carry
//! learnable hyperbolic prototypes.
//!
//! Topology is immutable after load; only the prototype parameters change
//! (during training). Prototypes are tangent-space vectors mapped into the
//! ball on demand, so a parameter update is visible to the next
//! [`EmotionTree::prototype`] call with no cache to invalidate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::poincare::{exp_map_origin, PoincarePoint, TangentVector};
use crate::rng::standard_normal;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{child}` references missing parent `{parent}`")]
    OrphanNode { child: String, parent: String },
    #[error("no root node (exactly one node must have an empty parent)")]
    NoRoot,
    #[error("multiple roots: `{0}` and `{1}` both lack a parent")]
    MultipleRoots(String, String),
    #[error("node `{0}` has level {1}, expected {2}")]
    LevelMismatch(String, usize, usize),
    #[error("cycle detected through node `{0}`")]
    Cycle(String),
    #[error("label `{label}` duplicated within level {level}")]
    DuplicateLabel { label: String, level: usize },
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("prototype dimension {found} does not match tree dimension {expected}")]
    DimensionMismatch { found: usize, expected: usize },
}

/// One input row of a taxonomy document, already split into fields.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: String,
    pub label: String,
    /// `None` marks the root.
    pub parent_id: Option<String>,
    pub level: usize,
}

/// A taxonomy node with its learnable prototype parameter.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: String,
    pub label: String,
    pub parent: Option<usize>,
    pub level: usize,
    children: Vec<usize>,
    prototype_param: Vec<f64>,
}

impl TreeNode {
    pub fn children(&self) -> &[usize] {
        &self.children
    }

    /// Tangent-space parameter behind this node's prototype.
    pub fn prototype_param(&self) -> &[f64] {
        &self.prototype_param
    }
}

/// Rooted emotion taxonomy with per-node hyperbolic prototypes.
#[derive(Debug, Clone)]
pub struct EmotionTree {
    nodes: Vec<TreeNode>,
    index: BTreeMap<String, usize>,
    root: usize,
    level_count: usize,
    dim: usize,
}

impl EmotionTree {
    /// Validates the node list and initializes prototypes from `seed`.
    ///
    /// Prototype parameters are sampled from a zero-mean Gaussian with
    /// standard deviation `0.01 * (level + 1)`, so finer nodes start
    /// farther from the origin.
    pub fn from_specs(specs: &[NodeSpec], dim: usize, seed: u64) -> Result<Self, TreeError> {
        let mut rng = crate::rng::seeded(seed);
        let mut tree = Self::build_topology(specs, dim)?;
        for node in tree.nodes.iter_mut() {
            let std = 0.01 * (node.level as f64 + 1.0);
            node.prototype_param = (0..dim).map(|_| standard_normal(&mut rng) * std).collect();
        }
        Ok(tree)
    }

    fn build_topology(specs: &[NodeSpec], dim: usize) -> Result<Self, TreeError> {
        let mut index = BTreeMap::new();
        for (i, s) in specs.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(TreeError::DuplicateId(s.id.clone()));
            }
        }

        let mut root = None;
        let mut nodes: Vec<TreeNode> = Vec::with_capacity(specs.len());
        for s in specs {
            let parent = match &s.parent_id {
                None => {
                    if let Some(r) = root {
                        let prev: &NodeSpec = &specs[r];
                        return Err(TreeError::MultipleRoots(prev.id.clone(), s.id.clone()));
                    }
                    root = Some(nodes.len());
                    None
                }
                Some(pid) => Some(*index.get(pid).ok_or_else(|| TreeError::OrphanNode {
                    child: s.id.clone(),
                    parent: pid.clone(),
                })?),
            };
            nodes.push(TreeNode {
                id: s.id.clone(),
                label: s.label.clone(),
                parent,
                level: s.level,
                children: Vec::new(),
                prototype_param: vec![0.0; dim],
            });
        }
        let root = root.ok_or(TreeError::NoRoot)?;
        if nodes[root].level != 0 {
            return Err(TreeError::LevelMismatch(nodes[root].id.clone(), nodes[root].level, 0));
        }

        // Level consistency also rules out cycles: a parent chain with
        // strictly decreasing levels must terminate at the root. The
        // explicit walk below still guards against pathological input.
        for i in 0..nodes.len() {
            if let Some(p) = nodes[i].parent {
                let expected = nodes[p].level + 1;
                if nodes[i].level != expected {
                    return Err(TreeError::LevelMismatch(nodes[i].id.clone(), nodes[i].level, expected));
                }
            }
            let mut hops = 0;
            let mut cur = i;
            while let Some(p) = nodes[cur].parent {
                hops += 1;
                if hops > nodes.len() {
                    return Err(TreeError::Cycle(nodes[i].id.clone()));
                }
                cur = p;
            }
        }

        // Children in declaration order; this is the deterministic
        // tie-break order used downstream.
        for i in 0..nodes.len() {
            if let Some(p) = nodes[i].parent {
                let child = i;
                nodes[p].children.push(child);
            }
        }

        let mut labels_per_level: BTreeMap<(usize, String), ()> = BTreeMap::new();
        for n in &nodes {
            if labels_per_level.insert((n.level, n.label.clone()), ()).is_some() {
                return Err(TreeError::DuplicateLabel {
                    label: n.label.clone(),
                    level: n.level,
                });
            }
        }

        let level_count = nodes.iter().map(|n| n.level).max().unwrap_or(0) + 1;
        Ok(EmotionTree {
            nodes,
            index,
            root,
            level_count,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn level_count(&self) -> usize {
        self.level_count
    }

    pub fn node(&self, idx: usize) -> &TreeNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_index(&self, id: &str) -> Result<usize, TreeError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| TreeError::UnknownNode(id.into()))
    }

    pub fn is_leaf(&self, idx: usize) -> bool {
        self.nodes[idx].children.is_empty()
    }

    /// Leaf indices in declaration order.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.is_leaf(i)).collect()
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.nodes[idx].children
    }

    /// Path ordered root -> node, inclusive.
    pub fn path_to_root(&self, idx: usize) -> Vec<usize> {
        let mut path = vec![idx];
        let mut cur = idx;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Edge count of the unique path between two nodes.
    pub fn tree_distance(&self, a: usize, b: usize) -> usize {
        let (mut x, mut y) = (a, b);
        let mut d = 0;
        while self.nodes[x].level > self.nodes[y].level {
            x = self.nodes[x].parent.expect("non-root has a parent");
            d += 1;
        }
        while self.nodes[y].level > self.nodes[x].level {
            y = self.nodes[y].parent.expect("non-root has a parent");
            d += 1;
        }
        while x != y {
            x = self.nodes[x].parent.expect("levels agree above root");
            y = self.nodes[y].parent.expect("levels agree above root");
            d += 2;
        }
        d
    }

    /// True when `anc` lies on the path from the root to `node` (inclusive).
    pub fn is_ancestor_or_self(&self, anc: usize, node: usize) -> bool {
        let mut cur = node;
        loop {
            if cur == anc {
                return true;
            }
            match self.nodes[cur].parent {
                Some(p) => cur = p,
                None => return false,
            }
        }
    }

    /// All leaves in the subtree rooted at `idx`, in declaration order.
    pub fn descendant_leaves(&self, idx: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![idx];
        while let Some(n) = stack.pop() {
            if self.is_leaf(n) {
                out.push(n);
            } else {
                // Push in reverse so children pop in declaration order.
                for &c in self.nodes[n].children.iter().rev() {
                    stack.push(c);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Current hyperbolic prototype of a node: `exp_0` of its parameter.
    pub fn prototype(&self, idx: usize) -> PoincarePoint {
        let v = TangentVector::new(self.nodes[idx].prototype_param.clone())
            .expect("prototype params stay finite");
        exp_map_origin(&v)
    }

    pub fn set_prototype_param(&mut self, idx: usize, param: &[f64]) -> Result<(), TreeError> {
        if param.len() != self.dim {
            return Err(TreeError::DimensionMismatch {
                found: param.len(),
                expected: self.dim,
            });
        }
        self.nodes[idx].prototype_param.copy_from_slice(param);
        Ok(())
    }

    /// All prototype parameters stacked into one `(nodes x dim)` matrix,
    /// row order = declaration order.
    pub fn prototypes_matrix(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.prototype_param.clone()).collect();
        Matrix::from_rows(&rows)
    }

    pub fn set_prototypes_matrix(&mut self, m: &Matrix) -> Result<(), TreeError> {
        if m.rows() != self.nodes.len() || m.cols() != self.dim {
            return Err(TreeError::DimensionMismatch {
                found: m.cols(),
                expected: self.dim,
            });
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.prototype_param.copy_from_slice(m.row(i));
        }
        Ok(())
    }

    /// Re-initializes prototypes (same scheme as [`Self::from_specs`]).
    pub fn reinit_prototypes(&mut self, seed: u64, rng_scale: f64) {
        let mut rng = crate::rng::seeded(seed);
        for node in self.nodes.iter_mut() {
            let std = rng_scale * (node.level as f64 + 1.0);
            for p in node.prototype_param.iter_mut() {
                *p = standard_normal(&mut rng) * std;
            }
        }
    }

    /// Moves every prototype parameter to an explicit value; test and
    /// fixture helper.
    pub fn place_prototype(&mut self, id: &str, param: &[f64]) -> Result<(), TreeError> {
        let idx = self.node_index(id)?;
        self.set_prototype_param(idx, param)
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::{wheel, wheel_specs};
    use super::*;
    use alloc::borrow::ToOwned;

    #[test]
    fn wheel_fixture_loads_with_three_levels() {
        let tree = wheel(8, 0);
        assert_eq!(tree.len(), 17);
        assert_eq!(tree.level_count(), 3);
        assert_eq!(tree.leaves().len(), 12);
        assert_eq!(tree.node(tree.root()).id, "emotion");
    }

    #[test]
    fn single_node_document_is_a_valid_tree() {
        let specs = vec![NodeSpec {
            id: "root".to_owned(),
            label: "Root".to_owned(),
            parent_id: None,
            level: 0,
        }];
        let tree = EmotionTree::from_specs(&specs, 4, 0).unwrap();
        assert_eq!(tree.level_count(), 1);
        assert_eq!(tree.leaves(), vec![0]);
    }

    #[test]
    fn missing_parent_is_an_orphan_error() {
        let mut specs = wheel_specs();
        specs.push(NodeSpec {
            id: "stray".to_owned(),
            label: "Stray".to_owned(),
            parent_id: Some("nonexistent".to_owned()),
            level: 1,
        });
        let err = EmotionTree::from_specs(&specs, 4, 0).unwrap_err();
        assert_eq!(
            err,
            TreeError::OrphanNode {
                child: "stray".to_owned(),
                parent: "nonexistent".to_owned()
            }
        );
    }

    #[test]
    fn duplicate_id_and_level_errors_name_the_node() {
        let mut specs = wheel_specs();
        specs.push(specs[3].clone());
        assert!(matches!(
            EmotionTree::from_specs(&specs, 4, 0).unwrap_err(),
            TreeError::DuplicateId(id) if id == specs[3].id
        ));

        let mut specs = wheel_specs();
        specs[2].level = 2; // coarse node claiming a fine level
        assert!(matches!(
            EmotionTree::from_specs(&specs, 4, 0).unwrap_err(),
            TreeError::LevelMismatch(_, 2, 1)
        ));
    }

    #[test]
    fn two_roots_are_rejected() {
        let mut specs = wheel_specs();
        specs.push(NodeSpec {
            id: "other".to_owned(),
            label: "Other".to_owned(),
            parent_id: None,
            level: 0,
        });
        assert!(matches!(
            EmotionTree::from_specs(&specs, 4, 0).unwrap_err(),
            TreeError::MultipleRoots(_, _)
        ));
    }

    #[test]
    fn prototype_is_exp_map_of_parameter() {
        let mut tree = wheel(4, 0);
        let idx = tree.node_index("joy").unwrap();

        tree.set_prototype_param(idx, &[0.0; 4]).unwrap();
        assert_eq!(tree.prototype(idx).coords(), &[0.0; 4]);

        tree.set_prototype_param(idx, &[0.5, 0.0, 0.0, 0.0]).unwrap();
        let p = tree.prototype(idx);
        assert!((p.norm() - libm::tanh(0.5)).abs() < 1e-15);

        // Updates are visible immediately; nothing is cached.
        tree.set_prototype_param(idx, &[0.25, 0.0, 0.0, 0.0]).unwrap();
        assert!((tree.prototype(idx).norm() - libm::tanh(0.25)).abs() < 1e-15);
    }

    #[test]
    fn tree_distance_hand_counts() {
        let tree = wheel(4, 0);
        let joy = tree.node_index("joy").unwrap();
        let delight = tree.node_index("delight").unwrap();
        let pride = tree.node_index("pride").unwrap();
        let grief = tree.node_index("grief").unwrap();

        assert_eq!(tree.tree_distance(joy, joy), 0);
        assert_eq!(tree.tree_distance(delight, pride), 2);
        assert_eq!(tree.tree_distance(delight, grief), 4);
        assert_eq!(tree.tree_distance(tree.root(), delight), 2);
    }

    #[test]
    fn tree_distance_is_a_metric_on_the_fixture() {
        let tree = wheel(4, 0);
        let n = tree.len();
        for a in 0..n {
            for b in 0..n {
                let dab = tree.tree_distance(a, b);
                assert_eq!(dab, tree.tree_distance(b, a));
                assert_eq!(dab == 0, a == b);
                for c in 0..n {
                    assert!(dab + tree.tree_distance(b, c) >= tree.tree_distance(a, c));
                }
            }
        }
    }

    #[test]
    fn children_and_paths() {
        let tree = wheel(4, 0);
        let root = tree.root();
        let joy = tree.node_index("joy").unwrap();
        let delight = tree.node_index("delight").unwrap();

        assert_eq!(tree.children(delight).len(), 0);
        assert_eq!(tree.path_to_root(root), vec![root]);
        assert_eq!(tree.path_to_root(delight), vec![root, joy, delight]);

        // Sum of child counts = node count - 1.
        let total: usize = (0..tree.len()).map(|i| tree.children(i).len()).sum();
        assert_eq!(total, tree.len() - 1);

        // Every leaf path has length level + 1.
        for leaf in tree.leaves() {
            assert_eq!(tree.path_to_root(leaf).len(), tree.node(leaf).level + 1);
        }
    }

    #[test]
    fn descendant_leaves_cover_each_branch() {
        let tree = wheel(4, 0);
        let joy = tree.node_index("joy").unwrap();
        let ids: Vec<&str> = tree
            .descendant_leaves(joy)
            .into_iter()
            .map(|i| tree.node(i).id.as_str())
            .collect();
        assert_eq!(ids, vec!["delight", "pride", "amusement"]);
        assert_eq!(tree.descendant_leaves(tree.root()).len(), 12);
    }

    #[test]
    fn deeper_prototypes_start_farther_out_on_average() {
        let tree = wheel(16, 42);
        let avg = |lvl: usize| {
            let mut s = 0.0;
            let mut c = 0;
            for i in 0..tree.len() {
                if tree.node(i).level == lvl {
                    s += tree.prototype(i).norm();
                    c += 1;
                }
            }
            s / c as f64
        };
        assert!(avg(2) > avg(1));
    }
}
