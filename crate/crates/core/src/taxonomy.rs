//! The binary diagnostic tree.
//!
//! A taxonomy with `N` fine-grained (leaf) categories has exactly `N − 1`
//! coarse-grained (internal) categories and `2N − 1` nodes in total. Node ids
//! index the rows of every per-node matrix in the engine (prompt embeddings,
//! slide embeddings, attention rows), and leaves additionally carry a dense
//! class index `0..N` assigned in left-to-right order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyNode {
    pub id: usize,
    pub name: String,
    pub description: String,
    /// Empty for a leaf, otherwise exactly two child ids (left, right).
    pub children: Vec<usize>,
    pub parent: Option<usize>,
}

impl TaxonomyNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    root: usize,
    leaves: Vec<usize>,
    class_of: Vec<Option<usize>>,
    depth: Vec<usize>,
}

/// On-disk form of a node.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<RawNode>>,
}

/// Parses and validates a taxonomy document.
///
/// Ids are taken from the document when every node carries one; when no node
/// carries one they are assigned in document (pre-)order. Mixing the two is a
/// parse error.
pub fn parse_taxonomy(text: &str) -> Result<Taxonomy> {
    let raw: RawNode = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;

    let mut flat: Vec<(Option<usize>, String, String, Vec<usize>)> = Vec::new();
    fn walk(
        node: &RawNode,
        flat: &mut Vec<(Option<usize>, String, String, Vec<usize>)>,
    ) -> Result<usize> {
        let me = flat.len();
        flat.push((
            node.id,
            node.name.clone(),
            node.description.clone().unwrap_or_default(),
            Vec::new(),
        ));
        if let Some(children) = &node.children {
            if children.len() != 2 {
                return Err(Error::Structure(format!(
                    "node {:?} has {} children; a binary taxonomy needs 0 or 2",
                    node.name,
                    children.len()
                )));
            }
            let mut kids = Vec::with_capacity(2);
            for c in children {
                kids.push(walk(c, flat)?);
            }
            flat[me].3 = kids;
        }
        Ok(me)
    }
    walk(&raw, &mut flat)?;

    let explicit = flat.iter().filter(|n| n.0.is_some()).count();
    if explicit != 0 && explicit != flat.len() {
        return Err(Error::Parse(format!(
            "{explicit} of {} nodes carry an id; give ids for all nodes or none",
            flat.len()
        )));
    }
    let ids: Vec<usize> = flat
        .iter()
        .enumerate()
        .map(|(pos, n)| n.0.unwrap_or(pos))
        .collect();
    let nodes = flat
        .iter()
        .enumerate()
        .map(|(pos, (_, name, desc, kids))| TaxonomyNode {
            id: ids[pos],
            name: name.clone(),
            description: desc.clone(),
            children: kids.iter().map(|&k| ids[k]).collect(),
            parent: None,
        })
        .collect();
    Taxonomy::from_nodes(nodes)
}

impl Taxonomy {
    /// Builds and validates a taxonomy from a flat node list in any order.
    ///
    /// `parent` links may be left empty; they are derived from `children` and,
    /// when present, must agree with them.
    pub fn from_nodes(mut nodes: Vec<TaxonomyNode>) -> Result<Taxonomy> {
        let n = nodes.len();
        if n < 3 {
            return Err(Error::Structure(format!(
                "a taxonomy needs at least 3 nodes (2 leaves), got {n}"
            )));
        }
        nodes.sort_by_key(|node| node.id);
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                let dup = i > 0 && nodes[i - 1].id == node.id;
                return Err(Error::Structure(if dup {
                    format!("duplicate node id {}", node.id)
                } else {
                    format!("node ids must be 0..{}; found {}", n - 1, node.id)
                }));
            }
        }

        let mut parent: Vec<Option<usize>> = vec![None; n];
        for node in &nodes {
            if !(node.children.is_empty() || node.children.len() == 2) {
                return Err(Error::Structure(format!(
                    "node {} has {} children; a binary taxonomy needs 0 or 2",
                    node.id,
                    node.children.len()
                )));
            }
            if node.children.len() == 2 && node.children[0] == node.children[1] {
                return Err(Error::Structure(format!(
                    "node {} lists child {} twice",
                    node.id, node.children[0]
                )));
            }
            for &c in &node.children {
                if c >= n {
                    return Err(Error::Structure(format!(
                        "node {} references missing child {c}",
                        node.id
                    )));
                }
                if let Some(p) = parent[c] {
                    return Err(Error::Structure(format!(
                        "node {c} has two parents ({p} and {})",
                        node.id
                    )));
                }
                parent[c] = Some(node.id);
            }
        }
        for node in &nodes {
            if let Some(p) = node.parent {
                if parent[node.id] != Some(p) {
                    return Err(Error::Structure(format!(
                        "node {} names parent {p} but is not among its children",
                        node.id
                    )));
                }
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(Error::Structure("no root: the child links form a cycle".into())),
            many => {
                return Err(Error::Structure(format!(
                    "multiple roots: {many:?}"
                )))
            }
        };
        for node in &mut nodes {
            node.parent = parent[node.id];
        }

        // Pre-order walk from the root: reaches every node exactly once iff
        // the structure is a single tree.
        let mut depth = vec![usize::MAX; n];
        let mut leaves = Vec::new();
        let mut stack = vec![(root, 0usize)];
        let mut seen = 0;
        while let Some((id, d)) = stack.pop() {
            if depth[id] != usize::MAX {
                return Err(Error::Structure(format!("cycle through node {id}")));
            }
            depth[id] = d;
            seen += 1;
            let node = &nodes[id];
            if node.is_leaf() {
                leaves.push(id);
            }
            for &c in node.children.iter().rev() {
                stack.push((c, d + 1));
            }
        }
        if seen != n {
            return Err(Error::Structure(format!(
                "{} node(s) unreachable from the root (cycle or disconnected part)",
                n - seen
            )));
        }
        let mut class_of = vec![None; n];
        for (k, &leaf) in leaves.iter().enumerate() {
            class_of[leaf] = Some(k);
        }
        debug_assert_eq!(n, 2 * leaves.len() - 1);

        Ok(Taxonomy {
            nodes,
            root,
            leaves,
            class_of,
            depth,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// `N`, the number of fine-grained categories.
    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.len() - self.leaves.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&TaxonomyNode> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes.get(id).is_some_and(TaxonomyNode::is_leaf)
    }

    /// Leaf node ids in class-index order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn leaf_id(&self, class: usize) -> Result<usize> {
        self.leaves
            .get(class)
            .copied()
            .ok_or_else(|| Error::BadLabel(format!("class {class} out of range 0..{}", self.leaves.len())))
    }

    pub fn class_of(&self, leaf_id: usize) -> Result<usize> {
        self.node(leaf_id)?;
        self.class_of[leaf_id].ok_or(Error::NotALeaf(leaf_id))
    }

    /// Root depth is 0.
    pub fn depth(&self, id: usize) -> Result<usize> {
        self.node(id)?;
        Ok(self.depth[id])
    }

    pub fn find_by_name(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Root-first ids from the root to `target` inclusive, found by depth-first
    /// search from the root.
    pub fn find_path(&self, target: usize) -> Result<Vec<usize>> {
        self.node(target)?;
        let mut path = Vec::new();
        fn dfs(t: &Taxonomy, node: usize, target: usize, path: &mut Vec<usize>) -> bool {
            path.push(node);
            if node == target {
                return true;
            }
            for &c in &t.nodes[node].children {
                if dfs(t, c, target, path) {
                    return true;
                }
            }
            path.pop();
            false
        }
        let found = dfs(self, self.root, target, &mut path);
        debug_assert!(found);
        Ok(path)
    }

    /// The other child of `id`'s parent.
    pub fn sibling_of(&self, id: usize) -> Result<usize> {
        let node = self.node(id)?;
        let parent = node.parent.ok_or(Error::RootHasNoSibling)?;
        let kids = &self.nodes[parent].children;
        Ok(if kids[0] == id { kids[1] } else { kids[0] })
    }

    pub fn parent_of(&self, id: usize) -> Result<Option<usize>> {
        Ok(self.node(id)?.parent)
    }

    /// Parent→child (`A1`) and child→parent (`A2 = A1ᵀ`) 0/1 matrices, without
    /// self-loops.
    pub fn adjacency(&self) -> (Tensor, Tensor) {
        let n = self.nodes.len();
        let mut a1 = Tensor::zeros(n, n);
        for node in &self.nodes {
            for &c in &node.children {
                a1.set(node.id, c, 1.0);
            }
        }
        let a2 = a1.transpose();
        (a1, a2)
    }

    /// Ancestors of a leaf plus the leaf itself, root excluded.
    pub fn label_set(&self, leaf_id: usize) -> Result<BTreeSet<usize>> {
        if !self.node(leaf_id)?.is_leaf() {
            return Err(Error::NotALeaf(leaf_id));
        }
        let mut set = BTreeSet::new();
        let mut cur = leaf_id;
        while let Some(p) = self.nodes[cur].parent {
            set.insert(cur);
            cur = p;
        }
        Ok(set)
    }

    /// Leaf ids in the subtree rooted at `id`, left to right.
    pub fn leaves_under(&self, id: usize) -> Result<Vec<usize>> {
        self.node(id)?;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            let node = &self.nodes[cur];
            if node.is_leaf() {
                out.push(cur);
            }
            stack.extend(node.children.iter().rev());
        }
        Ok(out)
    }

    /// Maps each leaf class to the index of the listed subtree containing it.
    /// The subtrees must partition the leaves.
    pub fn subtree_grouping(&self, group_roots: &[usize]) -> Result<Vec<usize>> {
        let mut grouping = vec![usize::MAX; self.leaf_count()];
        for (g, &r) in group_roots.iter().enumerate() {
            for leaf in self.leaves_under(r)? {
                let class = self.class_of[leaf].expect("leaf");
                if grouping[class] != usize::MAX {
                    return Err(Error::IncompleteGrouping(format!(
                        "leaf {leaf} falls under more than one group root"
                    )));
                }
                grouping[class] = g;
            }
        }
        if let Some(c) = grouping.iter().position(|&g| g == usize::MAX) {
            return Err(Error::IncompleteGrouping(format!(
                "leaf class {c} is not covered by any group root"
            )));
        }
        Ok(grouping)
    }

    /// Content hash of the structure and node names, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for node in &self.nodes {
            h.update((node.id as u64).to_le_bytes());
            h.update((node.name.len() as u64).to_le_bytes());
            h.update(node.name.as_bytes());
            for &c in &node.children {
                h.update((c as u64).to_le_bytes());
            }
            h.update([0xff]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serializes back to the nested document form, ids included.
    pub fn to_json(&self) -> String {
        fn build(t: &Taxonomy, id: usize) -> RawNode {
            let node = &t.nodes[id];
            RawNode {
                name: node.name.clone(),
                id: Some(id),
                description: (!node.description.is_empty()).then(|| node.description.clone()),
                children: (!node.is_leaf())
                    .then(|| node.children.iter().map(|&c| build(t, c)).collect()),
            }
        }
        serde_json::to_string_pretty(&build(self, self.root)).expect("serializable")
    }

    /// Copy with every node's children swapped (left ↔ right). Leaf class
    /// indices follow the new left-to-right order.
    pub fn mirrored(&self) -> Taxonomy {
        let nodes = self
            .nodes
            .iter()
            .map(|n| TaxonomyNode {
                children: n.children.iter().rev().copied().collect(),
                parent: None,
                ..n.clone()
            })
            .collect();
        Taxonomy::from_nodes(nodes).expect("mirror of a valid tree")
    }
}

/// A random full binary tree with `leaves` leaves and shuffled node ids.
pub fn random_taxonomy(leaves: usize, seed: u64) -> Taxonomy {
    assert!(leaves >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Grow by repeatedly splitting a random leaf.
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];
    let mut open = vec![0usize];
    while open.len() < leaves {
        let k = rng.random_range(0..open.len());
        let leaf = open.swap_remove(k);
        let (a, b) = (children.len(), children.len() + 1);
        children.push(Vec::new());
        children.push(Vec::new());
        children[leaf] = vec![a, b];
        open.push(a);
        open.push(b);
    }
    let n = children.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let nodes = (0..n)
        .map(|i| TaxonomyNode {
            id: perm[i],
            name: format!("node{}", perm[i]),
            description: String::new(),
            children: children[i].iter().map(|&c| perm[c]).collect(),
            parent: None,
        })
        .collect();
    Taxonomy::from_nodes(nodes).expect("generated tree is valid")
}

/// The 13-node lung-tissue tree shipped with the engine.
pub const SYSFL_TAXONOMY: &str = include_str!("../../../data/sysfl_taxonomy.json");

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const THREE: &str = r#"{"name": "root", "children": [{"name": "A"}, {"name": "B"}]}"#;
    pub(crate) const SEVEN: &str = r#"{"name": "root", "children": [
        {"name": "c1", "children": [{"name": "a"}, {"name": "b"}]},
        {"name": "c2", "children": [{"name": "e"}, {"name": "f"}]}]}"#;

    #[test]
    fn smallest_tree() {
        let t = parse_taxonomy(THREE).unwrap();
        assert_eq!((t.node_count(), t.leaf_count(), t.internal_count()), (3, 2, 1));
        assert_eq!(t.root(), 0);
        assert_eq!(t.leaves(), &[1, 2]);
    }

    #[test]
    fn shipped_lung_tree_counts() {
        let t = parse_taxonomy(SYSFL_TAXONOMY).unwrap();
        assert_eq!((t.node_count(), t.leaf_count(), t.internal_count()), (13, 7, 6));
    }

    #[test]
    fn one_child_is_rejected() {
        let doc = r#"{"name": "r", "children": [{"name": "only"}]}"#;
        assert!(matches!(parse_taxonomy(doc), Err(Error::Structure(_))));
        let doc = r#"{"name": "r", "children": [{"name": "a"}, {"name": "b"}, {"name": "c"}]}"#;
        assert!(matches!(parse_taxonomy(doc), Err(Error::Structure(_))));
    }

    #[test]
    fn malformed_and_degenerate_documents() {
        assert!(matches!(parse_taxonomy("{not json"), Err(Error::Parse(_))));
        assert!(matches!(parse_taxonomy(r#"{"name": "solo"}"#), Err(Error::Structure(_))));
        let mixed = r#"{"name": "r", "id": 0, "children": [{"name": "a"}, {"name": "b", "id": 2}]}"#;
        assert!(matches!(parse_taxonomy(mixed), Err(Error::Parse(_))));
        let dup = r#"{"name": "r", "id": 0, "children": [{"name": "a", "id": 1}, {"name": "b", "id": 1}]}"#;
        assert!(matches!(parse_taxonomy(dup), Err(Error::Structure(_))));
        let gap = r#"{"name": "r", "id": 0, "children": [{"name": "a", "id": 1}, {"name": "b", "id": 5}]}"#;
        assert!(matches!(parse_taxonomy(gap), Err(Error::Structure(_))));
    }

    #[test]
    fn explicit_ids_are_honored() {
        let doc = r#"{"name": "r", "id": 2, "children": [{"name": "a", "id": 0}, {"name": "b", "id": 1}]}"#;
        let t = parse_taxonomy(doc).unwrap();
        assert_eq!(t.root(), 2);
        assert_eq!(t.leaves(), &[0, 1]);
        assert_eq!(t.node(0).unwrap().name, "a");
    }

    fn node(id: usize, children: Vec<usize>) -> TaxonomyNode {
        TaxonomyNode {
            id,
            name: format!("n{id}"),
            description: String::new(),
            children,
            parent: None,
        }
    }

    #[test]
    fn flat_structure_errors() {
        // cycle: 0 -> (1, 2), 1 -> (0, 3) leaves no root
        let cyc = vec![node(0, vec![1, 2]), node(1, vec![0, 3]), node(2, vec![]), node(3, vec![])];
        assert!(matches!(Taxonomy::from_nodes(cyc), Err(Error::Structure(_))));
        // two roots
        let two = vec![
            node(0, vec![1, 2]),
            node(1, vec![]),
            node(2, vec![]),
            node(3, vec![4, 5]),
            node(4, vec![]),
            node(5, vec![]),
        ];
        assert!(matches!(Taxonomy::from_nodes(two), Err(Error::Structure(_))));
        // detached cycle alongside a valid tree
        let detached = vec![
            node(0, vec![1, 2]),
            node(1, vec![]),
            node(2, vec![]),
            node(3, vec![4, 5]),
            node(4, vec![3, 6]),
            node(5, vec![]),
            node(6, vec![]),
        ];
        assert!(matches!(Taxonomy::from_nodes(detached), Err(Error::Structure(_))));
        // inconsistent parent link
        let mut bad = vec![node(0, vec![1, 2]), node(1, vec![]), node(2, vec![])];
        bad[1].parent = Some(2);
        assert!(matches!(Taxonomy::from_nodes(bad), Err(Error::Structure(_))));
    }

    #[test]
    fn paths() {
        let t = parse_taxonomy(THREE).unwrap();
        assert_eq!(t.find_path(0).unwrap(), vec![0]);
        assert_eq!(t.find_path(1).unwrap(), vec![0, 1]);
        assert!(matches!(t.find_path(9), Err(Error::UnknownNode(9))));
    }

    #[test]
    fn siblings() {
        let t = parse_taxonomy(THREE).unwrap();
        assert_eq!(t.sibling_of(1).unwrap(), 2);
        assert!(matches!(t.sibling_of(0), Err(Error::RootHasNoSibling)));
        assert!(matches!(t.sibling_of(7), Err(Error::UnknownNode(7))));
    }

    #[test]
    fn adjacency_counts() {
        let t = parse_taxonomy(THREE).unwrap();
        let (a1, a2) = t.adjacency();
        assert_eq!(a1.sum(), 2.0);
        assert_eq!(a1.get(0, 1), 1.0);
        assert_eq!(a1.get(0, 2), 1.0);
        assert_eq!(a2, a1.transpose());
        let t = parse_taxonomy(SYSFL_TAXONOMY).unwrap();
        let (a1, a2) = t.adjacency();
        assert_eq!((a1.sum(), a2.sum()), (12.0, 12.0));
    }

    #[test]
    fn label_sets() {
        let t = parse_taxonomy(THREE).unwrap();
        assert_eq!(t.label_set(1).unwrap(), BTreeSet::from([1]));
        assert!(matches!(t.label_set(0), Err(Error::NotALeaf(0))));
        let t = parse_taxonomy(SEVEN).unwrap();
        let a = t.find_by_name("a").unwrap();
        let c1 = t.find_by_name("c1").unwrap();
        assert_eq!(t.label_set(a).unwrap(), BTreeSet::from([c1, a]));
    }

    #[test]
    fn grouping_by_subtrees() {
        let t = parse_taxonomy(SEVEN).unwrap();
        let g = t
            .subtree_grouping(&[t.find_by_name("c1").unwrap(), t.find_by_name("c2").unwrap()])
            .unwrap();
        assert_eq!(g, vec![0, 0, 1, 1]);
        assert!(matches!(
            t.subtree_grouping(&[t.find_by_name("c1").unwrap()]),
            Err(Error::IncompleteGrouping(_))
        ));
    }

    #[test]
    fn json_round_trip_and_hash() {
        let t = parse_taxonomy(SYSFL_TAXONOMY).unwrap();
        let again = parse_taxonomy(&t.to_json()).unwrap();
        assert_eq!(t, again);
        assert_eq!(t.hash(), again.hash());
        assert_ne!(t.hash(), t.mirrored().hash());
    }

    fn parent_chain(t: &Taxonomy, leaf: usize) -> Vec<usize> {
        let mut out = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = t.nodes()[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    proptest! {
        #[test]
        fn random_tree_properties(leaves in 2usize..12, seed in 0u64..1000) {
            let t = random_taxonomy(leaves, seed);
            prop_assert_eq!(t.node_count(), 2 * leaves - 1);
            let (a1, _) = t.adjacency();
            for v in 0..t.node_count() {
                let row: f64 = a1.row(v).iter().sum();
                let col: f64 = (0..t.node_count()).map(|u| a1.get(u, v)).sum();
                let want_row = if t.is_leaf(v) { 0.0 } else { 2.0 };
                prop_assert!(row == want_row);
                let want_col = if v == t.root() { 0.0 } else { 1.0 };
                prop_assert!(col == want_col);
                if v != t.root() {
                    prop_assert_eq!(t.sibling_of(t.sibling_of(v).unwrap()).unwrap(), v);
                }
            }
            for &leaf in t.leaves() {
                let path = t.find_path(leaf).unwrap();
                prop_assert_eq!(&path, &parent_chain(&t, leaf));
                let set = t.label_set(leaf).unwrap();
                prop_assert_eq!(set.len(), t.depth(leaf).unwrap());
                let tail: BTreeSet<usize> = path[1..].iter().copied().collect();
                prop_assert_eq!(set, tail);
            }
        }
    }
}
