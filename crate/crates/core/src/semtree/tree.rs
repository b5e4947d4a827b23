use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf,
    Internal,
}

#[derive(Clone, Debug)]
pub struct TreeNode<P> {
    pub id: usize,
    pub kind: NodeKind,
    pub height: usize,
    /// First and last leaf index covered, inclusive.
    pub span: (usize, usize),
    pub children: Option<[usize; 2]>,
    pub payload: P,
}

/// Serializable view of one node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: usize,
    pub kind: NodeKind,
    pub height: usize,
    pub span: (usize, usize),
    pub children: Vec<usize>,
}

/// Binary tree grown one leaf at a time with binary-counter carries.
///
/// `frontier` holds the roots of the complete subtrees, heights strictly
/// decreasing. Sealing folds the frontier from the right into a single root;
/// those fold nodes are the only ones [`SemanticTree::reopen`] discards.
#[derive(Clone, Debug)]
pub struct SemanticTree<P> {
    nodes: Vec<TreeNode<P>>,
    frontier: Vec<usize>,
    leaves: usize,
    root: Option<usize>,
    seal_start: Option<usize>,
}

impl<P> Default for SemanticTree<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> SemanticTree<P> {
    pub fn new() -> Self {
        SemanticTree {
            nodes: Vec::new(),
            frontier: Vec::new(),
            leaves: 0,
            root: None,
            seal_start: None,
        }
    }

    pub fn nodes(&self) -> &[TreeNode<P>] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode<P> {
        &self.nodes[id]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.len() - self.leaves
    }

    pub fn root(&self) -> Option<usize> {
        self.root
    }

    pub fn is_sealed(&self) -> bool {
        self.root.is_some()
    }

    fn push(&mut self, kind: NodeKind, height: usize, span: (usize, usize), children: Option<[usize; 2]>, payload: P) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            kind,
            height,
            span,
            children,
            payload,
        });
        id
    }

    fn join<F>(&mut self, left: usize, right: usize, merge: &mut F) -> Result<usize>
    where
        F: FnMut(&P, &P) -> Result<P>,
    {
        let (l, r) = (&self.nodes[left], &self.nodes[right]);
        debug_assert_eq!(l.span.1 + 1, r.span.0);
        let payload = merge(&l.payload, &r.payload)?;
        let height = 1 + l.height.max(r.height);
        let span = (l.span.0, r.span.1);
        Ok(self.push(NodeKind::Internal, height, span, Some([left, right]), payload))
    }

    /// Adds a leaf and performs every carry it triggers. Returns the ids of
    /// the nodes created, leaf first.
    pub fn append_leaf<F>(&mut self, payload: P, merge: &mut F) -> Result<Vec<usize>>
    where
        F: FnMut(&P, &P) -> Result<P>,
    {
        if self.is_sealed() {
            return Err(Error::state("cannot append to a sealed tree"));
        }
        let index = self.leaves;
        let mut carry = self.push(NodeKind::Leaf, 0, (index, index), None, payload);
        self.leaves += 1;
        let mut created = vec![carry];
        while let Some(&top) = self.frontier.last() {
            if self.nodes[top].height != self.nodes[carry].height {
                break;
            }
            self.frontier.pop();
            carry = self.join(top, carry, merge)?;
            created.push(carry);
        }
        self.frontier.push(carry);
        Ok(created)
    }

    /// Folds the frontier into a single root. Sealing an empty tree is an error.
    pub fn seal<F>(&mut self, merge: &mut F) -> Result<usize>
    where
        F: FnMut(&P, &P) -> Result<P>,
    {
        if let Some(r) = self.root {
            return Ok(r);
        }
        let mut carry = *self
            .frontier
            .last()
            .ok_or_else(|| Error::state("cannot seal an empty tree"))?;
        self.seal_start = Some(self.nodes.len());
        let rest: Vec<usize> = self.frontier.iter().rev().skip(1).copied().collect();
        for left in rest {
            carry = self.join(left, carry, merge)?;
        }
        self.root = Some(carry);
        Ok(carry)
    }

    /// Undoes [`SemanticTree::seal`] so more leaves can be appended.
    pub fn reopen(&mut self) -> Result<()> {
        if !self.is_sealed() {
            return Ok(());
        }
        let start = self
            .seal_start
            .ok_or_else(|| Error::state("tree was not built incrementally"))?;
        self.nodes.truncate(start);
        self.root = None;
        self.seal_start = None;
        Ok(())
    }

    /// Ids created by the most recent seal.
    pub fn seal_nodes(&self) -> std::ops::Range<usize> {
        match self.seal_start {
            Some(s) => s..self.nodes.len(),
            None => self.nodes.len()..self.nodes.len(),
        }
    }

    /// Level-by-level left-to-right pairing; an odd node at the end of a level
    /// moves up unchanged.
    pub fn build_batch<F>(leaves: Vec<P>, merge: &mut F) -> Result<Self>
    where
        F: FnMut(&P, &P) -> Result<P>,
    {
        if leaves.is_empty() {
            return Err(Error::arg("cannot build a tree without leaves"));
        }
        let mut tree = SemanticTree::new();
        let mut level: Vec<usize> = leaves
            .into_iter()
            .enumerate()
            .map(|(i, p)| tree.push(NodeKind::Leaf, 0, (i, i), None, p))
            .collect();
        tree.leaves = level.len();
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            for pair in level.chunks(2) {
                next.push(match *pair {
                    [l, r] => tree.join(l, r, merge)?,
                    [only] => only,
                    _ => unreachable!(),
                });
            }
            level = next;
        }
        tree.root = Some(level[0]);
        tree.frontier = vec![level[0]];
        Ok(tree)
    }

    /// Ids ordered by height, then by first covered leaf.
    pub fn flatten(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.nodes.len()).collect();
        ids.sort_by_key(|&i| (self.nodes[i].height, self.nodes[i].span.0, i));
        ids
    }

    pub fn info(&self) -> Vec<NodeInfo> {
        self.nodes
            .iter()
            .map(|n| NodeInfo {
                id: n.id,
                kind: n.kind,
                height: n.height,
                span: n.span,
                children: n.children.map(|c| c.to_vec()).unwrap_or_default(),
            })
            .collect()
    }

    /// Rebuilds a tree from a structure dump and payloads in id order.
    pub fn from_parts(info: &[NodeInfo], payloads: Vec<P>, root: Option<usize>, seal_start: Option<usize>) -> Result<Self> {
        if info.len() != payloads.len() {
            return Err(Error::arg("node table and payload count differ"));
        }
        let mut tree = SemanticTree::new();
        for (i, (n, p)) in info.iter().zip(payloads).enumerate() {
            if n.id != i {
                return Err(Error::arg(format!("node {i} carries id {}", n.id)));
            }
            let children = match n.children.as_slice() {
                [] => None,
                &[a, b] if a < i && b < i => Some([a, b]),
                _ => return Err(Error::arg(format!("node {i} has invalid children"))),
            };
            if (n.kind == NodeKind::Leaf) != children.is_none() {
                return Err(Error::arg(format!("node {i} kind disagrees with children")));
            }
            if n.kind == NodeKind::Leaf {
                tree.leaves += 1;
            }
            tree.push(n.kind, n.height, n.span, children, p);
        }
        let end = seal_start.unwrap_or(tree.nodes.len());
        if end > tree.nodes.len() || root.is_some_and(|r| r >= tree.nodes.len()) {
            return Err(Error::arg("root or seal marker out of range"));
        }
        // The frontier is every node below the seal marker that has no parent there.
        let mut has_parent = vec![false; end];
        for n in &tree.nodes[..end] {
            if let Some([a, b]) = n.children {
                has_parent[a] = true;
                has_parent[b] = true;
            }
        }
        let mut frontier: Vec<usize> = (0..end).filter(|&i| !has_parent[i]).collect();
        frontier.sort_by_key(|&i| tree.nodes[i].span.0);
        tree.frontier = frontier;
        tree.root = root;
        tree.seal_start = seal_start;
        Ok(tree)
    }

    pub fn map_payloads<Q>(self, mut f: impl FnMut(P) -> Q) -> SemanticTree<Q> {
        SemanticTree {
            nodes: self
                .nodes
                .into_iter()
                .map(|n| TreeNode {
                    id: n.id,
                    kind: n.kind,
                    height: n.height,
                    span: n.span,
                    children: n.children,
                    payload: f(n.payload),
                })
                .collect(),
            frontier: self.frontier,
            leaves: self.leaves,
            root: self.root,
            seal_start: self.seal_start,
        }
    }

    pub fn seal_start(&self) -> Option<usize> {
        self.seal_start
    }
}

/// Positions (into `scores`) of the `⌈keep_fraction·N⌉` best-scored entries,
/// ascending. Ties go to the lower position.
pub fn retrieve_top_nodes(scores: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::arg(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    // The small slack keeps products like 0.7 × 10 from rounding up past the intent.
    let keep = ((keep_fraction * scores.len() as f64 - 1e-9).ceil() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
