//! Finite scenario trees, adapted processes and the expectation calculus.
//!
//! A tree of horizon `T_max` realizes a finite filtered probability space:
//! the depth-`t` nodes partition the leaves and generate `F_t`. Any
//! `F_t`-measurable quantity is therefore one value per depth-`t` node, and
//! adaptedness of a process holds by construction.
//!
//! Nodes are numbered breadth first and children of one parent are
//! contiguous, so the descendants of a node at any deeper level form a
//! contiguous id range.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on probability normalization.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree horizon must be at least 1")]
    ZeroHorizon,
    #[error("depth {depth}: branch probability {prob} is not in (0, 1]")]
    BadProbability { depth: usize, prob: f64 },
    #[error("depth {depth}: branch probabilities sum to {sum}, expected 1")]
    ProbabilitySum { depth: usize, sum: f64 },
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("conditioning depth {k} exceeds the variable's depth {d}")]
    DepthOrder { k: usize, d: usize },
    #[error("depth {depth} exceeds tree horizon {horizon}")]
    DepthOutOfRange { depth: usize, horizon: usize },
    #[error("operands live on different trees")]
    TreeMismatch,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("operands have different active depths")]
    ActiveMismatch,
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
}

/// Branching description: one list of branch probabilities per depth
/// `0..T_max`. Every node at depth `t` gets `levels[t].len()` children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub levels: Vec<Vec<f64>>,
}

impl TreeSpec {
    pub fn new(levels: Vec<Vec<f64>>) -> Self {
        Self { levels }
    }

    /// Uniform branching `factors[t]` at each depth.
    pub fn uniform(factors: &[usize]) -> Self {
        Self {
            levels: factors
                .iter()
                .map(|&b| vec![1.0 / b as f64; b])
                .collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.levels.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.levels.iter().map(Vec::len).product()
    }

    pub fn node_count(&self) -> usize {
        let mut total = 1;
        let mut width = 1;
        for level in &self.levels {
            width *= level.len();
            total += width;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub branch_prob: f64,
    pub abs_prob: f64,
    /// Position among the parent's children.
    pub child_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    children: Vec<Range<usize>>,
    levels: Vec<Range<usize>>,
}

fn check_probabilities(depth: usize, probs: &[f64]) -> Result<(), TreeError> {
    if probs.is_empty() {
        return Err(TreeError::Malformed(format!("depth {depth}: no branches")));
    }
    for &p in probs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(TreeError::BadProbability { depth, prob: p });
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(TreeError::ProbabilitySum { depth, sum });
    }
    Ok(())
}

impl ScenarioTree {
    /// Builds the tree described by `spec` with breadth-first node ids.
    pub fn build(spec: &TreeSpec) -> Result<Self, TreeError> {
        if spec.levels.is_empty() {
            return Err(TreeError::ZeroHorizon);
        }
        for (depth, probs) in spec.levels.iter().enumerate() {
            check_probabilities(depth, probs)?;
        }
        let mut parents = vec![None];
        let mut branch = vec![1.0];
        let mut level_start = 0;
        let mut level_end = 1;
        for probs in &spec.levels {
            for p in level_start..level_end {
                for &q in probs {
                    parents.push(Some(p));
                    branch.push(q);
                }
            }
            level_start = level_end;
            level_end = parents.len();
        }
        Self::from_parents(&parents, &branch)
    }

    /// Builds a tree from explicit parent links and branch probabilities.
    ///
    /// Node 0 must be the root; ids must be breadth first with the children
    /// of each parent contiguous and parents in increasing order.
    pub fn from_parents(parents: &[Option<usize>], branch_probs: &[f64]) -> Result<Self, TreeError> {
        let n = parents.len();
        if branch_probs.len() != n {
            return Err(TreeError::Length { expected: n, got: branch_probs.len() });
        }
        if n == 0 || parents[0].is_some() {
            return Err(TreeError::Malformed("node 0 must be the root".into()));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(n);
        nodes.push(Node { id: 0, parent: None, depth: 0, branch_prob: 1.0, abs_prob: 1.0, child_index: 0 });
        let mut children: Vec<Range<usize>> = vec![0..0; n];
        let mut last_parent = 0;
        for id in 1..n {
            let parent = parents[id]
                .ok_or_else(|| TreeError::Malformed(format!("node {id} is a second root")))?;
            if parent >= id || parent < last_parent {
                return Err(TreeError::Malformed(format!("node {id}: ids are not breadth first")));
            }
            let depth = nodes[parent].depth + 1;
            if depth < nodes[id - 1].depth {
                return Err(TreeError::Malformed(format!("node {id}: depth decreases")));
            }
            let range = &mut children[parent];
            let child_index = if range.start == range.end {
                *range = id..id + 1;
                0
            } else {
                if range.end != id {
                    return Err(TreeError::Malformed(format!("children of {parent} are not contiguous")));
                }
                range.end += 1;
                range.len() - 1
            };
            last_parent = parent;
            let prob = branch_probs[id];
            if !(prob > 0.0 && prob <= 1.0) {
                return Err(TreeError::BadProbability { depth, prob });
            }
            let abs_prob = nodes[parent].abs_prob * prob;
            nodes.push(Node { id, parent: Some(parent), depth, branch_prob: prob, abs_prob, child_index });
        }
        let horizon = nodes[n - 1].depth;
        if horizon == 0 {
            return Err(TreeError::ZeroHorizon);
        }
        let mut levels = vec![0..0; horizon + 1];
        for node in &nodes {
            let r = &mut levels[node.depth];
            if r.start == r.end {
                *r = node.id..node.id + 1;
            } else {
                r.end = node.id + 1;
            }
        }
        for node in &nodes {
            let kids = &children[node.id];
            if node.depth < horizon {
                if kids.is_empty() {
                    return Err(TreeError::Malformed(format!(
                        "node {} at depth {} has no children",
                        node.id, node.depth
                    )));
                }
                let sum: f64 = kids.clone().map(|c| nodes[c].branch_prob).sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(TreeError::ProbabilitySum { depth: node.depth, sum });
                }
            }
        }
        for (depth, level) in levels.iter().enumerate() {
            let sum: f64 = level.clone().map(|i| nodes[i].abs_prob).sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(TreeError::ProbabilitySum { depth, sum });
            }
        }
        Ok(Self { nodes, children, levels })
    }

    pub fn horizon(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn abs_prob(&self, id: usize) -> f64 {
        self.nodes[id].abs_prob
    }

    pub fn depth(&self, id: usize) -> usize {
        self.nodes[id].depth
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.nodes[id].parent
    }

    /// Node ids at `depth`.
    pub fn level(&self, depth: usize) -> Range<usize> {
        self.levels[depth].clone()
    }

    pub fn level_len(&self, depth: usize) -> usize {
        self.levels[depth].len()
    }

    pub fn leaves(&self) -> Range<usize> {
        self.level(self.horizon())
    }

    pub fn children(&self, id: usize) -> Range<usize> {
        self.children[id].clone()
    }

    /// Ancestor of `id` at `depth` (the node itself when depths agree).
    pub fn ancestor(&self, mut id: usize, depth: usize) -> usize {
        debug_assert!(depth <= self.nodes[id].depth);
        while self.nodes[id].depth > depth {
            id = self.nodes[id].parent.expect("non-root has a parent");
        }
        id
    }

    /// Root-to-node path; `path[k]` is the depth-`k` ancestor.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id; self.nodes[id].depth + 1];
        let mut cur = id;
        for k in (0..self.nodes[id].depth).rev() {
            cur = self.nodes[cur].parent.expect("non-root has a parent");
            path[k] = cur;
        }
        path
    }

    /// Descendants of `id` at `depth` (≥ the node's depth), as an id range.
    pub fn descendants_at(&self, id: usize, depth: usize) -> Range<usize> {
        debug_assert!(depth >= self.nodes[id].depth);
        let mut r = id..id + 1;
        for _ in self.nodes[id].depth..depth {
            let first = self.children[r.start].start;
            let last = self.children[r.end - 1].end;
            r = first..last;
        }
        r
    }

    /// Writes `node,parent,depth,branch_prob,abs_prob` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "parent", "depth", "branch_prob", "abs_prob"])?;
        for n in &self.nodes {
            w.write_record([
                n.id.to_string(),
                n.parent.map(|p| p.to_string()).unwrap_or_default(),
                n.depth.to_string(),
                n.branch_prob.to_string(),
                n.abs_prob.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A node-indexed vector process. Values at depths that are not active are
/// identically zero.
#[derive(Debug, Clone)]
pub struct AdaptedProcess {
    tree: Arc<ScenarioTree>,
    dim: usize,
    active: Vec<bool>,
    values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &Arc<ScenarioTree>, dim: usize, depths: impl IntoIterator<Item = usize>) -> Self {
        assert!(dim >= 1, "process dimension must be at least 1");
        let mut active = vec![false; tree.horizon() + 1];
        for d in depths {
            active[d] = true;
        }
        Self { tree: Arc::clone(tree), dim, active, values: vec![0.0; tree.len() * dim] }
    }

    /// Process active on every depth of the tree.
    pub fn zeros_full(tree: &Arc<ScenarioTree>, dim: usize) -> Self {
        Self::zeros(tree, dim, 0..=tree.horizon())
    }

    /// Fills every active node with `f(node_id, out)`.
    pub fn from_fn<F>(tree: &Arc<ScenarioTree>, dim: usize, depths: impl IntoIterator<Item = usize>, f: F) -> Self
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        let mut p = Self::zeros(tree, dim, depths);
        let active = p.active.clone();
        let rows: Vec<Vec<f64>> = crate::exec::map_indices(tree.len(), |id| {
            let mut row = vec![0.0; dim];
            if active[tree.depth(id)] {
                f(id, &mut row);
            }
            row
        });
        for (id, row) in rows.into_iter().enumerate() {
            p.values[id * dim..(id + 1) * dim].copy_from_slice(&row);
        }
        p
    }

    pub fn tree(&self) -> &Arc<ScenarioTree> {
        &self.tree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_active(&self, depth: usize) -> bool {
        self.active.get(depth).copied().unwrap_or(false)
    }

    pub fn active_depths(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&d| self.active[d]).collect()
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    pub fn get(&self, node: usize, component: usize) -> f64 {
        self.values[node * self.dim + component]
    }

    /// Mutable access; panics when the node's depth is not active.
    pub fn value_mut(&mut self, node: usize) -> &mut [f64] {
        assert!(self.active[self.tree.depth(node)], "node {node} lies on an inactive depth");
        &mut self.values[node * self.dim..(node + 1) * self.dim]
    }

    pub fn set(&mut self, node: usize, component: usize, value: f64) {
        self.value_mut(node)[component] = value;
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    /// The process' values at one depth as a random variable.
    pub fn at_depth(&self, depth: usize) -> RandomVariable {
        let r = self.tree.level(depth);
        RandomVariable {
            tree: Arc::clone(&self.tree),
            depth,
            dim: self.dim,
            values: self.values[r.start * self.dim..r.end * self.dim].to_vec(),
        }
    }

    /// Overwrites depth `depth` from a random variable of matching dimension.
    pub fn set_depth(&mut self, rv: &RandomVariable) -> Result<(), TreeError> {
        if !Arc::ptr_eq(&self.tree, &rv.tree) && *self.tree != *rv.tree {
            return Err(TreeError::TreeMismatch);
        }
        if rv.dim != self.dim {
            return Err(TreeError::DimMismatch(self.dim, rv.dim));
        }
        self.active[rv.depth] = true;
        let r = self.tree.level(rv.depth);
        self.values[r.start * self.dim..r.end * self.dim].copy_from_slice(&rv.values);
        Ok(())
    }

    /// One component as a scalar process with the same active depths.
    pub fn component(&self, c: usize) -> AdaptedProcess {
        let mut out = AdaptedProcess { tree: Arc::clone(&self.tree), dim: 1, active: self.active.clone(), values: vec![0.0; self.tree.len()] };
        for id in 0..self.tree.len() {
            out.values[id] = self.values[id * self.dim + c];
        }
        out
    }

    pub fn scaled(&self, a: f64) -> AdaptedProcess {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= a);
        out
    }

    /// `a·self + b·other`; active depths are the union.
    pub fn lin_comb(&self, a: f64, other: &AdaptedProcess, b: f64) -> Result<AdaptedProcess, TreeError> {
        self.check_compatible(other, false)?;
        let mut out = self.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = a * self.values[i] + b * other.values[i];
        }
        for (d, act) in out.active.iter_mut().enumerate() {
            *act |= other.active[d];
        }
        Ok(out)
    }

    fn check_compatible(&self, other: &AdaptedProcess, same_active: bool) -> Result<(), TreeError> {
        if !Arc::ptr_eq(&self.tree, &other.tree) && *self.tree != *other.tree {
            return Err(TreeError::TreeMismatch);
        }
        if self.dim != other.dim {
            return Err(TreeError::DimMismatch(self.dim, other.dim));
        }
        if same_active && self.active != other.active {
            return Err(TreeError::ActiveMismatch);
        }
        Ok(())
    }

    /// Squared norm in the ambient Hilbert space.
    pub fn norm_sq_h(&self) -> f64 {
        inner_product_h(self, self).expect("a process is compatible with itself")
    }
}

/// `Σ_k E(ξ(k)·η(k))` over the common active depths.
pub fn inner_product_h(xi: &AdaptedProcess, eta: &AdaptedProcess) -> Result<f64, TreeError> {
    xi.check_compatible(eta, true)?;
    let tree = &xi.tree;
    let dim = xi.dim;
    let mut total = 0.0;
    for (depth, &act) in xi.active.iter().enumerate() {
        if !act {
            continue;
        }
        for id in tree.level(depth) {
            let a = &xi.values[id * dim..(id + 1) * dim];
            let b = &eta.values[id * dim..(id + 1) * dim];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += tree.abs_prob(id) * dot;
        }
    }
    Ok(total)
}

/// An `F_d`-measurable random vector: one value per depth-`d` node.
#[derive(Debug, Clone)]
pub struct RandomVariable {
    tree: Arc<ScenarioTree>,
    depth: usize,
    dim: usize,
    values: Vec<f64>,
}

impl RandomVariable {
    /// `values` holds `dim` entries per depth-`depth` node in id order.
    pub fn new(tree: &Arc<ScenarioTree>, depth: usize, dim: usize, values: Vec<f64>) -> Result<Self, TreeError> {
        if depth > tree.horizon() {
            return Err(TreeError::DepthOutOfRange { depth, horizon: tree.horizon() });
        }
        if dim == 0 {
            return Err(TreeError::DimMismatch(1, 0));
        }
        let expected = tree.level_len(depth) * dim;
        if values.len() != expected {
            return Err(TreeError::Length { expected, got: values.len() });
        }
        Ok(Self { tree: Arc::clone(tree), depth, dim, values })
    }

    /// Scalar variable from one value per depth-`depth` node.
    pub fn scalar(tree: &Arc<ScenarioTree>, depth: usize, values: Vec<f64>) -> Result<Self, TreeError> {
        Self::new(tree, depth, 1, values)
    }

    pub fn from_fn<F>(tree: &Arc<ScenarioTree>, depth: usize, dim: usize, f: F) -> Self
    where
        F: Fn(usize, &mut [f64]),
    {
        let mut values = vec![0.0; tree.level_len(depth) * dim];
        for (i, id) in tree.level(depth).enumerate() {
            f(id, &mut values[i * dim..(i + 1) * dim]);
        }
        Self { tree: Arc::clone(tree), depth, dim, values }
    }

    pub fn tree(&self) -> &Arc<ScenarioTree> {
        &self.tree
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at the depth-`depth` node `id`.
    pub fn at(&self, id: usize) -> &[f64] {
        let i = id - self.tree.level(self.depth).start;
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn expectation(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for (i, id) in self.tree.level(self.depth).enumerate() {
            let p = self.tree.abs_prob(id);
            for c in 0..self.dim {
                acc[c] += p * self.values[i * self.dim + c];
            }
        }
        acc
    }

    /// `E(X | F_k)` as a process active only at depth `k`.
    pub fn conditional_expectation(&self, k: usize) -> Result<AdaptedProcess, TreeError> {
        if k > self.depth {
            return Err(TreeError::DepthOrder { k, d: self.depth });
        }
        let ce = self.conditional_at(k)?;
        let mut out = AdaptedProcess::zeros(&self.tree, self.dim, [k]);
        out.set_depth(&ce)?;
        Ok(out)
    }

    /// `E(X | F_k)` as a depth-`k` random variable.
    pub fn conditional_at(&self, k: usize) -> Result<RandomVariable, TreeError> {
        if k > self.depth {
            return Err(TreeError::DepthOrder { k, d: self.depth });
        }
        let tree = &self.tree;
        let start = tree.level(self.depth).start;
        let dim = self.dim;
        let values = tree
            .level(k)
            .flat_map(|n| {
                let mut acc = vec![0.0; dim];
                let pn = tree.abs_prob(n);
                for leaf in tree.descendants_at(n, self.depth) {
                    let w = tree.abs_prob(leaf) / pn;
                    let i = leaf - start;
                    for c in 0..dim {
                        acc[c] += w * self.values[i * dim + c];
                    }
                }
                acc
            })
            .collect();
        RandomVariable::new(tree, k, dim, values)
    }

    /// `E|X − EX|²`; the ordinary variance for scalar variables and the trace
    /// of the covariance matrix otherwise.
    pub fn variance(&self) -> f64 {
        let mean = self.expectation();
        let mut acc = 0.0;
        for (i, id) in self.tree.level(self.depth).enumerate() {
            let p = self.tree.abs_prob(id);
            let sq: f64 = (0..self.dim)
                .map(|c| {
                    let d = self.values[i * self.dim + c] - mean[c];
                    d * d
                })
                .sum();
            acc += p * sq;
        }
        acc
    }

    /// Covariance matrix (row major, `dim × dim`).
    pub fn covariance(&self) -> Vec<f64> {
        let mean = self.expectation();
        let dim = self.dim;
        let mut cov = vec![0.0; dim * dim];
        for (i, id) in self.tree.level(self.depth).enumerate() {
            let p = self.tree.abs_prob(id);
            let row = &self.values[i * dim..(i + 1) * dim];
            for a in 0..dim {
                for b in 0..dim {
                    cov[a * dim + b] += p * (row[a] - mean[a]) * (row[b] - mean[b]);
                }
            }
        }
        cov
    }

    /// The same variable viewed on a deeper level.
    pub fn lift(&self, depth: usize) -> Result<RandomVariable, TreeError> {
        if depth < self.depth {
            return Err(TreeError::DepthOrder { k: depth, d: self.depth });
        }
        if depth > self.tree.horizon() {
            return Err(TreeError::DepthOutOfRange { depth, horizon: self.tree.horizon() });
        }
        let dim = self.dim;
        Ok(RandomVariable::from_fn(&self.tree, depth, dim, |id, out| {
            let anc = self.tree.ancestor(id, self.depth);
            out.copy_from_slice(self.at(anc));
        }))
    }

    pub fn component(&self, c: usize) -> RandomVariable {
        let values = (0..self.values.len() / self.dim).map(|i| self.values[i * self.dim + c]).collect();
        RandomVariable { tree: Arc::clone(&self.tree), depth: self.depth, dim: 1, values }
    }

    /// Elementwise combination of two variables on the same level.
    pub fn zip_with<F: Fn(f64, f64) -> f64>(&self, other: &RandomVariable, f: F) -> Result<RandomVariable, TreeError> {
        if !Arc::ptr_eq(&self.tree, &other.tree) && *self.tree != *other.tree {
            return Err(TreeError::TreeMismatch);
        }
        if self.depth != other.depth {
            return Err(TreeError::DepthOrder { k: other.depth, d: self.depth });
        }
        if self.dim != other.dim {
            return Err(TreeError::DimMismatch(self.dim, other.dim));
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(RandomVariable { tree: Arc::clone(&self.tree), depth: self.depth, dim: self.dim, values })
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> RandomVariable {
        RandomVariable {
            tree: Arc::clone(&self.tree),
            depth: self.depth,
            dim: self.dim,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(spec: TreeSpec) -> Arc<ScenarioTree> {
        Arc::new(ScenarioTree::build(&spec).unwrap())
    }

    #[test]
    fn coin_tree() {
        let t = ScenarioTree::build(&TreeSpec::new(vec![vec![0.5, 0.5]])).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.horizon(), 1);
        for id in t.leaves() {
            assert_eq!(t.abs_prob(id), 0.5);
        }
    }

    #[test]
    fn deterministic_chain() {
        let t = ScenarioTree::build(&TreeSpec::new(vec![vec![1.0], vec![1.0]])).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.nodes().iter().all(|n| n.abs_prob == 1.0));
    }

    #[test]
    fn two_by_three() {
        let third = 1.0 / 3.0;
        let t = ScenarioTree::build(&TreeSpec::new(vec![vec![0.4, 0.6], vec![third, third, third]])).unwrap();
        assert_eq!(t.len(), 9);
        let leaf_probs: Vec<f64> = t.leaves().map(|id| t.abs_prob(id)).collect();
        for (i, p) in leaf_probs.iter().enumerate() {
            let expected = if i < 3 { 0.4 / 3.0 } else { 0.6 / 3.0 };
            assert!((p - expected).abs() < 1e-15);
        }
        assert_eq!(t.descendants_at(1, 2), 3..6);
        assert_eq!(t.descendants_at(0, 2), 3..9);
        assert_eq!(t.path(7), vec![0, 2, 7]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(ScenarioTree::build(&TreeSpec::new(vec![])), Err(TreeError::ZeroHorizon));
        assert!(matches!(
            ScenarioTree::build(&TreeSpec::new(vec![vec![0.0, 1.0]])),
            Err(TreeError::BadProbability { .. })
        ));
        assert!(matches!(
            ScenarioTree::build(&TreeSpec::new(vec![vec![-0.5, 1.5]])),
            Err(TreeError::BadProbability { .. })
        ));
        assert!(matches!(
            ScenarioTree::build(&TreeSpec::new(vec![vec![0.5, 0.5 + 1e-9]])),
            Err(TreeError::ProbabilitySum { .. })
        ));
    }

    #[test]
    fn from_parents_rejects_non_bfs() {
        // children of node 1 interleaved with those of node 2
        let parents = [None, Some(0), Some(0), Some(2), Some(1)];
        let probs = [1.0, 0.5, 0.5, 1.0, 1.0];
        assert!(ScenarioTree::from_parents(&parents, &probs).is_err());
        // uneven depth of leaves
        let parents = [None, Some(0), Some(0), Some(1)];
        let probs = [1.0, 0.5, 0.5, 1.0];
        assert!(ScenarioTree::from_parents(&parents, &probs).is_err());
    }

    #[test]
    fn expectation_examples() {
        let t = arc(TreeSpec::new(vec![vec![0.5, 0.5]]));
        let x = RandomVariable::scalar(&t, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(x.expectation(), vec![2.0]);

        let chain = arc(TreeSpec::new(vec![vec![1.0], vec![1.0]]));
        let x = RandomVariable::scalar(&chain, 2, vec![7.0]).unwrap();
        assert_eq!(x.expectation(), vec![7.0]);

        let third = 1.0 / 3.0;
        let t = arc(TreeSpec::new(vec![vec![0.4, 0.6], vec![third, third, third]]));
        let ind = RandomVariable::scalar(&t, 2, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((ind.expectation()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn conditional_expectation_examples() {
        let t = arc(TreeSpec::uniform(&[2, 2]));
        let x = RandomVariable::scalar(&t, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ce = x.conditional_at(1).unwrap();
        assert_eq!(ce.values(), &[1.5, 3.5]);
        assert_eq!(x.conditional_at(2).unwrap().values(), x.values());
        assert_eq!(x.conditional_at(0).unwrap().values(), &x.expectation()[..]);
        assert_eq!(x.conditional_at(3).unwrap_err(), TreeError::DepthOrder { k: 3, d: 2 });
        let p = x.conditional_expectation(1).unwrap();
        assert_eq!(p.active_depths(), vec![1]);
        assert_eq!(p.value(2), &[3.5]);
        assert_eq!(p.value(0), &[0.0]);
    }

    #[test]
    fn variance_examples() {
        let chain = arc(TreeSpec::new(vec![vec![1.0]]));
        assert_eq!(RandomVariable::scalar(&chain, 1, vec![5.0]).unwrap().variance(), 0.0);
        let coin = arc(TreeSpec::new(vec![vec![0.5, 0.5]]));
        assert_eq!(RandomVariable::scalar(&coin, 1, vec![1.0, -1.0]).unwrap().variance(), 1.0);
        let skew = arc(TreeSpec::new(vec![vec![0.3, 0.7]]));
        let v = RandomVariable::scalar(&skew, 1, vec![10.0, 0.0]).unwrap().variance();
        assert!((v - 21.0).abs() < 1e-12);
    }

    #[test]
    fn inner_product_examples() {
        let chain = arc(TreeSpec::new(vec![vec![1.0]]));
        let mut ones = AdaptedProcess::zeros(&chain, 1, [0, 1]);
        ones.set(0, 0, 1.0);
        ones.set(1, 0, 1.0);
        assert_eq!(inner_product_h(&ones, &ones).unwrap(), 2.0);

        let t = arc(TreeSpec::uniform(&[2]));
        let mut a = AdaptedProcess::zeros(&t, 1, [0, 1]);
        let mut b = AdaptedProcess::zeros(&t, 1, [0, 1]);
        a.set(0, 0, 1.0);
        b.set(1, 0, 1.0);
        b.set(2, 0, 1.0);
        assert_eq!(inner_product_h(&a, &b).unwrap(), 0.0);

        let mut a = AdaptedProcess::zeros(&t, 1, [0]);
        let mut b = AdaptedProcess::zeros(&t, 1, [0]);
        a.set(0, 0, 3.0);
        b.set(0, 0, -2.5);
        assert_eq!(inner_product_h(&a, &b).unwrap(), -7.5);
    }

    #[test]
    fn inner_product_rejects_mismatch() {
        let t = arc(TreeSpec::uniform(&[2]));
        let other = arc(TreeSpec::uniform(&[3]));
        let a = AdaptedProcess::zeros(&t, 1, [0]);
        assert_eq!(inner_product_h(&a, &AdaptedProcess::zeros(&other, 1, [0])), Err(TreeError::TreeMismatch));
        assert_eq!(inner_product_h(&a, &AdaptedProcess::zeros(&t, 2, [0])), Err(TreeError::DimMismatch(1, 2)));
        assert_eq!(inner_product_h(&a, &AdaptedProcess::zeros(&t, 1, [1])), Err(TreeError::ActiveMismatch));
    }

    #[test]
    fn csv_export() {
        let t = ScenarioTree::build(&TreeSpec::uniform(&[2])).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "node,parent,depth,branch_prob,abs_prob\n0,,0,1,1\n1,0,1,0.5,0.5\n2,0,1,0.5,0.5\n");
    }
}
