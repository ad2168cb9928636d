//! Finite filtered probability trees.
//!
//! A tree of depth `T` realizes a filtration: level `n` is the information
//! available at time `n`, a node at level `n` is an atom of `F_n`, and an
//! adapted process is simply a value per node. A family of branch-probability
//! assignments on the shared topology plays the role of the null set of
//! measures, and a stopping time is an exhaustive prefix-free set of stop
//! nodes. Everything downstream (certificates, envelopes, Doob parts) is an
//! exact sum over this structure.
//!
//! All values are immutable after construction and every operation is a pure
//! function, so concurrent evaluation needs no coordination.

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Real;

/// Level-ordered node index: root is 0, then level 1 left to right, and so on.
pub type NodeId = usize;

/// Enumeration refuses to materialize more stopping times than this.
pub const DEFAULT_ENUM_CAP: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("malformed tree: node at level {level} has zero children")]
    ZeroChildCount { level: usize },
    #[error("level {level} out of range for tree of depth {depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("horizon {horizon} exceeds tree depth {depth}")]
    HorizonOutOfRange { horizon: usize, depth: usize },
    #[error("branch probabilities at node {node} sum to {sum} (expected 1)")]
    BranchSum { node: NodeId, sum: f64 },
    #[error("negative branch probability {prob} on edge into node {node}")]
    NegativeProb { node: NodeId, prob: f64 },
    #[error("measure {measure} has {got} edge probabilities, tree has {expected} nodes")]
    ProbCount { measure: usize, got: usize, expected: usize },
    #[error("{got} measure labels for {expected} measures")]
    LabelCount { got: usize, expected: usize },
    #[error("process has {got} values, tree has {expected} nodes")]
    ValueCount { got: usize, expected: usize },
    #[error("process flagged nonnegative has negative value {value} at node {node}")]
    NegativeValue { node: NodeId, value: f64 },
    #[error("process and operand reference different trees")]
    TreeMismatch,
    #[error("stopping-time stop set is not prefix-free: {descendant} descends from {ancestor}")]
    NotPrefixFree { ancestor: NodeId, descendant: NodeId },
    #[error("stopping time not exhaustive: path through node {node} at level {level} never stops")]
    NotExhaustive { node: NodeId, level: usize },
    #[error("stop node {node} lies at level {level}, beyond horizon {horizon}")]
    StopBeyondHorizon { node: NodeId, level: usize, horizon: usize },
    #[error("{count} stopping times at horizon {horizon} exceed enumeration cap {cap}")]
    EnumerationCap { count: u128, horizon: usize, cap: u128 },
    #[error("per-level branching spec for level {level} has {got} entries, level has {expected} nodes")]
    BranchingShape { level: usize, got: usize, expected: usize },
}

// ---------------------------------------------------------------------------
// OutcomeTree
// ---------------------------------------------------------------------------

/// Finite rooted tree with arbitrary branching; levels are the filtration.
///
/// Node ids are stable and level-ordered. Leaves exist only at the final
/// level. The tree is immutable after construction; measures and processes
/// reference it through an [`Arc`] so many of them can share one topology.
#[derive(Debug)]
pub struct OutcomeTree {
    depth: usize,
    /// `level_start[l]..level_start[l + 1]` are the nodes of level `l`.
    level_start: Vec<NodeId>,
    children: Vec<Vec<NodeId>>,
    parent: Vec<NodeId>,
}

impl OutcomeTree {
    /// Builds a tree from explicit per-level, per-node child counts.
    ///
    /// `branching[l][i]` is the child count of the `i`-th node of level `l`;
    /// the depth is `branching.len()`. Every count must be at least 1.
    pub fn build(branching: &[Vec<usize>]) -> Result<Arc<Self>, TreeError> {
        let depth = branching.len();
        let mut level_start = vec![0usize];
        let mut level_sizes = vec![1usize];
        for (l, counts) in branching.iter().enumerate() {
            if counts.len() != level_sizes[l] {
                return Err(TreeError::BranchingShape {
                    level: l,
                    got: counts.len(),
                    expected: level_sizes[l],
                });
            }
            if counts.contains(&0) {
                return Err(TreeError::ZeroChildCount { level: l });
            }
            level_sizes.push(counts.iter().sum());
        }
        let node_count: usize = level_sizes.iter().sum();
        for &size in &level_sizes {
            let prev = *level_start.last().unwrap();
            level_start.push(prev + size);
        }
        let mut children = vec![Vec::new(); node_count];
        let mut parent = vec![0usize; node_count];
        for (l, counts) in branching.iter().enumerate() {
            let mut next = level_start[l + 1];
            for (i, &c) in counts.iter().enumerate() {
                let node = level_start[l] + i;
                for _ in 0..c {
                    children[node].push(next);
                    parent[next] = node;
                    next += 1;
                }
            }
        }
        Ok(Arc::new(OutcomeTree {
            depth,
            level_start,
            children,
            parent,
        }))
    }

    /// Same child count for every node of a level; `counts.len()` is the depth.
    pub fn uniform(counts: &[usize]) -> Result<Arc<Self>, TreeError> {
        let mut width = 1usize;
        let mut branching = Vec::with_capacity(counts.len());
        for &c in counts {
            branching.push(vec![c; width]);
            width = width.checked_mul(c.max(1)).expect("tree width overflow");
        }
        Self::build(&branching)
    }

    /// Binary tree of the given depth.
    pub fn binary(depth: usize) -> Arc<Self> {
        Self::uniform(&vec![2; depth]).expect("binary branching is valid")
    }

    /// Single-branch chain of the given depth (one path, depth + 1 nodes).
    pub fn chain(depth: usize) -> Arc<Self> {
        Self::uniform(&vec![1; depth]).expect("chain branching is valid")
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        *self.level_start.last().unwrap()
    }

    /// Node ids of level `l`.
    pub fn level(&self, l: usize) -> std::ops::Range<NodeId> {
        self.level_start[l]..self.level_start[l + 1]
    }

    pub fn level_len(&self, l: usize) -> usize {
        self.level_start[l + 1] - self.level_start[l]
    }

    pub fn level_of(&self, node: NodeId) -> usize {
        // level_start is sorted; partition_point gives the first level starting past node
        self.level_start.partition_point(|&s| s <= node) - 1
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.children[node]
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        (node != 0).then(|| self.parent[node])
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.children[node].is_empty()
    }

    fn check_level(&self, level: usize) -> Result<(), TreeError> {
        if level > self.depth {
            return Err(TreeError::LevelOutOfRange {
                level,
                depth: self.depth,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// MeasureFamily
// ---------------------------------------------------------------------------

/// A finite family of probability measures on one shared tree topology.
///
/// Each measure assigns a weight to every parent→child edge; the weight of
/// the edge into node `c` is stored at index `c` (the root entry is unused
/// and fixed to 1). Outgoing weights of every non-leaf node sum to 1, but
/// individual branches may carry probability zero, which is how off-support
/// ("almost surely") behavior is modeled.
#[derive(Debug, Clone)]
pub struct MeasureFamily<R> {
    tree: Arc<OutcomeTree>,
    labels: Vec<String>,
    edge_probs: Vec<Vec<R>>,
}

/// Conditional expectation of level-(n+1) values, one entry per level-n node.
///
/// `renormalized` lists nodes whose outgoing mass was numerically zero; for
/// those the plain average of children values is returned, which is a valid
/// version of the conditional expectation off the support.
#[derive(Debug, Clone)]
pub struct CondExp<R> {
    pub values: Vec<R>,
    pub renormalized: Vec<NodeId>,
}

impl<R: Real> MeasureFamily<R> {
    pub fn new(
        tree: Arc<OutcomeTree>,
        labels: Vec<String>,
        edge_probs: Vec<Vec<R>>,
    ) -> Result<Self, TreeError> {
        if labels.len() != edge_probs.len() {
            return Err(TreeError::LabelCount {
                got: labels.len(),
                expected: edge_probs.len(),
            });
        }
        for (k, probs) in edge_probs.iter().enumerate() {
            if probs.len() != tree.node_count() {
                return Err(TreeError::ProbCount {
                    measure: k,
                    got: probs.len(),
                    expected: tree.node_count(),
                });
            }
            for node in 0..tree.node_count() {
                if tree.is_leaf(node) {
                    continue;
                }
                let mut sum = R::zero();
                for &c in tree.children(node) {
                    let p = probs[c];
                    if p < R::zero() {
                        return Err(TreeError::NegativeProb {
                            node: c,
                            prob: p.to_f64().unwrap_or(f64::NAN),
                        });
                    }
                    sum += p;
                }
                if (sum - R::one()).abs() > R::exact_tol() {
                    return Err(TreeError::BranchSum {
                        node,
                        sum: sum.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        Ok(MeasureFamily {
            tree,
            labels,
            edge_probs,
        })
    }

    /// Single measure assigning equal weight to every sibling group.
    pub fn fair(tree: Arc<OutcomeTree>, label: &str) -> Self {
        let mut probs = vec![R::one(); tree.node_count()];
        for node in 0..tree.node_count() {
            let kids = tree.children(node);
            if !kids.is_empty() {
                let w = R::one() / R::from_usize(kids.len()).unwrap();
                for &c in kids {
                    probs[c] = w;
                }
            }
        }
        MeasureFamily::new(tree, vec![label.to_string()], vec![probs])
            .expect("fair branching is a valid measure")
    }

    /// Single measure from per-node child probability lists, level order.
    pub fn from_branch_probs(
        tree: Arc<OutcomeTree>,
        label: &str,
        branch_probs: &[Vec<R>],
    ) -> Result<Self, TreeError> {
        let mut probs = vec![R::one(); tree.node_count()];
        let mut idx = 0usize;
        for node in 0..tree.node_count() {
            let kids = tree.children(node);
            if kids.is_empty() {
                continue;
            }
            let group = &branch_probs[idx];
            idx += 1;
            for (j, &c) in kids.iter().enumerate() {
                probs[c] = group[j];
            }
        }
        MeasureFamily::new(tree, vec![label.to_string()], vec![probs])
    }

    /// Merges several single-measure families sharing one topology.
    pub fn merge(families: Vec<MeasureFamily<R>>) -> Result<Self, TreeError> {
        let tree = families[0].tree.clone();
        let mut labels = Vec::new();
        let mut probs = Vec::new();
        for f in families {
            if !Arc::ptr_eq(&f.tree, &tree) {
                return Err(TreeError::TreeMismatch);
            }
            labels.extend(f.labels);
            probs.extend(f.edge_probs);
        }
        MeasureFamily::new(tree, labels, probs)
    }

    pub fn tree(&self) -> &Arc<OutcomeTree> {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn edge_prob(&self, k: usize, child: NodeId) -> R {
        self.edge_probs[k][child]
    }

    pub fn edge_probs(&self, k: usize) -> &[R] {
        &self.edge_probs[k]
    }

    /// Probability of the root-to-node path, for every node.
    pub fn path_probs(&self, k: usize) -> Vec<R> {
        let mut out = vec![R::one(); self.tree.node_count()];
        for node in 1..self.tree.node_count() {
            out[node] = out[self.tree.parent[node]] * self.edge_probs[k][node];
        }
        out
    }

    /// Exact expectation of `x` at level `n`: sum of path probability times value.
    pub fn expectation(&self, k: usize, x: &TreeProcess<R>, n: usize) -> Result<R, TreeError> {
        self.check_process(x)?;
        self.tree.check_level(n)?;
        let path = self.path_probs(k);
        // zero-probability terms are skipped so that an infinity sentinel off
        // the support does not poison the sum with NaN
        Ok(self
            .tree
            .level(n)
            .filter(|&v| path[v] > R::zero())
            .map(|v| path[v] * x.value(v))
            .sum())
    }

    /// Conditional expectation of the level-`n+1` values of `x` given level `n`.
    pub fn conditional_expectation(
        &self,
        k: usize,
        x: &TreeProcess<R>,
        n: usize,
    ) -> Result<CondExp<R>, TreeError> {
        self.check_process(x)?;
        self.tree.check_level(n + 1)?;
        let mut values = Vec::with_capacity(self.tree.level_len(n));
        let mut renormalized = Vec::new();
        for v in self.tree.level(n) {
            let kids = self.tree.children(v);
            let mass: R = kids.iter().map(|&c| self.edge_probs[k][c]).sum();
            if mass <= R::exact_tol() {
                // off the support: any version works, take the plain average
                let avg = kids.iter().map(|&c| x.value(c)).sum::<R>()
                    / R::from_usize(kids.len()).unwrap();
                values.push(avg);
                renormalized.push(v);
            } else {
                values.push(
                    kids.iter()
                        .filter(|&&c| self.edge_probs[k][c] > R::zero())
                        .map(|&c| self.edge_probs[k][c] * x.value(c))
                        .sum(),
                );
            }
        }
        Ok(CondExp {
            values,
            renormalized,
        })
    }

    /// Exact expectation of the stopped process: sum over stop nodes of path
    /// probability times value.
    pub fn stopped_expectation(
        &self,
        k: usize,
        x: &TreeProcess<R>,
        tau: &StoppingTime,
    ) -> Result<R, TreeError> {
        self.check_process(x)?;
        self.tree.check_level(tau.horizon)?;
        let path = self.path_probs(k);
        Ok(tau
            .stop_nodes
            .iter()
            .filter(|&&v| path[v] > R::zero())
            .map(|&v| path[v] * x.value(v))
            .sum())
    }

    fn check_process(&self, x: &TreeProcess<R>) -> Result<(), TreeError> {
        if !Arc::ptr_eq(&self.tree, &x.tree) {
            return Err(TreeError::TreeMismatch);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// TreeProcess
// ---------------------------------------------------------------------------

/// An adapted process: one value per node. Adaptedness is structural, the
/// value at a node depends only on the path leading to it.
#[derive(Debug, Clone)]
pub struct TreeProcess<R> {
    tree: Arc<OutcomeTree>,
    values: Vec<R>,
    nonnegative: bool,
}

impl<R: Real> TreeProcess<R> {
    pub fn new(
        tree: Arc<OutcomeTree>,
        values: Vec<R>,
        nonnegative: bool,
    ) -> Result<Self, TreeError> {
        if values.len() != tree.node_count() {
            return Err(TreeError::ValueCount {
                got: values.len(),
                expected: tree.node_count(),
            });
        }
        if nonnegative {
            for (node, &v) in values.iter().enumerate() {
                if v < R::zero() {
                    return Err(TreeError::NegativeValue {
                        node,
                        value: v.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        Ok(TreeProcess {
            tree,
            values,
            nonnegative,
        })
    }

    pub fn constant(tree: Arc<OutcomeTree>, c: R) -> Self {
        let n = tree.node_count();
        TreeProcess {
            tree,
            values: vec![c; n],
            nonnegative: c >= R::zero(),
        }
    }

    /// Per-level value lists, level order within each level.
    pub fn from_levels(
        tree: Arc<OutcomeTree>,
        levels: &[Vec<R>],
        nonnegative: bool,
    ) -> Result<Self, TreeError> {
        let values: Vec<R> = levels.iter().flatten().copied().collect();
        Self::new(tree, values, nonnegative)
    }

    pub fn tree(&self) -> &Arc<OutcomeTree> {
        &self.tree
    }

    pub fn value(&self, node: NodeId) -> R {
        self.values[node]
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn level_values(&self, l: usize) -> &[R] {
        &self.values[self.tree.level(l)]
    }

    pub fn nonnegative(&self) -> bool {
        self.nonnegative
    }

    /// True if any value is non-finite (the infinity sentinel).
    pub fn has_infinite(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }

    /// Value-wise map preserving the topology.
    pub fn map<F: Fn(R) -> R>(&self, f: F, nonnegative: bool) -> Self {
        TreeProcess {
            tree: self.tree.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            nonnegative,
        }
    }
}

// ---------------------------------------------------------------------------
// StoppingTime
// ---------------------------------------------------------------------------

/// A stopping time as an exhaustive prefix-free set of stop nodes.
///
/// Prefix-free: no stop node is an ancestor of another. Exhaustive: every
/// root-to-level-`horizon` path contains exactly one stop node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoppingTime {
    stop_nodes: Vec<NodeId>,
    horizon: usize,
}

impl StoppingTime {
    pub fn new(
        tree: &OutcomeTree,
        mut stop_nodes: Vec<NodeId>,
        horizon: usize,
    ) -> Result<Self, TreeError> {
        tree.check_level(horizon)?;
        stop_nodes.sort_unstable();
        stop_nodes.dedup();
        for &v in &stop_nodes {
            let level = tree.level_of(v);
            if level > horizon {
                return Err(TreeError::StopBeyondHorizon {
                    node: v,
                    level,
                    horizon,
                });
            }
        }
        // One root-to-horizon walk checks both invariants: a path must meet
        // exactly one stop node.
        let stop_set: std::collections::HashSet<NodeId> = stop_nodes.iter().copied().collect();
        let mut stack = vec![(0usize, None::<NodeId>)];
        while let Some((v, seen)) = stack.pop() {
            let here = stop_set.contains(&v);
            if here {
                if let Some(anc) = seen {
                    return Err(TreeError::NotPrefixFree {
                        ancestor: anc,
                        descendant: v,
                    });
                }
            }
            let seen = if here { Some(v) } else { seen };
            let level = tree.level_of(v);
            if level == horizon {
                if seen.is_none() {
                    return Err(TreeError::NotExhaustive { node: v, level });
                }
                continue;
            }
            for &c in tree.children(v) {
                stack.push((c, seen));
            }
        }
        Ok(StoppingTime {
            stop_nodes,
            horizon,
        })
    }

    /// The constant stopping time `tau = n`.
    pub fn constant(tree: &OutcomeTree, n: usize) -> Result<Self, TreeError> {
        tree.check_level(n)?;
        Ok(StoppingTime {
            stop_nodes: tree.level(n).collect(),
            horizon: n,
        })
    }

    pub fn stop_nodes(&self) -> &[NodeId] {
        &self.stop_nodes
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Count of stopping times with the given horizon, by the subtree recursion
/// `N(node at horizon) = 1`, `N(node) = 1 + prod over children of N(child)`.
pub fn count_stopping_times(tree: &OutcomeTree, horizon: usize) -> Result<u128, TreeError> {
    tree.check_level(horizon)?;
    fn count(tree: &OutcomeTree, node: NodeId, level: usize, horizon: usize) -> u128 {
        if level == horizon {
            return 1;
        }
        let prod: u128 = tree
            .children(node)
            .iter()
            .map(|&c| count(tree, c, level + 1, horizon))
            .product();
        1 + prod
    }
    Ok(count(tree, 0, 0, horizon))
}

/// Every stopping time with the given horizon, each exactly once.
pub fn enumerate_stopping_times(
    tree: &OutcomeTree,
    horizon: usize,
    cap: u128,
) -> Result<Vec<StoppingTime>, TreeError> {
    let total = count_stopping_times(tree, horizon)?;
    if total > cap {
        return Err(TreeError::EnumerationCap {
            count: total,
            horizon,
            cap,
        });
    }
    fn stop_sets(
        tree: &OutcomeTree,
        node: NodeId,
        level: usize,
        horizon: usize,
    ) -> Vec<Vec<NodeId>> {
        if level == horizon {
            return vec![vec![node]];
        }
        // either stop here, or combine one choice per child subtree
        let mut out = vec![vec![node]];
        let mut combos: Vec<Vec<NodeId>> = vec![Vec::new()];
        for &c in tree.children(node) {
            let child_sets = stop_sets(tree, c, level + 1, horizon);
            let mut next = Vec::with_capacity(combos.len() * child_sets.len());
            for base in &combos {
                for cs in &child_sets {
                    let mut merged = base.clone();
                    merged.extend_from_slice(cs);
                    next.push(merged);
                }
            }
            combos = next;
        }
        out.extend(combos);
        out
    }
    let sets = stop_sets(tree, 0, 0, horizon);
    Ok(sets
        .into_iter()
        .map(|stop_nodes| {
            let mut stop_nodes = stop_nodes;
            stop_nodes.sort_unstable();
            StoppingTime {
                stop_nodes,
                horizon,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Horizon and drift sequences
// ---------------------------------------------------------------------------

/// Extended integer: a finite monitoring horizon or the unbounded sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl Horizon {
    /// On a depth-`T` tree every stopping time is bounded by `T`, so the
    /// unbounded sentinel resolves to the depth.
    pub fn resolve(self, depth: usize) -> usize {
        match self {
            Horizon::Finite(r) => r.min(depth),
            Horizon::Infinite => depth,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Horizon::Finite(_))
    }
}

/// Monitoring horizons `r_m`, positionally aligned with process rows.
#[derive(Debug, Clone)]
pub struct HorizonSequence {
    pub entries: Vec<Horizon>,
}

/// Conditional-excess bounds `d_m >= 0`, with the approximation index each
/// entry refers to (rows need not start at m = 0).
#[derive(Debug, Clone)]
pub struct DriftSequence<R> {
    pub ms: Vec<u64>,
    pub entries: Vec<R>,
}

impl<R: Real> DriftSequence<R> {
    pub fn new(ms: Vec<u64>, entries: Vec<R>) -> Self {
        assert_eq!(ms.len(), entries.len());
        assert!(entries.iter().all(|&d| d >= R::zero()), "drift must be nonnegative");
        DriftSequence { ms, entries }
    }
}

/// One row of a bi-indexed process: its approximation index, the measures it
/// is certified against, and the adapted values. Rows may live on trees of
/// different depths.
#[derive(Debug, Clone)]
pub struct ProcessRow<R> {
    pub m: u64,
    pub family: MeasureFamily<R>,
    pub process: TreeProcess<R>,
}

/// Rows stacked over the approximation index, with optional drift and
/// horizon metadata.
#[derive(Debug, Clone)]
pub struct BiProcess<R> {
    pub rows: Vec<ProcessRow<R>>,
    pub drift: Option<DriftSequence<R>>,
    pub horizon: Option<HorizonSequence>,
}

impl<R: Real> BiProcess<R> {
    pub fn new(rows: Vec<ProcessRow<R>>) -> Self {
        BiProcess {
            rows,
            drift: None,
            horizon: None,
        }
    }

    pub fn with_horizon(mut self, horizon: HorizonSequence) -> Self {
        assert_eq!(horizon.entries.len(), self.rows.len());
        self.horizon = Some(horizon);
        self
    }

    pub fn with_drift(mut self, drift: DriftSequence<R>) -> Self {
        assert_eq!(drift.entries.len(), self.rows.len());
        self.drift = Some(drift);
        self
    }

    /// Resolved horizon of row `i`: the stated entry clipped to the row's
    /// tree depth, or the depth itself when no horizon is attached.
    pub fn row_horizon(&self, i: usize) -> usize {
        let depth = self.rows[i].process.tree().depth();
        match &self.horizon {
            Some(h) => h.entries[i].resolve(depth),
            None => depth,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fair_coin_depth1() -> (Arc<OutcomeTree>, MeasureFamily<f64>) {
        let tree = OutcomeTree::binary(1);
        let fam = MeasureFamily::<f64>::fair(tree.clone(), "fair");
        (tree, fam)
    }

    #[test]
    fn binary_depth2_counts() {
        let tree = OutcomeTree::binary(2);
        assert_eq!(tree.node_count(), 1 + 2 + 4);
        assert_eq!(tree.level(0).len(), 1);
        assert_eq!(tree.level(1).len(), 2);
        assert_eq!(tree.level(2).len(), 4);
        assert_eq!(tree.level_of(0), 0);
        assert_eq!(tree.level_of(2), 1);
        assert_eq!(tree.level_of(6), 2);
        assert_eq!(tree.parent(5), Some(2));
    }

    #[test]
    fn chain_depth3_is_one_path() {
        let tree = OutcomeTree::chain(3);
        assert_eq!(tree.node_count(), 4);
        for l in 0..=3 {
            assert_eq!(tree.level(l).len(), 1);
        }
    }

    #[test]
    fn zero_child_count_rejected() {
        let err = OutcomeTree::build(&[vec![2], vec![1, 0]]).unwrap_err();
        assert!(matches!(err, TreeError::ZeroChildCount { level: 1 }));
    }

    #[test]
    fn constant_process_expectation_is_one() {
        let (tree, fam) = fair_coin_depth1();
        let x = TreeProcess::constant(tree, 1.0);
        for n in 0..=1 {
            assert!((fam.expectation(0, &x, n).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fair_coin_expectation() {
        let (tree, fam) = fair_coin_depth1();
        let x = TreeProcess::from_levels(tree, &[vec![1.0], vec![1.3, 0.8]], true).unwrap();
        // oracle: (1.3 + 0.8) / 2
        assert!((fam.expectation(0, &x, 1).unwrap() - 1.05).abs() < 1e-15);
    }

    #[test]
    fn biased_coin_expectation() {
        let tree = OutcomeTree::binary(1);
        let fam =
            MeasureFamily::<f64>::from_branch_probs(tree.clone(), "biased", &[vec![0.9, 0.1]])
                .unwrap();
        let x = TreeProcess::from_levels(tree, &[vec![1.0], vec![1.3, 0.8]], true).unwrap();
        // oracle: 0.9 * 1.3 + 0.1 * 0.8
        assert!((fam.expectation(0, &x, 1).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn conditional_expectation_fair_coin() {
        let (tree, fam) = fair_coin_depth1();
        let x = TreeProcess::from_levels(tree, &[vec![0.0], vec![1.3, 0.8]], true).unwrap();
        let ce = fam.conditional_expectation(0, &x, 0).unwrap();
        assert_eq!(ce.values.len(), 1);
        assert!((ce.values[0] - 1.05).abs() < 1e-15);
        assert!(ce.renormalized.is_empty());
    }

    #[test]
    fn conditional_expectation_constant_children() {
        let tree = OutcomeTree::uniform(&[3]).unwrap();
        let fam = MeasureFamily::<f64>::fair(tree.clone(), "fair");
        let x = TreeProcess::from_levels(tree, &[vec![0.0], vec![2.5, 2.5, 2.5]], true).unwrap();
        let ce = fam.conditional_expectation(0, &x, 0).unwrap();
        assert!((ce.values[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn zero_mass_node_renormalizes() {
        // inner node reachable only with probability zero
        let tree = OutcomeTree::binary(2);
        let fam = MeasureFamily::<f64>::from_branch_probs(
            tree.clone(),
            "degenerate",
            &[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        let x =
            TreeProcess::from_levels(tree, &[vec![0.0], vec![0.0, 0.0], vec![1.0, 3.0, 5.0, 9.0]], true)
                .unwrap();
        let ce = fam.conditional_expectation(0, &x, 1).unwrap();
        assert!(ce.renormalized.is_empty());
        // off-support node still gets the weighted value of its children
        assert!((ce.values[1] - 7.0).abs() < 1e-15);
    }

    #[test]
    fn tower_property_holds() {
        let tree = OutcomeTree::build(&[vec![2], vec![3, 2]]).unwrap();
        let fam = MeasureFamily::from_branch_probs(
            tree.clone(),
            "skew",
            &[vec![0.3, 0.7], vec![0.2, 0.5, 0.3], vec![0.9, 0.1]],
        )
        .unwrap();
        let vals: Vec<f64> = (0..tree.node_count()).map(|i| (i as f64) * 0.37 + 0.1).collect();
        let x = TreeProcess::new(tree.clone(), vals, true).unwrap();
        for n in 0..tree.depth() {
            let ce = fam.conditional_expectation(0, &x, n).unwrap();
            let mut lifted = x.values().to_vec();
            for (i, v) in tree.level(n).enumerate() {
                lifted[v] = ce.values[i];
            }
            let lifted = TreeProcess::new(tree.clone(), lifted, false).unwrap();
            let lhs = fam.expectation(0, &lifted, n).unwrap();
            let rhs = fam.expectation(0, &x, n + 1).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn stopping_time_counts_small() {
        let tree = OutcomeTree::binary(3);
        assert_eq!(count_stopping_times(&tree, 0).unwrap(), 1);
        assert_eq!(count_stopping_times(&tree, 1).unwrap(), 2);
        // oracle recursion: 1 + 2 * 2 at depth 2, 1 + 5 * 5 at depth 3
        assert_eq!(count_stopping_times(&tree, 2).unwrap(), 5);
        assert_eq!(count_stopping_times(&tree, 3).unwrap(), 26);
        assert_eq!(enumerate_stopping_times(&tree, 2, DEFAULT_ENUM_CAP).unwrap().len(), 5);
        assert_eq!(enumerate_stopping_times(&tree, 3, DEFAULT_ENUM_CAP).unwrap().len(), 26);
    }

    #[test]
    fn horizon_zero_is_forced() {
        let tree = OutcomeTree::binary(2);
        let taus = enumerate_stopping_times(&tree, 0, DEFAULT_ENUM_CAP).unwrap();
        assert_eq!(taus.len(), 1);
        assert_eq!(taus[0].stop_nodes(), &[0]);
    }

    #[test]
    fn enumeration_is_exhaustive_and_unique() {
        let tree = OutcomeTree::build(&[vec![3], vec![2, 1, 2]]).unwrap();
        let taus = enumerate_stopping_times(&tree, 2, DEFAULT_ENUM_CAP).unwrap();
        assert_eq!(taus.len() as u128, count_stopping_times(&tree, 2).unwrap());
        let mut seen = std::collections::HashSet::new();
        for tau in &taus {
            assert!(seen.insert(tau.stop_nodes().to_vec()), "duplicate stopping time");
            // each must re-validate
            StoppingTime::new(&tree, tau.stop_nodes().to_vec(), 2).unwrap();
        }
    }

    #[test]
    fn stop_mass_sums_to_one() {
        let tree = OutcomeTree::build(&[vec![2], vec![2, 3]]).unwrap();
        let fam = MeasureFamily::from_branch_probs(
            tree.clone(),
            "skew",
            &[vec![0.25, 0.75], vec![0.6, 0.4], vec![0.1, 0.2, 0.7]],
        )
        .unwrap();
        let path = fam.path_probs(0);
        for tau in enumerate_stopping_times(&tree, 2, DEFAULT_ENUM_CAP).unwrap() {
            let mass: f64 = tau.stop_nodes().iter().map(|&v| path[v]).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_stop_sets_rejected() {
        let tree = OutcomeTree::binary(2);
        // node 1 is an ancestor of nodes 3, 4
        assert!(matches!(
            StoppingTime::new(&tree, vec![1, 3, 2], 2),
            Err(TreeError::NotPrefixFree { .. })
        ));
        // missing the right subtree
        assert!(matches!(
            StoppingTime::new(&tree, vec![1], 2),
            Err(TreeError::NotExhaustive { .. })
        ));
        // beyond horizon
        assert!(matches!(
            StoppingTime::new(&tree, vec![3, 4, 2], 1),
            Err(TreeError::StopBeyondHorizon { .. })
        ));
    }

    #[test]
    fn stopped_expectation_examples() {
        let tree = OutcomeTree::binary(2);
        let fam = MeasureFamily::<f64>::fair(tree.clone(), "fair");
        // cumulative product of factors (2, 0.5) at step 1 and again at step 2
        let x = TreeProcess::from_levels(
            tree.clone(),
            &[vec![1.0], vec![2.0, 0.5], vec![4.0, 1.0, 1.0, 0.25]],
            true,
        )
        .unwrap();
        // tau = 0 gives the root value
        let t0 = StoppingTime::constant(&tree, 0).unwrap();
        assert!((fam.stopped_expectation(0, &x, &t0).unwrap() - 1.0).abs() < 1e-15);
        // stop at 1 on the up branch, at 2 below the down branch
        let tau = StoppingTime::new(&tree, vec![1, 5, 6], 2).unwrap();
        // oracle path sum: 1/2 * 2 + 1/4 * 1 + 1/4 * 0.25
        let expect = 0.5 * 2.0 + 0.25 * 1.0 + 0.25 * 0.25;
        assert!((fam.stopped_expectation(0, &x, &tau).unwrap() - expect).abs() < 1e-15);
        // constant process is invariant under stopping
        let c = TreeProcess::constant(tree.clone(), 3.25);
        for tau in enumerate_stopping_times(&tree, 2, DEFAULT_ENUM_CAP).unwrap() {
            assert!((fam.stopped_expectation(0, &c, &tau).unwrap() - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_stopping_matches_level_expectation() {
        let tree = OutcomeTree::build(&[vec![2], vec![2, 2]]).unwrap();
        let fam = MeasureFamily::from_branch_probs(
            tree.clone(),
            "skew",
            &[vec![0.4, 0.6], vec![0.5, 0.5], vec![0.25, 0.75]],
        )
        .unwrap();
        let vals: Vec<f64> = (0..tree.node_count()).map(|i| 1.0 + (i as f64).sin()).collect();
        let x = TreeProcess::new(tree.clone(), vals, true).unwrap();
        for n in 0..=2 {
            let tau = StoppingTime::constant(&tree, n).unwrap();
            let a = fam.stopped_expectation(0, &x, &tau).unwrap();
            let b = fam.expectation(0, &x, n).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_measure_rejected() {
        let tree = OutcomeTree::binary(1);
        assert!(matches!(
            MeasureFamily::from_branch_probs(tree.clone(), "bad", &[vec![0.6, 0.6]]),
            Err(TreeError::BranchSum { .. })
        ));
        assert!(matches!(
            MeasureFamily::from_branch_probs(tree, "bad", &[vec![1.2, -0.2]]),
            Err(TreeError::NegativeProb { .. })
        ));
    }

    #[test]
    fn nonnegative_flag_enforced() {
        let tree = OutcomeTree::binary(1);
        assert!(matches!(
            TreeProcess::new(tree, vec![1.0, -0.5, 1.0], true),
            Err(TreeError::NegativeValue { .. })
        ));
    }
}
