//! Expert forest construction: one sign-max merge tree per conceptual cluster,
//! joined by a global root expert.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::{default_k_range, find_optimal_k, kmeans, ClusterAssignment, DEFAULT_MAX_ITERS};
use crate::error::{Result, SaefError};
use crate::numeric::{cosine_similarity, ParamVector, SemanticPrototype, VisualPrototype};

pub type NodeId = usize;

/// One learned task: its flattened adapter and its two prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub params: ParamVector,
    pub semantic: SemanticPrototype,
    pub visual: VisualPrototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertNode {
    pub id: NodeId,
    pub params: ParamVector,
    /// Absent only on a dedicated global root.
    pub prototype: Option<VisualPrototype>,
    pub children: Option<[NodeId; 2]>,
    /// 0 for leaves.
    pub height: usize,
    /// Original task ids covered by this node, ascending.
    pub source_tasks: Vec<usize>,
}

impl ExpertNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    /// Merge only among nodes at the current lowest level; a lone node at that
    /// level is promoted unmerged.
    #[default]
    Balanced,
    /// Always merge the globally most similar pair.
    UnlimitedDepth,
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeStrategy::Balanced => "balanced",
            MergeStrategy::UnlimitedDepth => "unlimited",
        })
    }
}

impl FromStr for MergeStrategy {
    type Err = SaefError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "unlimited" | "unlimited_depth" => Ok(Self::UnlimitedDepth),
            other => Err(SaefError::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// How the number of trees is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    /// Silhouette search over `[2, min(T - 1, 10)]`.
    #[default]
    Auto,
    Fixed(usize),
    /// One tree per task.
    Flat,
}

impl fmt::Display for KPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KPolicy::Auto => f.write_str("auto"),
            KPolicy::Flat => f.write_str("flat"),
            KPolicy::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for KPolicy {
    type Err = SaefError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "auto" => Ok(Self::Auto),
            "flat" => Ok(Self::Flat),
            _ => {
                let n = s.strip_prefix("fixed:").unwrap_or(s);
                match n.parse::<usize>() {
                    Ok(k) if k >= 1 => Ok(Self::Fixed(k)),
                    _ => Err(SaefError::Config(format!("invalid k policy '{s}'"))),
                }
            }
        }
    }
}

fn check_same_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(SaefError::LengthMismatch { expected, actual })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sign(a + b) ⊙ max(|a|, |b|)`, with `sign(0) = 0`.
pub fn sign_max_merge(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    check_same_len(a.len(), b.len())?;
    let merged = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| sign(x + y) * x.abs().max(y.abs()))
        .collect();
    ParamVector::new(merged)
}

/// `sign(Σ θ_k) ⊙ max_k |θ_k|` over all tree roots.
pub fn global_root_merge(roots: &[&ParamVector]) -> Result<ParamVector> {
    let first = roots.first().ok_or(SaefError::Empty("root list"))?;
    if roots.len() == 1 {
        return Ok((*first).clone());
    }
    let len = first.len();
    let mut sum = vec![0.0; len];
    let mut max_abs = vec![0.0f64; len];
    for root in roots {
        check_same_len(len, root.len())?;
        for (e, v) in root.as_slice().iter().enumerate() {
            sum[e] += v;
            max_abs[e] = max_abs[e].max(v.abs());
        }
    }
    ParamVector::new(sum.into_iter().zip(max_abs).map(|(s, m)| sign(s) * m).collect())
}

/// Leaf-count-weighted mean of two prototypes.
pub fn merge_prototypes(a: &VisualPrototype, b: &VisualPrototype) -> Result<VisualPrototype> {
    check_same_len(a.values().len(), b.values().len())?;
    let (na, nb) = (a.leaf_count() as f64, b.leaf_count() as f64);
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (na * x + nb * y) / (na + nb))
        .collect();
    VisualPrototype::new(values, a.leaf_count() + b.leaf_count())
}

fn leaf_node(id: NodeId, task: &TaskRecord) -> ExpertNode {
    ExpertNode {
        id,
        params: task.params.clone(),
        prototype: Some(task.visual.clone()),
        children: None,
        height: 0,
        source_tasks: vec![task.task_id],
    }
}

fn merge_nodes(arena: &mut Vec<ExpertNode>, i: NodeId, j: NodeId) -> Result<NodeId> {
    let (a, b) = (&arena[i], &arena[j]);
    let prototype = match (&a.prototype, &b.prototype) {
        (Some(pa), Some(pb)) => merge_prototypes(pa, pb)?,
        _ => return Err(SaefError::DegeneratePrototype),
    };
    let mut source_tasks = a.source_tasks.clone();
    source_tasks.extend_from_slice(&b.source_tasks);
    source_tasks.sort_unstable();
    let id = arena.len();
    let node = ExpertNode {
        id,
        params: sign_max_merge(&a.params, &b.params)?,
        prototype: Some(prototype),
        children: Some([i, j]),
        height: 1 + a.height.max(b.height),
        source_tasks,
    };
    arena.push(node);
    Ok(id)
}

fn most_similar_pair(arena: &[ExpertNode], candidates: &[NodeId]) -> Result<(NodeId, NodeId)> {
    let mut best: Option<(f64, NodeId, NodeId)> = None;
    for (x, &i) in candidates.iter().enumerate() {
        for &j in &candidates[x + 1..] {
            let (pi, pj) = match (&arena[i].prototype, &arena[j].prototype) {
                (Some(pi), Some(pj)) => (pi, pj),
                _ => return Err(SaefError::DegeneratePrototype),
            };
            let sim = cosine_similarity(pi.values(), pj.values())?;
            let (lo, hi) = (i.min(j), i.max(j));
            let better = match best {
                None => true,
                Some((s, bi, bj)) => sim > s || (sim == s && (lo, hi) < (bi, bj)),
            };
            if better {
                best = Some((sim, lo, hi));
            }
        }
    }
    best.map(|(_, i, j)| (i, j)).ok_or(SaefError::Empty("merge candidates"))
}

/// Grows one tree over existing leaf nodes of `arena`; returns the root id.
fn grow_tree(arena: &mut Vec<ExpertNode>, leaves: &[NodeId], strategy: MergeStrategy) -> Result<NodeId> {
    if leaves.is_empty() {
        return Err(SaefError::Empty("cluster"));
    }
    // (node, level): the level only advances on merge or promotion.
    let mut working: Vec<(NodeId, usize)> = leaves.iter().map(|&id| (id, 0)).collect();
    while working.len() > 1 {
        working.sort_unstable();
        let candidates: Vec<NodeId> = match strategy {
            MergeStrategy::UnlimitedDepth => working.iter().map(|w| w.0).collect(),
            MergeStrategy::Balanced => {
                let level = working.iter().map(|w| w.1).min().unwrap();
                let at_level: Vec<NodeId> = working.iter().filter(|w| w.1 == level).map(|w| w.0).collect();
                if at_level.len() == 1 {
                    let slot = working.iter_mut().find(|w| w.0 == at_level[0]).unwrap();
                    slot.1 += 1;
                    continue;
                }
                at_level
            }
        };
        let (i, j) = most_similar_pair(arena, &candidates)?;
        let level = working.iter().filter(|w| w.0 == i || w.0 == j).map(|w| w.1).max().unwrap();
        let parent = merge_nodes(arena, i, j)?;
        working.retain(|w| w.0 != i && w.0 != j);
        working.push((parent, level + 1));
    }
    Ok(working[0].0)
}

/// A standalone merge tree over one cluster. Node ids index `nodes`; leaves
/// come first, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTree {
    pub nodes: Vec<ExpertNode>,
    pub root: NodeId,
}

pub fn build_tree(tasks: &[TaskRecord], strategy: MergeStrategy) -> Result<ExpertTree> {
    if tasks.is_empty() {
        return Err(SaefError::Empty("cluster"));
    }
    validate_tasks(tasks)?;
    let mut nodes: Vec<ExpertNode> = tasks.iter().enumerate().map(|(i, t)| leaf_node(i, t)).collect();
    let leaves: Vec<NodeId> = (0..tasks.len()).collect();
    let root = grow_tree(&mut nodes, &leaves, strategy)?;
    Ok(ExpertTree { nodes, root })
}

fn validate_tasks(tasks: &[TaskRecord]) -> Result<()> {
    let first = &tasks[0];
    let mut seen = BTreeSet::new();
    for t in tasks {
        check_same_len(first.params.len(), t.params.len())?;
        check_same_len(first.visual.values().len(), t.visual.values().len())?;
        check_same_len(first.semantic.values().len(), t.semantic.values().len())?;
        if !seen.insert(t.task_id) {
            return Err(SaefError::Config(format!("duplicate task id {}", t.task_id)));
        }
    }
    Ok(())
}

/// The complete forest: `K` trees, the global root and the cluster assignment.
///
/// `nodes[i].id == i`. Leaves occupy ids `0..T` in task order, followed by the
/// internal nodes of each tree and finally the global root. With a single tree
/// the global root is that tree's root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestHierarchy {
    pub assignment: ClusterAssignment,
    pub roots: Vec<NodeId>,
    pub global_root: NodeId,
    pub nodes: Vec<ExpertNode>,
    pub strategy: MergeStrategy,
    pub k_policy: KPolicy,
    /// `(k, silhouette)` pairs examined when `k_policy` is `Auto`.
    #[serde(default)]
    pub silhouettes: Vec<(usize, f64)>,
}

impl ForestHierarchy {
    pub fn node(&self, id: NodeId) -> Result<&ExpertNode> {
        self.nodes.get(id).ok_or(SaefError::UnknownNode(id))
    }

    pub fn n_trees(&self) -> usize {
        self.roots.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf() && n.prototype.is_some()).count()
    }

    pub fn tree_heights(&self) -> Vec<usize> {
        self.roots.iter().map(|&r| self.nodes[r].height).collect()
    }

    /// Checks the structural invariants: full binary trees whose leaves are the
    /// cluster's tasks, consistent heights, leaf counts and task coverage.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SaefError::Bundle(msg));
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node at position {i} has id {}", n.id));
            }
            check_same_len(self.nodes[0].params.len(), n.params.len())?;
            if let Some([l, r]) = n.children {
                let (Some(cl), Some(cr)) = (self.nodes.get(l), self.nodes.get(r)) else {
                    return bad(format!("node {i} has dangling children"));
                };
                if l >= i || r >= i {
                    return bad(format!("node {i} has a child with a larger id"));
                }
                if n.height != 1 + cl.height.max(cr.height) {
                    return bad(format!("node {i} height mismatch"));
                }
                let mut union = cl.source_tasks.clone();
                union.extend_from_slice(&cr.source_tasks);
                union.sort_unstable();
                if union.windows(2).any(|w| w[0] == w[1]) || union != n.source_tasks {
                    return bad(format!("node {i} task coverage is not the disjoint union of its children"));
                }
            } else if n.height != 0 && n.id != self.global_root {
                return bad(format!("leaf {i} has nonzero height"));
            }
            if let Some(p) = &n.prototype {
                if p.leaf_count() != n.source_tasks.len() {
                    return bad(format!("node {i} leaf count mismatch"));
                }
            }
        }
        if self.roots.len() != self.assignment.k {
            return bad("root count does not match cluster count".into());
        }
        self.node(self.global_root)?;
        for (&root, cluster) in self.roots.iter().zip(&self.assignment.clusters) {
            let node = self.node(root)?;
            let tasks: Vec<usize> = cluster.iter().map(|&t| self.nodes[t].source_tasks[0]).collect();
            let mut tasks = tasks;
            tasks.sort_unstable();
            if node.source_tasks != tasks {
                return bad(format!("tree rooted at {root} does not cover its cluster"));
            }
        }
        Ok(())
    }
}

/// Clusters tasks on their semantic prototypes, builds one tree per cluster on
/// the visual prototypes and merges the tree roots into the global root.
pub fn build_hierarchy(
    tasks: &[TaskRecord],
    k_policy: KPolicy,
    strategy: MergeStrategy,
    seed: u64,
) -> Result<ForestHierarchy> {
    if tasks.is_empty() {
        return Err(SaefError::Empty("task list"));
    }
    validate_tasks(tasks)?;
    let n = tasks.len();
    let semantic: Vec<&[f64]> = tasks.iter().map(|t| t.semantic.values()).collect();
    let mut silhouettes = Vec::new();
    let assignment = match k_policy {
        KPolicy::Auto => {
            let sel = find_optimal_k(&semantic, default_k_range(n), seed)?;
            silhouettes = sel.scores;
            sel.assignment
        }
        KPolicy::Flat => ClusterAssignment::singletons(n)?,
        KPolicy::Fixed(k) => kmeans(&semantic, k, seed, DEFAULT_MAX_ITERS)?,
    };

    let mut nodes: Vec<ExpertNode> = tasks.iter().enumerate().map(|(i, t)| leaf_node(i, t)).collect();
    let mut roots = Vec::with_capacity(assignment.k);
    for cluster in &assignment.clusters {
        roots.push(grow_tree(&mut nodes, cluster, strategy)?);
    }
    let global_root = if roots.len() == 1 {
        roots[0]
    } else {
        let params = global_root_merge(&roots.iter().map(|&r| &nodes[r].params).collect::<Vec<_>>())?;
        let id = nodes.len();
        nodes.push(ExpertNode {
            id,
            params,
            prototype: None,
            children: None,
            height: 0,
            source_tasks: tasks.iter().map(|t| t.task_id).collect::<BTreeSet<_>>().into_iter().collect(),
        });
        id
    };
    log::debug!("built forest: k = {}, heights = {:?}", assignment.k, roots.iter().map(|&r| nodes[r].height).collect::<Vec<_>>());
    Ok(ForestHierarchy { assignment, roots, global_root, nodes, strategy, k_policy, silhouettes })
}
