//! Entropy-guided adaptive inference over an expert forest.
//!
//! Each tree is searched from its root, always stepping to the child whose
//! prediction has lower entropy, and stopping at a leaf or as soon as the
//! current node is confident enough (`H < tau_e`). The global root and every
//! node on the selected paths are then fused with weights
//! `softmax(-H / tau)`.

use std::collections::BTreeMap;

use crate::error::{Result, SaefError};
use crate::forest::{ExpertNode, ForestHierarchy, NodeId};
use crate::numeric::{argmax, shannon_entropy, softmax, PredictiveDistribution};

/// Produces class logits of one expert for one input.
///
/// Implementations must be deterministic: the same node and sample always give
/// the same logits.
pub trait ExpertEvaluator: Sync {
    type Sample: ?Sized + Sync;

    fn logits(&self, node: &ExpertNode, sample: &Self::Sample) -> Result<Vec<f64>>;
}

/// Per-sample memo of expert predictions; each node is evaluated at most once.
pub struct ExpertCache<'a, E: ExpertEvaluator> {
    hierarchy: &'a ForestHierarchy,
    evaluator: &'a E,
    sample: &'a E::Sample,
    cache: BTreeMap<NodeId, PredictiveDistribution>,
}

impl<'a, E: ExpertEvaluator> ExpertCache<'a, E> {
    pub fn new(hierarchy: &'a ForestHierarchy, evaluator: &'a E, sample: &'a E::Sample) -> Self {
        Self { hierarchy, evaluator, sample, cache: BTreeMap::new() }
    }

    pub fn distribution(&mut self, id: NodeId) -> Result<&PredictiveDistribution> {
        if !self.cache.contains_key(&id) {
            let node = self.hierarchy.node(id)?;
            let dist = softmax(&self.evaluator.logits(node, self.sample)?)?;
            self.cache.insert(id, dist);
        }
        Ok(&self.cache[&id])
    }

    pub fn entropy(&mut self, id: NodeId) -> Result<f64> {
        Ok(self.distribution(id)?.entropy)
    }

    /// Number of distinct experts evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }
}

/// Descends one tree from `root`. The returned path starts at `root`.
pub fn find_path<E: ExpertEvaluator>(cache: &mut ExpertCache<'_, E>, root: NodeId, tau_e: f64) -> Result<Vec<NodeId>> {
    let mut path = vec![root];
    let mut current = root;
    loop {
        let h = cache.entropy(current)?;
        let Some([left, right]) = cache.hierarchy.node(current)?.children else {
            return Ok(path);
        };
        if h < tau_e {
            return Ok(path);
        }
        let (hl, hr) = (cache.entropy(left)?, cache.entropy(right)?);
        current = if hr < hl { right } else { left };
        path.push(current);
    }
}

/// `w_n = exp(-H_n / tau) / Σ_j exp(-H_j / tau)`, computed with a max shift.
pub fn fusion_weights(entropies: &[f64], tau: f64) -> Result<Vec<f64>> {
    if entropies.is_empty() {
        return Err(SaefError::Empty("activated set"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SaefError::Config(format!("fusion temperature must be positive, got {tau}")));
    }
    let h_min = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = entropies.iter().map(|h| (-(h - h_min) / tau).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Everything one adaptive (or flat) prediction touched.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    /// Activated experts: the global root first, then path nodes in tree order.
    pub activated: Vec<NodeId>,
    /// Selected path per tree, root first.
    pub paths: Vec<Vec<NodeId>>,
    /// Entropy of each activated expert, aligned with `activated`.
    pub entropies: Vec<f64>,
    /// Fusion weight of each activated expert, aligned with `activated`.
    pub weights: Vec<f64>,
    pub fused: PredictiveDistribution,
    pub prediction: usize,
    /// Distinct expert forward passes, including non-chosen siblings.
    pub evaluations: usize,
}

impl InferenceTrace {
    pub fn path_len_per_tree(&self) -> Vec<usize> {
        self.paths.iter().map(Vec::len).collect()
    }
}

/// Adaptive inference for one sample.
pub fn adaptive_infer<E: ExpertEvaluator>(
    hierarchy: &ForestHierarchy,
    sample: &E::Sample,
    evaluator: &E,
    tau: f64,
    tau_e: f64,
) -> Result<InferenceTrace> {
    if hierarchy.nodes.is_empty() || hierarchy.roots.is_empty() {
        return Err(SaefError::Empty("hierarchy"));
    }
    if !(tau_e >= 0.0) {
        return Err(SaefError::Config(format!("entropy threshold must be >= 0, got {tau_e}")));
    }
    let mut cache = ExpertCache::new(hierarchy, evaluator, sample);
    let mut paths = Vec::with_capacity(hierarchy.roots.len());
    for &root in &hierarchy.roots {
        paths.push(find_path(&mut cache, root, tau_e)?);
    }
    let mut activated = vec![hierarchy.global_root];
    for id in paths.iter().flatten() {
        if !activated.contains(id) {
            activated.push(*id);
        }
    }
    let entropies: Vec<f64> = activated.iter().map(|&id| cache.entropy(id)).collect::<Result<_>>()?;
    let weights = fusion_weights(&entropies, tau)?;
    let n_classes = cache.distribution(activated[0])?.len();
    let mut fused = vec![0.0; n_classes];
    for (&id, &w) in activated.iter().zip(&weights) {
        let z = cache.distribution(id)?;
        if z.len() != n_classes {
            return Err(SaefError::LengthMismatch { expected: n_classes, actual: z.len() });
        }
        for (f, p) in fused.iter_mut().zip(&z.probs) {
            *f += w * p;
        }
    }
    let entropy = shannon_entropy(&fused)?;
    let fused = PredictiveDistribution { probs: fused, entropy };
    Ok(InferenceTrace {
        prediction: fused.argmax(),
        activated,
        paths,
        entropies,
        weights,
        fused,
        evaluations: cache.evaluations(),
    })
}

/// Full-ensemble baseline: every expert is queried and the class holding the
/// single largest logit wins.
///
/// The trace reports the winning expert with weight 1 and its softmax as the
/// fused distribution.
pub fn flat_ensemble_infer<E: ExpertEvaluator>(experts: &[&ExpertNode], sample: &E::Sample, evaluator: &E) -> Result<InferenceTrace> {
    if experts.is_empty() {
        return Err(SaefError::Empty("expert list"));
    }
    let mut best: Option<(f64, usize, usize, Vec<f64>)> = None;
    let mut entropies = Vec::with_capacity(experts.len());
    for (e, node) in experts.iter().enumerate() {
        let logits = evaluator.logits(node, sample)?;
        let dist = softmax(&logits)?;
        entropies.push(dist.entropy);
        let c = argmax(&logits);
        if best.as_ref().is_none_or(|b| logits[c] > b.0) {
            best = Some((logits[c], e, c, logits));
        }
    }
    let (_, winner, class, logits) = best.expect("non-empty expert list");
    let mut weights = vec![0.0; experts.len()];
    weights[winner] = 1.0;
    Ok(InferenceTrace {
        activated: experts.iter().map(|n| n.id).collect(),
        paths: Vec::new(),
        entropies,
        weights,
        fused: softmax(&logits)?,
        prediction: class,
        evaluations: experts.len(),
    })
}

/// Query-cost summary over a batch of traces from one hierarchy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub n_leaves: usize,
    pub n_trees: usize,
    /// Mean path length over samples and trees, counting the tree root.
    pub mean_depth: f64,
    pub mean_evaluations: f64,
    /// `N / (1 + K · d̄)`.
    pub theoretical_speedup: f64,
}

/// `N / (1 + K · d̄)`: flat-ensemble queries over hierarchical queries.
pub fn theoretical_speedup(n_leaves: usize, n_trees: usize, mean_depth: f64) -> f64 {
    n_leaves as f64 / (1.0 + n_trees as f64 * mean_depth)
}

pub fn cost_report(traces: &[InferenceTrace], n_leaves: usize, n_trees: usize) -> Result<CostReport> {
    if traces.is_empty() {
        return Err(SaefError::Empty("trace list"));
    }
    let (mut depth_sum, mut depth_count) = (0usize, 0usize);
    for t in traces {
        depth_sum += t.paths.iter().map(Vec::len).sum::<usize>();
        depth_count += t.paths.len();
    }
    let mean_depth = if depth_count == 0 { 0.0 } else { depth_sum as f64 / depth_count as f64 };
    let mean_evaluations = traces.iter().map(|t| t.evaluations as f64).sum::<f64>() / traces.len() as f64;
    Ok(CostReport {
        n_leaves,
        n_trees,
        mean_depth,
        mean_evaluations,
        theoretical_speedup: theoretical_speedup(n_leaves, n_trees, mean_depth),
    })
}

impl CostReport {
    /// Cost of the flat baseline: all `N` experts per sample, speedup 1, no
    /// depth (reported as NaN).
    pub fn flat(n_leaves: usize, mean_evaluations: f64) -> Self {
        Self { n_leaves, n_trees: n_leaves, mean_depth: f64::NAN, mean_evaluations, theoretical_speedup: 1.0 }
    }
}
