//! Shared numeric primitives: parameter and prototype vectors, softmax,
//! Shannon entropy and cosine similarity.
//!
//! Probabilities and entropies are `f64`; entropy is measured in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaefError};

fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SaefError::NonFinite(what))
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Flat expert parameter vector: the unit of sign-max merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(SaefError::Empty("parameter vector"));
        }
        ensure_finite(&values, "parameter vector")?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Mean feature vector of a task (or of the leaf tasks under a merged node),
/// together with the number of leaf tasks it represents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrototype {
    values: Vec<f64>,
    leaf_count: usize,
}

impl VisualPrototype {
    pub fn new(values: Vec<f64>, leaf_count: usize) -> Result<Self> {
        if leaf_count == 0 {
            return Err(SaefError::Config("prototype leaf_count must be >= 1".into()));
        }
        if values.is_empty() {
            return Err(SaefError::Empty("visual prototype"));
        }
        ensure_finite(&values, "visual prototype")?;
        if l2_norm(&values) == 0.0 {
            return Err(SaefError::DegeneratePrototype);
        }
        Ok(Self { values, leaf_count })
    }

    /// Prototype of a single task.
    pub fn leaf(values: Vec<f64>) -> Result<Self> {
        Self::new(values, 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }
}

/// Task-level semantic embedding used for conceptual clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticPrototype(Vec<f64>);

impl SemanticPrototype {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(SaefError::Empty("semantic prototype"));
        }
        ensure_finite(&values, "semantic prototype")?;
        if l2_norm(&values) == 0.0 {
            return Err(SaefError::DegeneratePrototype);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax output over a class set together with its entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub probs: Vec<f64>,
    pub entropy: f64,
}

impl PredictiveDistribution {
    /// Index of the most probable class; the first index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// First index of the maximum entry. Panics on an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted) with the entropy filled in.
pub fn softmax(logits: &[f64]) -> Result<PredictiveDistribution> {
    if logits.is_empty() {
        return Err(SaefError::EmptyLogits);
    }
    ensure_finite(logits, "logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.into_iter().map(|e| e / total).collect();
    let entropy = shannon_entropy(&probs)?;
    Ok(PredictiveDistribution { probs, entropy })
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
///
/// The result is clamped to `[0, ln n]` so rounding never pushes it outside the
/// admissible range.
pub fn shannon_entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(SaefError::Empty("distribution"));
    }
    let mut h = 0.0;
    for (index, &p) in dist.iter().enumerate() {
        if !p.is_finite() {
            return Err(SaefError::NonFinite("distribution"));
        }
        if p < 0.0 {
            return Err(SaefError::NegativeProbability { index, value: p });
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.clamp(0.0, (dist.len() as f64).ln()))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SaefError::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(SaefError::DegeneratePrototype);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN4: f64 = 1.386_294_361_119_890_6;

    #[test]
    fn softmax_uniform() {
        let d = softmax(&[0.0; 4]).unwrap();
        for p in &d.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((d.entropy - LN4).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let d = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(d.probs[0], 1.0);
        assert_eq!(d.probs[1], 0.0);
        assert_eq!(d.entropy, 0.0);
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // 30-digit evaluation of exp(i) / sum exp(j).
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        let d = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (p, e) in d.probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let err = softmax(&[]).unwrap_err();
        assert_eq!(err.to_string(), "empty logit vector");
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = shannon_entropy(&[0.2; 5]).unwrap();
        assert!((h - 5f64.ln()).abs() < 1e-12);
        let h = shannon_entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((h - 1.039_720_770_839_918).abs() < 1e-12);
        assert!(matches!(
            shannon_entropy(&[1.2, -0.2]),
            Err(SaefError::NegativeProbability { index: 1, .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[2.0, 2.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((c - 10.0 / 14.0).abs() < 1e-15);
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap_err();
        assert_eq!(err.to_string(), "degenerate prototype");
    }

    #[test]
    fn constructors_validate() {
        assert!(ParamVector::new(vec![]).is_err());
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(VisualPrototype::new(vec![0.0, 0.0], 1).is_err());
        assert!(VisualPrototype::new(vec![1.0], 0).is_err());
        assert!(SemanticPrototype::new(vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(logits in prop::collection::vec(-50.0..50.0f64, 1..12), c in -100.0..100.0f64) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|s| s + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let total: f64 = a.probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(a.entropy >= 0.0 && a.entropy <= (logits.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn entropy_permutation_invariant(logits in prop::collection::vec(-20.0..20.0f64, 2..10), rot in 0usize..10) {
            let mut permuted = logits.clone();
            let k = rot % permuted.len();
            permuted.rotate_left(k);
            permuted.reverse();
            let a = softmax(&logits).unwrap().entropy;
            let b = softmax(&permuted).unwrap().entropy;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(0.1..10.0f64, 3),
            b in prop::collection::vec(-10.0..10.0f64, 3),
            s in 0.01..100.0f64,
        ) {
            prop_assume!(b.iter().any(|v| v.abs() > 1e-3));
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
