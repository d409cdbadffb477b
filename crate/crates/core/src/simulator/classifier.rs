//! Prototype (nearest-class-mean) classifier and exemplar-free alignment of
//! old classes through Gaussian pseudo-features.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{features_from_pre, mean_row, Adapter, Backbone};
use crate::error::{Result, SaefError};
use crate::rng;

/// Diagonal Gaussian of a class's pre-adapter activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl ClassStats {
    /// Mean and (population) variance of the rows of `h`.
    pub fn from_activations(class_id: usize, h: ArrayView2<'_, f64>) -> Result<Self> {
        let mean = mean_row(h)?;
        let var = h.var_axis(Axis(0), 0.0);
        Ok(Self { class_id, mean: mean.to_vec(), var: var.to_vec(), count: h.nrows() })
    }

    /// Draws `m` pseudo-activations from the stored Gaussian.
    pub fn sample(&self, m: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
        let d = self.mean.len();
        let std: Vec<f64> = self.var.iter().map(|v| v.max(0.0).sqrt()).collect();
        Array2::from_shape_fn((m, d), |(_, j)| {
            let z: f64 = StandardNormal.sample(rng);
            self.mean[j] + std[j] * z
        })
    }
}

/// Unit-norm class prototypes; logits are `w_c · φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeClassifier {
    /// Row `i` of `weights` belongs to `class_ids[i]`.
    pub class_ids: Vec<usize>,
    pub weights: Array2<f64>,
}

impl PrototypeClassifier {
    /// L2-normalizes each prototype row.
    pub fn from_prototypes(class_ids: Vec<usize>, prototypes: Array2<f64>) -> Result<Self> {
        if class_ids.len() != prototypes.nrows() {
            return Err(SaefError::LengthMismatch { expected: class_ids.len(), actual: prototypes.nrows() });
        }
        let mut weights = prototypes;
        for mut row in weights.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(SaefError::DegeneratePrototype);
            }
            row /= norm;
        }
        Ok(Self { class_ids, weights })
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn logits(&self, features: ArrayView1<'_, f64>) -> Vec<f64> {
        self.weights.dot(&features).to_vec()
    }

    /// Logits for a batch of feature rows (`n × C`).
    pub fn logits_batch(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        features.dot(&self.weights.t())
    }

    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }
}

/// Mean adapted feature of `m` pseudo-activations drawn from `stats`.
pub fn reestimate_prototype(
    stats: &ClassStats,
    backbone: &Backbone,
    adapter: &Adapter,
    m: usize,
    rng: &mut impl rand::Rng,
) -> Result<Array1<f64>> {
    if m == 0 {
        return Err(SaefError::Config("pseudo-sample count must be >= 1".into()));
    }
    let h = stats.sample(m, rng);
    mean_row(features_from_pre(backbone, adapter, h.view())?.view())
}

/// Real samples of a class introduced by the current task, as pre-adapter
/// activations.
pub struct NewClass<'a> {
    pub class_id: usize,
    pub activations: ArrayView2<'a, f64>,
}

/// Builds the aligned head over all seen classes in the space of `adapter`:
/// old classes from pseudo-features, new classes from their real samples.
/// Rows are sorted by class id.
pub fn align_classifier(
    old: &[ClassStats],
    new: &[NewClass<'_>],
    backbone: &Backbone,
    adapter: &Adapter,
    m: usize,
    seed: u64,
) -> Result<PrototypeClassifier> {
    if m == 0 {
        return Err(SaefError::Config("pseudo-sample count must be >= 1".into()));
    }
    if old.is_empty() && new.is_empty() {
        return Err(SaefError::Empty("class set"));
    }
    let mut rows: Vec<(usize, Array1<f64>)> = Vec::with_capacity(old.len() + new.len());
    for stats in old {
        let mut rng = rng::stream(seed, "align", stats.class_id as u64);
        rows.push((stats.class_id, reestimate_prototype(stats, backbone, adapter, m, &mut rng)?));
    }
    for class in new {
        let feats = features_from_pre(backbone, adapter, class.activations)?;
        rows.push((class.class_id, mean_row(feats.view())?));
    }
    rows.sort_by_key(|r| r.0);
    let d = backbone.d();
    let mut protos = Array2::zeros((rows.len(), d));
    for (i, (_, row)) in rows.iter().enumerate() {
        protos.row_mut(i).assign(row);
    }
    PrototypeClassifier::from_prototypes(rows.into_iter().map(|r| r.0).collect(), protos)
}
