//! Adapter training: cross-entropy through the prototype head plus the
//! orthogonality penalty against earlier up-projections, with analytic
//! gradients and full-batch gradient descent.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use super::classifier::{align_classifier, ClassStats, NewClass, PrototypeClassifier};
use super::model::{Adapter, Backbone};
use crate::error::{Result, SaefError};
use crate::rng;

/// One task's training set, already pushed through the frozen backbone.
#[derive(Debug, Clone, Copy)]
pub struct TrainBatch<'a> {
    /// Pre-adapter activations, `n × d`.
    pub h: ArrayView2<'a, f64>,
    /// Frozen branch output, `n × d`.
    pub frozen: ArrayView2<'a, f64>,
    /// Row index into the head for each sample.
    pub targets: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub orth: f64,
}

fn check_batch(batch: &TrainBatch<'_>, adapter: &Adapter, head: ArrayView2<'_, f64>) -> Result<()> {
    let n = batch.h.nrows();
    if n == 0 {
        return Err(SaefError::Empty("training batch"));
    }
    let d = adapter.d();
    if batch.h.ncols() != d || batch.frozen.dim() != (n, d) || head.ncols() != d {
        return Err(SaefError::LengthMismatch { expected: d, actual: batch.h.ncols() });
    }
    if batch.targets.len() != n {
        return Err(SaefError::LengthMismatch { expected: n, actual: batch.targets.len() });
    }
    if let Some(&bad) = batch.targets.iter().find(|&&t| t >= head.nrows()) {
        return Err(SaefError::LengthMismatch { expected: head.nrows(), actual: bad + 1 });
    }
    Ok(())
}

/// Loss and its gradient with respect to `down` and `up`.
///
/// `head` rows are treated as constants. The penalty is
/// `lambda · Σ_i ‖up · prev_upᵢᵀ‖_F`; its gradient at a zero product is taken
/// as zero.
pub fn loss_and_grad(
    adapter: &Adapter,
    batch: &TrainBatch<'_>,
    head: ArrayView2<'_, f64>,
    prev_ups: &[Array2<f64>],
    lambda: f64,
) -> Result<(LossParts, Adapter)> {
    check_batch(batch, adapter, head)?;
    let n = batch.h.nrows() as f64;
    let pre = batch.h.dot(&adapter.down);
    let act = pre.mapv(|u| u.max(0.0));
    let features = &batch.frozen + &act.dot(&adapter.up);
    let mut scores = features.dot(&head.t());

    // Row-wise softmax in place; accumulate cross-entropy.
    let mut cls = 0.0;
    for (mut row, &y) in scores.rows_mut().into_iter().zip(batch.targets) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        cls -= (row[y] / sum).ln();
        row /= sum;
        row[y] -= 1.0;
    }
    cls /= n;
    scores /= n;

    let d_features = scores.dot(&head);
    let grad_up = act.t().dot(&d_features);
    let mut d_pre = d_features.dot(&adapter.up.t());
    Zip::from(&mut d_pre).and(&pre).for_each(|g, &u| {
        if u <= 0.0 {
            *g = 0.0;
        }
    });
    let grad_down = batch.h.t().dot(&d_pre);
    let mut grad = Adapter { down: grad_down, up: grad_up };

    let mut orth = 0.0;
    for prev in prev_ups {
        if prev.dim() != adapter.up.dim() {
            return Err(SaefError::LengthMismatch { expected: adapter.up.len(), actual: prev.len() });
        }
        let product = adapter.up.dot(&prev.t());
        let norm = product.iter().map(|v| v * v).sum::<f64>().sqrt();
        orth += norm;
        if norm > 0.0 && lambda != 0.0 {
            grad.up.scaled_add(lambda / norm, &product.dot(prev));
        }
    }
    Ok((LossParts { total: cls + lambda * orth, cls, orth }, grad))
}

/// Loss value only.
pub fn loss(
    adapter: &Adapter,
    batch: &TrainBatch<'_>,
    head: ArrayView2<'_, f64>,
    prev_ups: &[Array2<f64>],
    lambda: f64,
) -> Result<LossParts> {
    loss_and_grad(adapter, batch, head, prev_ups, lambda).map(|(l, _)| l)
}

/// Optimisation settings for one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    /// Adapter bottleneck width.
    pub r: usize,
    pub m_pseudo: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub orth: f64,
}

/// Everything the current task contributes to training.
pub struct TaskTrainingInput<'a> {
    pub task: usize,
    pub h: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    /// Statistics of every class from earlier tasks.
    pub old_stats: &'a [ClassStats],
    pub prev_ups: &'a [Array2<f64>],
}

pub struct TrainedAdapter {
    pub adapter: Adapter,
    /// Head over all seen classes, aligned to the final adapter.
    pub head: PrototypeClassifier,
    pub log: Vec<EpochLog>,
}

fn group_by_class(h: ArrayView2<'_, f64>, labels: &[usize]) -> Vec<(usize, Array2<f64>)> {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|c| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            (c, h.select(ndarray::Axis(0), &rows))
        })
        .collect()
}

/// Builds the head over old and current classes in the space of `adapter`.
pub fn aligned_head(
    backbone: &Backbone,
    adapter: &Adapter,
    old_stats: &[ClassStats],
    current: &[(usize, Array2<f64>)],
    m_pseudo: usize,
    seed: u64,
) -> Result<PrototypeClassifier> {
    let new: Vec<NewClass<'_>> =
        current.iter().map(|(c, h)| NewClass { class_id: *c, activations: h.view() }).collect();
    align_classifier(old_stats, &new, backbone, adapter, m_pseudo, seed)
}

fn learning_rate(s: &TrainSettings, epoch: usize) -> f64 {
    if s.cosine_decay && s.epochs > 1 {
        let progress = epoch as f64 / s.epochs as f64;
        0.5 * s.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    } else {
        s.lr
    }
}

/// Trains one task's adapter by full-batch gradient descent. The head is
/// re-aligned to the current adapter at the start of every epoch; pseudo
/// features for old classes come from the same seeded draw each time.
pub fn train_adapter(backbone: &Backbone, input: &TaskTrainingInput<'_>, s: &TrainSettings) -> Result<TrainedAdapter> {
    if input.h.nrows() != input.labels.len() {
        return Err(SaefError::LengthMismatch { expected: input.h.nrows(), actual: input.labels.len() });
    }
    let align_seed = rng::derive_seed(s.seed, "align", input.task as u64);
    let mut init_rng = rng::stream(s.seed, "adapter", input.task as u64);
    let current = group_by_class(input.h, input.labels);
    let frozen = backbone.frozen(input.h);

    let mut adapter = Adapter::init(backbone.d(), s.r, 0.01, &mut init_rng);
    let mut log = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        let head = aligned_head(backbone, &adapter, input.old_stats, &current, s.m_pseudo, align_seed)?;
        let targets: Vec<usize> = input
            .labels
            .iter()
            .map(|&c| head.index_of(c).expect("current class in head"))
            .collect();
        let batch = TrainBatch { h: input.h, frozen: frozen.view(), targets: &targets };
        let (parts, grad) = loss_and_grad(&adapter, &batch, head.weights.view(), input.prev_ups, s.lambda)?;
        log.push(EpochLog { task: input.task, epoch, loss: parts.total, cls: parts.cls, orth: parts.orth });
        let lr = learning_rate(s, epoch);
        adapter.down.scaled_add(-lr, &grad.down);
        adapter.up.scaled_add(-lr, &grad.up);
    }
    let head = aligned_head(backbone, &adapter, input.old_stats, &current, s.m_pseudo, align_seed)?;
    Ok(TrainedAdapter { adapter, head, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        m
    }

    struct Toy {
        adapter: Adapter,
        h: Array2<f64>,
        frozen: Array2<f64>,
        targets: Vec<usize>,
        head: Array2<f64>,
        prev: Vec<Array2<f64>>,
    }

    fn toy(seed: u64, d: usize, r: usize) -> Toy {
        let mut rng = rng::stream(seed, "toy", 0);
        let n = 7;
        let classes = 4;
        Toy {
            adapter: Adapter { down: gaussian(d, r, &mut rng), up: gaussian(r, d, &mut rng) },
            h: gaussian(n, d, &mut rng),
            frozen: gaussian(n, d, &mut rng),
            targets: (0..n).map(|i| i % classes).collect(),
            head: unit_rows(gaussian(classes, d, &mut rng)),
            prev: vec![gaussian(r, d, &mut rng), gaussian(r, d, &mut rng)],
        }
    }

    fn total(t: &Toy, a: &Adapter, lambda: f64) -> f64 {
        let batch = TrainBatch { h: t.h.view(), frozen: t.frozen.view(), targets: &t.targets };
        loss(a, &batch, t.head.view(), &t.prev, lambda).unwrap().total
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let step = 1e-5;
        for seed in 0..20 {
            let t = toy(seed, 4, 2);
            let batch = TrainBatch { h: t.h.view(), frozen: t.frozen.view(), targets: &t.targets };
            let (_, grad) = loss_and_grad(&t.adapter, &batch, t.head.view(), &t.prev, 0.3).unwrap();
            let analytic: Vec<f64> = grad.down.iter().chain(grad.up.iter()).copied().collect();
            let base = t.adapter.to_params().unwrap().into_inner();
            let mut numeric = Vec::with_capacity(base.len());
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += step;
                let mut minus = base.clone();
                minus[i] -= step;
                let f = |v: Vec<f64>| {
                    let a = Adapter::from_params(&crate::numeric::ParamVector::new(v).unwrap(), 4, 2).unwrap();
                    total(&t, &a, 0.3)
                };
                numeric.push((f(plus) - f(minus)) / (2.0 * step));
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-4, "seed {seed}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn orthogonal_history_has_no_penalty_gradient() {
        let t = toy(3, 4, 2);
        let adapter = Adapter { down: t.adapter.down.clone(), up: array![[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]] };
        let prev = vec![array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 3.0]], array![[0.0, 0.0, -1.0, 1.0], [0.0; 4]]];
        let batch = TrainBatch { h: t.h.view(), frozen: t.frozen.view(), targets: &t.targets };
        let (with, g_with) = loss_and_grad(&adapter, &batch, t.head.view(), &prev, 5.0).unwrap();
        let (without, g_without) = loss_and_grad(&adapter, &batch, t.head.view(), &[], 5.0).unwrap();
        assert_eq!(with.orth, 0.0);
        assert_eq!(with.total, without.total);
        assert_eq!(g_with, g_without);
    }

    #[test]
    fn penalty_ignores_row_order_of_history() {
        let t = toy(5, 4, 2);
        let batch = TrainBatch { h: t.h.view(), frozen: t.frozen.view(), targets: &t.targets };
        let swapped: Vec<Array2<f64>> = t
            .prev
            .iter()
            .map(|p| p.select(ndarray::Axis(0), &[1, 0]))
            .collect();
        let a = loss(&t.adapter, &batch, t.head.view(), &t.prev, 1.0).unwrap();
        let b = loss(&t.adapter, &batch, t.head.view(), &swapped, 1.0).unwrap();
        assert!((a.orth - b.orth).abs() < 1e-12);
        assert!(a.orth > 0.0);
    }

    fn separable_task() -> (Backbone, Array2<f64>, Vec<usize>) {
        let bb = Backbone::new(6, 12, 4);
        let mut rng = rng::stream(4, "toy", 1);
        let mut x = gaussian(40, 6, &mut rng) * 0.3;
        let labels: Vec<usize> = (0..40).map(|i| 10 + i % 2).collect();
        for (mut row, &y) in x.rows_mut().into_iter().zip(&labels) {
            row[0] += if y == 10 { 2.0 } else { -2.0 };
        }
        let h = bb.pre_activation(x.view());
        (bb, h, labels)
    }

    #[test]
    fn first_task_loss_decreases_without_penalty() {
        let (bb, h, labels) = separable_task();
        let input = TaskTrainingInput { task: 0, h: h.view(), labels: &labels, old_stats: &[], prev_ups: &[] };
        let s = TrainSettings { lambda: 0.0, epochs: 15, lr: 0.02, cosine_decay: false, r: 3, m_pseudo: 8, seed: 1 };
        let out = train_adapter(&bb, &input, &s).unwrap();
        assert_eq!(out.log.len(), 15);
        for w in out.log.windows(2) {
            assert!(w[1].loss < w[0].loss, "{:?}", w);
        }
        assert!(out.log.iter().all(|e| e.orth == 0.0));
        assert_eq!(out.head.class_ids, vec![10, 11]);
    }

    #[test]
    fn training_is_deterministic() {
        let (bb, h, labels) = separable_task();
        let prev = vec![Array2::from_elem((3, 12), 0.1)];
        let input = TaskTrainingInput { task: 2, h: h.view(), labels: &labels, old_stats: &[], prev_ups: &prev };
        let s = TrainSettings { lambda: 0.1, epochs: 5, lr: 0.05, cosine_decay: true, r: 3, m_pseudo: 8, seed: 9 };
        let a = train_adapter(&bb, &input, &s).unwrap();
        let b = train_adapter(&bb, &input, &s).unwrap();
        assert_eq!(a.adapter, b.adapter);
        assert!(a.log[0].orth > 0.0);
    }

    #[test]
    fn cosine_schedule_ends_near_zero() {
        let s = TrainSettings { lambda: 0.0, epochs: 10, lr: 1.0, cosine_decay: true, r: 1, m_pseudo: 1, seed: 0 };
        assert_eq!(learning_rate(&s, 0), 1.0);
        assert!(learning_rate(&s, 9) < 0.05);
        assert_eq!(learning_rate(&TrainSettings { cosine_decay: false, ..s }, 9), 1.0);
    }
}
