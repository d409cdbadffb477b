//! Conceptual clustering of tasks: k-means++ / Lloyd on semantic prototypes,
//! with the number of clusters picked by the mean silhouette score.

use std::ops::RangeInclusive;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaefError};
use crate::numeric::{squared_euclidean, SemanticPrototype};
use crate::rng;

impl AsRef<[f64]> for SemanticPrototype {
    fn as_ref(&self) -> &[f64] {
        self.values()
    }
}

/// Partition of task indices into `k` non-empty clusters.
///
/// Clusters are kept in canonical order: each cluster's members are sorted and
/// clusters are ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    /// Builds a canonical assignment from arbitrary labels. Unused label values
    /// are dropped.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(SaefError::Empty("cluster labels"));
        }
        let mut remap: Vec<Option<usize>> = vec![None; labels.iter().max().unwrap() + 1];
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        let mut canonical = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            let c = *remap[l].get_or_insert_with(|| {
                clusters.push(Vec::new());
                clusters.len() - 1
            });
            clusters[c].push(i);
            canonical.push(c);
        }
        Ok(Self { k: clusters.len(), labels: canonical, clusters })
    }

    /// Every task in one cluster.
    pub fn single(n: usize) -> Result<Self> {
        Self::from_labels(&vec![0; n])
    }

    /// Every task in its own cluster.
    pub fn singletons(n: usize) -> Result<Self> {
        Self::from_labels(&(0..n).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let first = points.first().ok_or(SaefError::Empty("points"))?.as_ref().len();
    for p in points {
        if p.as_ref().len() != first {
            return Err(SaefError::LengthMismatch { expected: first, actual: p.as_ref().len() });
        }
    }
    Ok(first)
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = squared_euclidean(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p.as_ref(), points[chosen[0]].as_ref()))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // All remaining points coincide with a center; take any unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_euclidean(p.as_ref(), points[next].as_ref()));
        }
    }
    chosen.into_iter().map(|i| points[i].as_ref().to_vec()).collect()
}

pub(crate) struct LloydFit {
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after every update step.
    #[cfg_attr(not(test), allow(dead_code))]
    pub inertia: Vec<f64>,
}

pub(crate) fn lloyd<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, max_iters: usize) -> Result<LloydFit> {
    let dim = check_points(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(SaefError::KOutOfRange { k, n });
    }
    let mut rng = rng::stream(seed, "kmeans", k as u64);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p.as_ref(), &centers).0).collect();
    let mut inertia = Vec::new();

    for _ in 0..max_iters.max(1) {
        // Repair empty clusters by moving the point farthest from its centroid.
        loop {
            let mut counts = vec![0usize; k];
            for &l in &labels {
                counts[l] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = squared_euclidean(points[a].as_ref(), &centers[labels[a]]);
                    let db = squared_euclidean(points[b].as_ref(), &centers[labels[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("k <= n guarantees a multi-member cluster");
            labels[far] = empty;
            centers[empty] = points[far].as_ref().to_vec();
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        for ((center, sum), count) in centers.iter_mut().zip(sums).zip(&counts) {
            *center = sum.into_iter().map(|s| s / *count as f64).collect();
        }
        inertia.push(
            points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| squared_euclidean(p.as_ref(), &centers[l]))
                .sum(),
        );

        let next: Vec<usize> = points.iter().map(|p| nearest(p.as_ref(), &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(LloydFit { labels, inertia })
}

/// Seeded k-means (k-means++ initialisation, Lloyd iterations until the
/// assignment stops changing or `max_iters` is reached).
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    let fit = lloyd(points, k, seed, max_iters)?;
    ClusterAssignment::from_labels(&fit.labels)
}

/// Mean silhouette over all points, with Euclidean distances. Points in
/// singleton clusters score 0.
pub fn silhouette_score<P: AsRef<[f64]>>(points: &[P], assignment: &ClusterAssignment) -> Result<f64> {
    check_points(points)?;
    let n = points.len();
    if assignment.k < 2 || n < 3 {
        return Err(SaefError::SilhouetteUndefined { clusters: assignment.k, points: n });
    }
    if assignment.labels.len() != n {
        return Err(SaefError::LengthMismatch { expected: n, actual: assignment.labels.len() });
    }
    let dist = |i: usize, j: usize| squared_euclidean(points[i].as_ref(), points[j].as_ref()).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignment.labels[i];
        if assignment.clusters[own].len() == 1 {
            continue;
        }
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for (c, members) in assignment.clusters.iter().enumerate() {
            let sum: f64 = members.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).sum();
            if c == own {
                a = sum / (members.len() - 1) as f64;
            } else {
                b = b.min(sum / members.len() as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Outcome of the silhouette search over `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub assignment: ClusterAssignment,
    /// `(k, silhouette)` for every evaluated `k`, ascending in `k`.
    pub scores: Vec<(usize, f64)>,
}

pub const DEFAULT_MAX_ITERS: usize = 100;

/// `[2, min(T - 1, 10)]`, empty when `T < 3`.
pub fn default_k_range(n_tasks: usize) -> RangeInclusive<usize> {
    2..=n_tasks.saturating_sub(1).min(10)
}

/// Runs k-means for each `k` in range and keeps the assignment with the highest
/// silhouette (ties go to the smaller `k`).
///
/// With fewer than 3 points, or when the best silhouette is not positive, a
/// single cluster is returned.
pub fn find_optimal_k<P: AsRef<[f64]> + Sync>(points: &[P], k_range: RangeInclusive<usize>, seed: u64) -> Result<KSelection> {
    let n = points.len();
    check_points(points)?;
    let lo = (*k_range.start()).max(2);
    let hi = (*k_range.end()).min(n.saturating_sub(1));
    if n < 3 || lo > hi {
        return Ok(KSelection { assignment: ClusterAssignment::single(n)?, scores: Vec::new() });
    }
    let fits: Vec<(usize, ClusterAssignment, f64)> = (lo..=hi)
        .into_par_iter()
        .map(|k| {
            let a = kmeans(points, k, seed, DEFAULT_MAX_ITERS)?;
            let s = silhouette_score(points, &a)?;
            Ok((k, a, s))
        })
        .collect::<Result<_>>()?;
    let scores = fits.iter().map(|(k, _, s)| (*k, *s)).collect();
    let mut best: Option<&(usize, ClusterAssignment, f64)> = None;
    for fit in &fits {
        if best.is_none_or(|b| fit.2 > b.2) {
            best = Some(fit);
        }
    }
    let best = best.expect("non-empty range");
    let assignment = if best.2 > 0.0 { best.1.clone() } else { ClusterAssignment::single(n)? };
    Ok(KSelection { assignment, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn four_points() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]
    }

    /// Direct silhouette evaluation, written independently of the implementation.
    fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let k = labels.iter().max().unwrap() + 1;
        let mut s = 0.0;
        for i in 0..points.len() {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0.0; k];
            for j in 0..points.len() {
                if i != j {
                    sums[labels[j]] += d(&points[i], &points[j]);
                    counts[labels[j]] += 1.0;
                }
            }
            if counts[labels[i]] == 0.0 {
                continue;
            }
            let a = sums[labels[i]] / counts[labels[i]];
            let b = (0..k).filter(|&c| c != labels[i]).map(|c| sums[c] / counts[c]).fold(f64::INFINITY, f64::min);
            s += (b - a) / a.max(b);
        }
        s / points.len() as f64
    }

    fn blobs(centers: &[Vec<f64>], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng::stream(seed, "test-blobs", 0);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(center.iter().map(|v| v + noise.sample(&mut rng)).collect());
                truth.push(c);
            }
        }
        (pts, truth)
    }

    fn triangle(side: f64) -> Vec<Vec<f64>> {
        let h = side * 3f64.sqrt() / 2.0;
        vec![vec![0.0, 0.0], vec![side, 0.0], vec![side / 2.0, h]]
    }

    #[test]
    fn kmeans_separates_pairs() {
        let a = kmeans(&four_points(), 2, 1, 100).unwrap();
        assert_eq!(a.clusters, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn kmeans_k_equal_n_gives_singletons() {
        let a = kmeans(&four_points(), 4, 3, 100).unwrap();
        assert_eq!(a.clusters, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        assert!(matches!(kmeans(&four_points(), 0, 1, 10), Err(SaefError::KOutOfRange { .. })));
        assert!(matches!(kmeans(&four_points(), 5, 1, 10), Err(SaefError::KOutOfRange { .. })));
    }

    #[test]
    fn kmeans_recovers_generating_partition() {
        let centers = triangle(20.0);
        let (pts, truth) = blobs(&centers, 10, 0.5, 11);
        let a = kmeans(&pts, 3, 5, 100).unwrap();
        assert_eq!(a, ClusterAssignment::from_labels(&truth).unwrap());
    }

    #[test]
    fn silhouette_examples() {
        let pts = four_points();
        let good = ClusterAssignment::from_labels(&[0, 0, 1, 1]).unwrap();
        let s = silhouette_score(&pts, &good).unwrap();
        assert!((s - silhouette_oracle(&pts, &[0, 0, 1, 1])).abs() < 1e-12);
        assert!(s > 0.9);
        let bad = ClusterAssignment::from_labels(&[0, 1, 0, 1]).unwrap();
        let s = silhouette_score(&pts, &bad).unwrap();
        assert!((s - silhouette_oracle(&pts, &[0, 1, 0, 1])).abs() < 1e-12);
        assert!(s < 0.0);
        // Regular simplex: every pairwise distance equals 1.
        let simplex = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let split = ClusterAssignment::from_labels(&[0, 0, 1, 1]).unwrap();
        assert!(silhouette_score(&simplex, &split).unwrap().abs() < 1e-12);
        assert!(matches!(
            silhouette_score(&pts, &ClusterAssignment::single(4).unwrap()),
            Err(SaefError::SilhouetteUndefined { .. })
        ));
    }

    #[test]
    fn optimal_k_finds_three_blobs() {
        let (pts, _) = blobs(&triangle(20.0), 8, 0.5, 2);
        let sel = find_optimal_k(&pts, 2..=6, 9).unwrap();
        assert_eq!(sel.assignment.k, 3);
        assert_eq!(sel.scores.len(), 5);
        let best = sel.scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(sel.scores.iter().find(|s| s.0 == 3).unwrap().1, best);
    }

    #[test]
    fn optimal_k_two_tasks_is_single_cluster() {
        let sel = find_optimal_k(&[vec![0.0, 1.0], vec![5.0, 1.0]], 2..=5, 0).unwrap();
        assert_eq!(sel.assignment.k, 1);
        assert!(sel.scores.is_empty());
    }

    #[test]
    fn optimal_k_twenty_tasks_two_concepts() {
        let (pts, truth) = blobs(&[vec![0.0; 8], vec![20.0 / 8f64.sqrt(); 8]], 10, 0.5, 4);
        let sel = find_optimal_k(&pts, default_k_range(20), 1).unwrap();
        assert_eq!(sel.assignment.k, 2);
        assert_eq!(sel.assignment, ClusterAssignment::from_labels(&truth).unwrap());
    }

    #[test]
    fn assignment_canonical_form() {
        let a = ClusterAssignment::from_labels(&[5, 2, 5, 9]).unwrap();
        assert_eq!(a.k, 3);
        assert_eq!(a.labels, vec![0, 1, 0, 2]);
        assert_eq!(a.clusters, vec![vec![0, 2], vec![1], vec![3]]);
    }

    proptest! {
        #[test]
        fn lloyd_is_deterministic_and_monotone(
            raw in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 4..25),
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            prop_assume!(k <= raw.len());
            let a = lloyd(&raw, k, seed, 50).unwrap();
            let b = lloyd(&raw, k, seed, 50).unwrap();
            prop_assert_eq!(&a.labels, &b.labels);
            for w in a.inertia.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            let assignment = ClusterAssignment::from_labels(&a.labels).unwrap();
            prop_assert_eq!(assignment.k, k);
            for (i, &l) in assignment.labels.iter().enumerate() {
                prop_assert!(assignment.clusters[l].contains(&i));
            }
        }

        #[test]
        fn optimal_k_dominates_range(
            raw in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 5..15),
            seed in any::<u64>(),
        ) {
            let sel = find_optimal_k(&raw, 2..=4, seed).unwrap();
            let best = sel.scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            if sel.assignment.k > 1 {
                let chosen = silhouette_score(&raw, &sel.assignment).unwrap();
                prop_assert!((chosen - best).abs() < 1e-12);
            } else {
                prop_assert!(best <= 0.0);
            }
        }
    }
}
