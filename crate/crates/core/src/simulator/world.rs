//! Synthetic class-incremental task streams.
//!
//! Concepts are well-separated centers in input space; each class is a
//! diagonal Gaussian around a point near its concept center. Every class also
//! gets a semantic embedding near its concept's semantic anchor, and a task's
//! semantic prototype is the mean of its classes' embeddings.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SaefError};
use crate::numeric::SemanticPrototype;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub concept: usize,
    pub mean: Vec<f64>,
    /// Per-coordinate standard deviation.
    pub std: Vec<f64>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub d_in: usize,
    pub d_s: usize,
    pub samples_per_class: usize,
    pub concept_centers: Vec<Vec<f64>>,
    pub semantic_anchors: Vec<Vec<f64>>,
    /// Indexed by class id.
    pub classes: Vec<ClassSpec>,
    /// Class ids of each task, in arrival order.
    pub tasks: Vec<Vec<usize>>,
    pub task_semantics: Vec<SemanticPrototype>,
}

/// Labelled samples of one task, split into train and test parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: usize,
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<usize>,
}

fn gaussian_vec(n: usize, std: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl SyntheticWorld {
    /// Draws a world from the size and geometry fields of `cfg`.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let n_classes = cfg.tasks * cfg.classes_per_task;
        let per_concept = cfg.classes_per_concept();
        if per_concept * cfg.n_concepts != n_classes {
            return Err(SaefError::Config("classes do not divide evenly into concepts".into()));
        }
        if cfg.d_s < cfg.n_concepts {
            return Err(SaefError::Config("d_s must be at least n_concepts".into()));
        }
        let seed = cfg.seed;
        let mut rng = rng::stream(seed, "world", 0);

        // Input-space concept centers: random directions, pairwise distance
        // concentrates around `concept_separation`.
        let center_std = cfg.concept_separation / (2.0 * cfg.d_in as f64).sqrt();
        let concept_centers: Vec<Vec<f64>> =
            (0..cfg.n_concepts).map(|_| gaussian_vec(cfg.d_in, center_std, &mut rng)).collect();
        // Semantic anchors on scaled axes: exactly `semantic_separation` apart.
        let axis = cfg.semantic_separation / std::f64::consts::SQRT_2;
        let semantic_anchors: Vec<Vec<f64>> = (0..cfg.n_concepts)
            .map(|c| {
                let mut v = vec![0.0; cfg.d_s];
                v[c] = axis;
                v
            })
            .collect();

        let std_range = Uniform::new(0.5, 1.5).expect("valid range");
        let mut classes = Vec::with_capacity(n_classes);
        for class_id in 0..n_classes {
            let concept = class_id / per_concept;
            let offset = gaussian_vec(cfg.d_in, cfg.class_spread, &mut rng);
            let mean = concept_centers[concept].iter().zip(offset).map(|(c, o)| c + o).collect();
            let std = (0..cfg.d_in).map(|_| cfg.sample_noise * std_range.sample(&mut rng)).collect();
            let noise = gaussian_vec(cfg.d_s, cfg.semantic_noise, &mut rng);
            let embedding = semantic_anchors[concept].iter().zip(noise).map(|(a, e)| a + e).collect();
            classes.push(ClassSpec { class_id, concept, mean, std, embedding });
        }

        // Shuffle classes inside each concept, cut into tasks concept by
        // concept, then shuffle the task order.
        let mut ordered = Vec::with_capacity(n_classes);
        for concept in 0..cfg.n_concepts {
            let mut ids: Vec<usize> = (concept * per_concept..(concept + 1) * per_concept).collect();
            ids.shuffle(&mut rng);
            ordered.extend(ids);
        }
        let mut tasks: Vec<Vec<usize>> = ordered.chunks(cfg.classes_per_task).map(|c| c.to_vec()).collect();
        tasks.shuffle(&mut rng);

        let task_semantics = tasks
            .iter()
            .map(|ids| {
                let mut mean = vec![0.0; cfg.d_s];
                for &c in ids {
                    for (m, e) in mean.iter_mut().zip(&classes[c].embedding) {
                        *m += e / ids.len() as f64;
                    }
                }
                SemanticPrototype::new(mean)
            })
            .collect::<Result<_>>()?;

        Ok(Self {
            seed,
            d_in: cfg.d_in,
            d_s: cfg.d_s,
            samples_per_class: cfg.samples_per_class,
            concept_centers,
            semantic_anchors,
            classes,
            tasks,
            task_semantics,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Number of training samples per class (80% of the draw, at least one).
    pub fn train_per_class(&self) -> usize {
        ((self.samples_per_class * 4) / 5).clamp(1, self.samples_per_class - 1)
    }

    /// Deterministically draws the samples of `task` and splits each class
    /// 80/20 into train and test.
    pub fn sample_task(&self, task: usize) -> Result<TaskData> {
        let class_ids = self.tasks.get(task).ok_or_else(|| SaefError::Config(format!("no task {task}")))?;
        let n_train = self.train_per_class();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
        for &c in class_ids {
            let spec = &self.classes[c];
            let mut rng = rng::stream(self.seed, "data", c as u64);
            let mut rows: Vec<Vec<f64>> = (0..self.samples_per_class)
                .map(|_| {
                    spec.mean
                        .iter()
                        .zip(&spec.std)
                        .map(|(m, s)| m + s * Normal::new(0.0, 1.0).unwrap().sample(&mut rng))
                        .collect()
                })
                .collect();
            rows.shuffle(&mut rng);
            for (i, row) in rows.into_iter().enumerate() {
                if i < n_train {
                    train.extend(row);
                    train_y.push(c);
                } else {
                    test.extend(row);
                    test_y.push(c);
                }
            }
        }
        let d = self.d_in;
        Ok(TaskData {
            task,
            train_x: Array2::from_shape_vec((train_y.len(), d), train).expect("shape"),
            train_y,
            test_x: Array2::from_shape_vec((test_y.len(), d), test).expect("shape"),
            test_y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::cosine_similarity;

    fn cfg() -> RunConfig {
        RunConfig { tasks: 10, classes_per_task: 2, n_concepts: 2, ..RunConfig::default() }
    }

    #[test]
    fn tasks_partition_classes_within_concepts() {
        let w = SyntheticWorld::generate(&cfg()).unwrap();
        assert_eq!(w.n_tasks(), 10);
        let mut all: Vec<usize> = w.tasks.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for t in &w.tasks {
            assert_eq!(t.len(), 2);
            assert!(t.iter().all(|&c| w.classes[c].concept == w.classes[t[0]].concept));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = SyntheticWorld::generate(&cfg()).unwrap();
        let b = SyntheticWorld::generate(&cfg()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.sample_task(3).unwrap(), b.sample_task(3).unwrap());
        let c = SyntheticWorld::generate(&RunConfig { seed: 1, ..cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn semantic_prototypes_cluster_by_concept() {
        let w = SyntheticWorld::generate(&cfg()).unwrap();
        let concept = |t: usize| w.classes[w.tasks[t][0]].concept;
        let (mut within, mut between) = (Vec::new(), Vec::new());
        for i in 0..w.n_tasks() {
            for j in i + 1..w.n_tasks() {
                let c = cosine_similarity(w.task_semantics[i].values(), w.task_semantics[j].values()).unwrap();
                if concept(i) == concept(j) { within.push(c) } else { between.push(c) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&between) < mean(&within));
    }

    #[test]
    fn split_sizes() {
        let w = SyntheticWorld::generate(&cfg()).unwrap();
        let d = w.sample_task(0).unwrap();
        assert_eq!(d.train_x.nrows(), 80);
        assert_eq!(d.test_x.nrows(), 20);
        assert_eq!(d.train_x.ncols(), w.d_in);
        assert!(w.sample_task(10).is_err());
    }

    #[test]
    fn inconsistent_counts_rejected() {
        let bad = RunConfig { tasks: 3, classes_per_task: 3, n_concepts: 2, ..RunConfig::default() };
        assert!(SyntheticWorld::generate(&bad).is_err());
    }
}
