//! JSON expert bundle: the world, trained adapters, class statistics, heads
//! and (optionally) the built hierarchy.
//!
//! Floats are written in shortest round-trip form and parsed back exactly, so
//! `from_json(to_json(b)) == b` bit for bit.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SaefError};
use crate::forest::{ForestHierarchy, TaskRecord};
use crate::numeric::{ParamVector, SemanticPrototype, VisualPrototype};
use crate::simulator::classifier::{ClassStats, PrototypeClassifier};
use crate::simulator::model::{Adapter, Backbone};
use crate::simulator::pipeline::TrainedStream;
use crate::simulator::training::EpochLog;
use crate::simulator::world::SyntheticWorld;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub semantic_prototype: Vec<f64>,
    /// `d × r`, row-major.
    #[serde(rename = "W_down", default, skip_serializing_if = "Option::is_none")]
    pub w_down: Option<Vec<f64>>,
    /// `r × d`, row-major.
    #[serde(rename = "W_up", default, skip_serializing_if = "Option::is_none")]
    pub w_up: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_prototype: Option<Vec<f64>>,
}

impl TaskEntry {
    pub fn is_trained(&self) -> bool {
        self.w_down.is_some() && self.w_up.is_some() && self.visual_prototype.is_some()
    }
}

/// A classifier head: unit rows, row-major, one per class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub class_ids: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBundle {
    pub version: u32,
    pub d: usize,
    pub d_in: usize,
    pub r: usize,
    pub d_s: usize,
    pub config: RunConfig,
    pub world: SyntheticWorld,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub class_stats: Vec<ClassStats>,
    /// Head after each training stage.
    #[serde(default)]
    pub heads: Vec<HeadEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training_log: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<ForestHierarchy>,
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(SaefError::Bundle(format!("{what}: expected {expected} values, found {actual}")))
    }
}

impl ExpertBundle {
    /// An untrained bundle: world and task list only.
    pub fn from_world(config: &RunConfig, world: SyntheticWorld) -> Self {
        let tasks = world
            .tasks
            .iter()
            .zip(&world.task_semantics)
            .enumerate()
            .map(|(task_id, (classes, sem))| TaskEntry {
                task_id,
                class_ids: classes.clone(),
                semantic_prototype: sem.values().to_vec(),
                w_down: None,
                w_up: None,
                visual_prototype: None,
            })
            .collect();
        Self {
            version: BUNDLE_VERSION,
            d: config.d,
            d_in: world.d_in,
            r: config.r,
            d_s: world.d_s,
            config: config.clone(),
            world,
            tasks,
            class_stats: Vec::new(),
            heads: Vec::new(),
            training_log: Vec::new(),
            hierarchy: None,
        }
    }

    /// Records the outcome of training. Any previous hierarchy is dropped.
    pub fn attach_training(&mut self, config: &RunConfig, trained: &TrainedStream) -> Result<()> {
        check_len("trained tasks", self.tasks.len(), trained.records.len())?;
        self.config = config.clone();
        self.d = config.d;
        self.r = config.r;
        for ((entry, adapter), record) in self.tasks.iter_mut().zip(&trained.adapters).zip(&trained.records) {
            entry.w_down = Some(adapter.down.iter().copied().collect());
            entry.w_up = Some(adapter.up.iter().copied().collect());
            entry.visual_prototype = Some(record.visual.values().to_vec());
        }
        self.class_stats = trained.class_stats.clone();
        self.heads = trained
            .heads
            .iter()
            .map(|h| HeadEntry { class_ids: h.class_ids.clone(), weights: h.weights.iter().copied().collect() })
            .collect();
        self.training_log = trained.log.clone();
        self.hierarchy = None;
        Ok(())
    }

    pub fn is_trained(&self) -> bool {
        !self.tasks.is_empty() && self.tasks.iter().all(TaskEntry::is_trained)
    }

    pub fn adapter(&self, task: usize) -> Result<Adapter> {
        let entry = self.tasks.get(task).ok_or_else(|| SaefError::Bundle(format!("no task {task}")))?;
        let (Some(down), Some(up)) = (&entry.w_down, &entry.w_up) else {
            return Err(SaefError::Bundle(format!("task {task} has no adapter")));
        };
        let (d, r) = (self.d, self.r);
        check_len("W_down", d * r, down.len())?;
        check_len("W_up", r * d, up.len())?;
        Ok(Adapter {
            down: Array2::from_shape_vec((d, r), down.clone()).expect("checked shape"),
            up: Array2::from_shape_vec((r, d), up.clone()).expect("checked shape"),
        })
    }

    /// Task records for hierarchy construction.
    pub fn task_records(&self) -> Result<Vec<TaskRecord>> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let visual = t
                    .visual_prototype
                    .clone()
                    .ok_or_else(|| SaefError::Bundle(format!("task {i} has no visual prototype")))?;
                Ok(TaskRecord {
                    task_id: t.task_id,
                    class_ids: t.class_ids.clone(),
                    params: self.adapter(i)?.to_params()?,
                    semantic: SemanticPrototype::new(t.semantic_prototype.clone())?,
                    visual: VisualPrototype::leaf(visual)?,
                })
            })
            .collect()
    }

    /// Rebuilds the trained stream (backbone regenerated from the config
    /// seed).
    pub fn trained_stream(&self) -> Result<TrainedStream> {
        if !self.is_trained() {
            return Err(SaefError::Bundle("bundle has no trained adapters".into()));
        }
        check_len("heads", self.tasks.len(), self.heads.len())?;
        let adapters = (0..self.tasks.len()).map(|i| self.adapter(i)).collect::<Result<Vec<_>>>()?;
        let heads = self
            .heads
            .iter()
            .map(|h| {
                check_len("head weights", h.class_ids.len() * self.d, h.weights.len())?;
                let w = Array2::from_shape_vec((h.class_ids.len(), self.d), h.weights.clone()).expect("checked shape");
                Ok(PrototypeClassifier { class_ids: h.class_ids.clone(), weights: w })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedStream {
            backbone: Backbone::new(self.d_in, self.d, self.config.seed),
            adapters,
            heads,
            class_stats: self.class_stats.clone(),
            records: self.task_records()?,
            log: self.training_log.clone(),
            accesses: Vec::new(),
        })
    }

    /// Checks that every array matches the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.version != BUNDLE_VERSION {
            return Err(SaefError::Bundle(format!("unsupported bundle version {}", self.version)));
        }
        check_len("world tasks", self.world.n_tasks(), self.tasks.len())?;
        if self.world.d_in != self.d_in || self.world.d_s != self.d_s {
            return Err(SaefError::Bundle("world dimensions disagree with the bundle header".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(SaefError::Bundle(format!("task {i} is stored with id {}", t.task_id)));
            }
            check_len("semantic prototype", self.d_s, t.semantic_prototype.len())?;
            if let Some(v) = &t.w_down {
                check_len("W_down", self.d * self.r, v.len())?;
            }
            if let Some(v) = &t.w_up {
                check_len("W_up", self.r * self.d, v.len())?;
            }
            if let Some(v) = &t.visual_prototype {
                check_len("visual prototype", self.d, v.len())?;
            }
        }
        for s in &self.class_stats {
            check_len("class mean", self.d, s.mean.len())?;
            check_len("class variance", self.d, s.var.len())?;
            if s.var.iter().any(|v| *v < 0.0) {
                return Err(SaefError::Bundle(format!("class {} has a negative variance", s.class_id)));
            }
        }
        for h in &self.heads {
            check_len("head weights", h.class_ids.len() * self.d, h.weights.len())?;
        }
        if let Some(h) = &self.hierarchy {
            h.validate()?;
            check_len("hierarchy leaves", self.tasks.len(), h.n_leaves())?;
            for n in &h.nodes {
                check_len("node params", 2 * self.d * self.r, n.params.len())?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text)?;
        b.validate()?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Flattened adapter parameters of every task, in task order.
pub fn task_params(bundle: &ExpertBundle) -> Result<Vec<ParamVector>> {
    (0..bundle.tasks.len()).map(|i| bundle.adapter(i)?.to_params()).collect()
}
