//! The full exemplar-free protocol: sequential adapter training over the task
//! stream, followed by staged evaluation of either the expert forest or the
//! flat ensemble.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{align_classifier, ClassStats, PrototypeClassifier};
use super::metrics::AccuracyMatrix;
use super::model::{features_from_pre, mean_row, Adapter, Backbone};
use super::training::{train_adapter, EpochLog, TaskTrainingInput, TrainSettings};
use super::world::{SyntheticWorld, TaskData};
use crate::config::RunConfig;
use crate::error::{Result, SaefError};
use crate::forest::{build_hierarchy, ExpertNode, ForestHierarchy, KPolicy, MergeStrategy, TaskRecord};
use crate::inference::{adaptive_infer, cost_report, flat_ensemble_infer, CostReport, ExpertEvaluator, InferenceTrace};
use crate::numeric::VisualPrototype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// One read of task data: during which stage, which task, which split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAccess {
    pub stage: usize,
    pub task: usize,
    pub split: Split,
}

/// Gatekeeper over a world's samples. Training data is only handed out for
/// the task currently being learned, and every read is recorded.
pub struct DataStream<'w> {
    world: &'w SyntheticWorld,
    stage: usize,
    accesses: Mutex<Vec<DataAccess>>,
}

impl<'w> DataStream<'w> {
    pub fn new(world: &'w SyntheticWorld) -> Self {
        Self { world, stage: 0, accesses: Mutex::new(Vec::new()) }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn advance(&mut self) {
        self.stage += 1;
    }

    fn record(&self, task: usize, split: Split) {
        self.accesses.lock().expect("access log").push(DataAccess { stage: self.stage, task, split });
    }

    /// Training samples of the current task.
    pub fn train(&self, task: usize) -> Result<(Array2<f64>, Vec<usize>)> {
        if task != self.stage {
            return Err(SaefError::Config(format!(
                "training data of task {task} requested during stage {}",
                self.stage
            )));
        }
        self.record(task, Split::Train);
        let TaskData { train_x, train_y, .. } = self.world.sample_task(task)?;
        Ok((train_x, train_y))
    }

    /// Held-out samples of any task seen so far.
    pub fn test(&self, task: usize) -> Result<(Array2<f64>, Vec<usize>)> {
        if task > self.stage {
            return Err(SaefError::Config(format!("task {task} has not arrived at stage {}", self.stage)));
        }
        self.record(task, Split::Test);
        let TaskData { test_x, test_y, .. } = self.world.sample_task(task)?;
        Ok((test_x, test_y))
    }

    pub fn accesses(&self) -> Vec<DataAccess> {
        self.accesses.lock().expect("access log").clone()
    }
}

/// Output of sequential training over the whole stream.
#[derive(Debug, Clone)]
pub struct TrainedStream {
    pub backbone: Backbone,
    pub adapters: Vec<Adapter>,
    /// Head after each stage, aligned to that stage's adapter.
    pub heads: Vec<PrototypeClassifier>,
    pub class_stats: Vec<ClassStats>,
    pub records: Vec<TaskRecord>,
    pub log: Vec<EpochLog>,
    pub accesses: Vec<DataAccess>,
}

fn settings(cfg: &RunConfig) -> TrainSettings {
    TrainSettings {
        lambda: cfg.lambda,
        epochs: cfg.epochs,
        lr: cfg.lr,
        cosine_decay: cfg.cosine_decay,
        r: cfg.r,
        m_pseudo: cfg.m_pseudo,
        seed: cfg.seed,
    }
}

fn class_rows(h: ArrayView2<'_, f64>, labels: &[usize], class_id: usize) -> Array2<f64> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class_id).collect();
    h.select(Axis(0), &rows)
}

/// Mean adapted feature of a task's training inputs under `adapter`.
pub fn compute_visual_prototype(backbone: &Backbone, adapter: &Adapter, x: ArrayView2<'_, f64>) -> Result<VisualPrototype> {
    if x.nrows() == 0 {
        return Err(SaefError::Empty("task data"));
    }
    let h = backbone.pre_activation(x);
    let feats = features_from_pre(backbone, adapter, h.view())?;
    VisualPrototype::leaf(mean_row(feats.view())?.to_vec())
}

/// Trains one adapter per task in arrival order. Raw samples of a task are
/// only touched while that task is current; afterwards only class statistics
/// and the first adapter's task prototype remain.
pub fn train_stream(world: &SyntheticWorld, cfg: &RunConfig) -> Result<TrainedStream> {
    cfg.validate()?;
    if world.d_in != cfg.d_in {
        return Err(SaefError::Config(format!("world has d_in = {}, config says {}", world.d_in, cfg.d_in)));
    }
    let backbone = Backbone::new(cfg.d_in, cfg.d, cfg.seed);
    let settings = settings(cfg);
    let mut stream = DataStream::new(world);
    let mut adapters: Vec<Adapter> = Vec::with_capacity(world.n_tasks());
    let mut heads = Vec::with_capacity(world.n_tasks());
    let mut class_stats: Vec<ClassStats> = Vec::new();
    let mut records = Vec::with_capacity(world.n_tasks());
    let mut log = Vec::new();

    for task in 0..world.n_tasks() {
        let (x, labels) = stream.train(task)?;
        let h = backbone.pre_activation(x.view());
        let prev_ups: Vec<Array2<f64>> = adapters.iter().map(|a| a.up.clone()).collect();
        let trained = train_adapter(
            &backbone,
            &TaskTrainingInput { task, h: h.view(), labels: &labels, old_stats: &class_stats, prev_ups: &prev_ups },
            &settings,
        )?;
        if let (Some(first), Some(last)) = (trained.log.first(), trained.log.last()) {
            log::info!(
                "task {task}: loss {:.4} -> {:.4} (cls {:.4}, orth {:.4})",
                first.loss,
                last.loss,
                last.cls,
                last.orth
            );
        }
        log.extend(trained.log);
        adapters.push(trained.adapter);
        heads.push(trained.head);

        let visual = compute_visual_prototype(&backbone, &adapters[0], x.view())?;
        for &c in &world.tasks[task] {
            class_stats.push(ClassStats::from_activations(c, class_rows(h.view(), &labels, c).view())?);
        }
        records.push(TaskRecord {
            task_id: task,
            class_ids: world.tasks[task].clone(),
            params: adapters[task].to_params()?,
            semantic: world.task_semantics[task].clone(),
            visual,
        });
        stream.advance();
    }
    Ok(TrainedStream { backbone, adapters, heads, class_stats, records, log, accesses: stream.accesses() })
}

/// A test input as the experts see it: the frozen backbone has already been
/// applied once, so each expert only adds its own residual.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub h: Array1<f64>,
    pub frozen: Array1<f64>,
}

/// Which classifier head scores an expert's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// The head of the current stage, aligned to its adapter, for every expert.
    #[default]
    Shared,
    /// Each expert gets its own head, re-estimated from the stored class
    /// statistics through that expert's adapter.
    PerExpert,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Shared => "shared",
            HeadMode::PerExpert => "per_expert",
        })
    }
}

impl FromStr for HeadMode {
    type Err = SaefError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shared" => Ok(HeadMode::Shared),
            "per_expert" | "per-expert" => Ok(HeadMode::PerExpert),
            other => Err(SaefError::Config(format!("unknown head mode '{other}'"))),
        }
    }
}

/// Scores expert nodes: `frozen + residual` of the node's adapter against a
/// head.
pub struct SimEvaluator<'a> {
    adapters: Vec<Option<Adapter>>,
    shared: &'a PrototypeClassifier,
    own: Vec<Option<PrototypeClassifier>>,
}

impl<'a> SimEvaluator<'a> {
    /// Decodes the adapter of every node in `nodes`; all of them are scored
    /// with `head`.
    pub fn new(nodes: &[ExpertNode], d: usize, r: usize, head: &'a PrototypeClassifier) -> Result<Self> {
        let len = nodes.iter().map(|n| n.id + 1).max().unwrap_or(0);
        let mut adapters = vec![None; len];
        for n in nodes {
            adapters[n.id] = Some(Adapter::from_params(&n.params, d, r)?);
        }
        Ok(Self { adapters, shared: head, own: Vec::new() })
    }

    /// Like [`SimEvaluator::new`], but every node is scored with a head
    /// re-aligned to its own adapter from `stats`. `head` fixes the class
    /// order.
    pub fn per_expert(
        nodes: &[ExpertNode],
        backbone: &Backbone,
        r: usize,
        head: &'a PrototypeClassifier,
        stats: &[ClassStats],
        m_pseudo: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut ev = Self::new(nodes, backbone.d(), r, head)?;
        let own = ev
            .adapters
            .par_iter()
            .map(|a| {
                a.as_ref().map(|a| align_classifier(stats, &[], backbone, a, m_pseudo, seed)).transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(h) = own.iter().flatten().find(|h| h.class_ids != head.class_ids) {
            return Err(SaefError::LengthMismatch { expected: head.n_classes(), actual: h.n_classes() });
        }
        ev.own = own;
        Ok(ev)
    }
}

impl ExpertEvaluator for SimEvaluator<'_> {
    type Sample = PreparedSample;

    fn logits(&self, node: &ExpertNode, sample: &PreparedSample) -> Result<Vec<f64>> {
        let adapter = self.adapters.get(node.id).and_then(Option::as_ref).ok_or(SaefError::UnknownNode(node.id))?;
        let features = &sample.frozen + &adapter.residual_one(sample.h.view());
        let head = self.own.get(node.id).and_then(Option::as_ref).unwrap_or(self.shared);
        Ok(head.logits(features.view()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Saef,
    Flat,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Saef => "saef",
            Method::Flat => "flat",
        })
    }
}

impl FromStr for Method {
    type Err = SaefError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saef" => Ok(Method::Saef),
            "flat" => Ok(Method::Flat),
            other => Err(SaefError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub method: Method,
    pub tau: f64,
    pub tau_e: f64,
    pub k_policy: KPolicy,
    pub strategy: MergeStrategy,
    pub head: HeadMode,
    pub m_pseudo: usize,
    pub seed: u64,
}

impl EvalSettings {
    pub fn from_config(cfg: &RunConfig, method: Method) -> Self {
        Self {
            method,
            tau: cfg.tau,
            tau_e: cfg.tau_e,
            k_policy: cfg.k_policy,
            strategy: cfg.strategy,
            head: cfg.head,
            m_pseudo: cfg.m_pseudo,
            seed: cfg.seed,
        }
    }
}

/// Outcome of one final-stage test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: usize,
    pub task: usize,
    pub predicted: usize,
    pub truth: usize,
    pub evaluations: usize,
    /// Path length in each tree; empty for the flat baseline.
    pub depths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: AccuracyMatrix,
    pub abar: f64,
    pub a_last: f64,
    /// Query cost at the final stage.
    pub cost: CostReport,
    /// Final-stage per-sample outcomes, in task then sample order.
    pub outcomes: Vec<SampleOutcome>,
    /// Hierarchy used at the final stage (SAEF only).
    pub hierarchy: Option<ForestHierarchy>,
}

/// K policy usable on a prefix of `n` tasks.
fn stage_policy(policy: KPolicy, n: usize) -> KPolicy {
    match policy {
        KPolicy::Fixed(k) if k > n => KPolicy::Fixed(n),
        other => other,
    }
}

struct StageRun {
    accuracies: Vec<f64>,
    traces: Vec<InferenceTrace>,
    outcomes: Vec<SampleOutcome>,
}

fn run_stage(
    trained: &TrainedStream,
    tests: &[(Vec<PreparedSample>, Vec<usize>)],
    stage: usize,
    settings: &EvalSettings,
    hierarchy: Option<&ForestHierarchy>,
) -> Result<StageRun> {
    let head = &trained.heads[stage];
    let d = trained.backbone.d();
    let r = trained.adapters[0].r();
    let leaves: Vec<ExpertNode> = match hierarchy {
        Some(_) => Vec::new(),
        None => trained.records[..=stage]
            .iter()
            .enumerate()
            .map(|(i, t)| ExpertNode {
                id: i,
                params: t.params.clone(),
                prototype: Some(t.visual.clone()),
                children: None,
                height: 0,
                source_tasks: vec![t.task_id],
            })
            .collect(),
    };
    let nodes = hierarchy.map_or(&leaves[..], |h| &h.nodes[..]);
    let evaluator = match settings.head {
        HeadMode::Shared => SimEvaluator::new(nodes, d, r, head)?,
        HeadMode::PerExpert => {
            let seen: Vec<ClassStats> = trained
                .class_stats
                .iter()
                .filter(|s| head.index_of(s.class_id).is_some())
                .cloned()
                .collect();
            let seed = crate::rng::derive_seed(settings.seed, "expert-head", stage as u64);
            SimEvaluator::per_expert(nodes, &trained.backbone, r, head, &seen, settings.m_pseudo, seed)?
        }
    };
    let flat_experts: Vec<&ExpertNode> = leaves.iter().collect();

    let mut accuracies = Vec::with_capacity(stage + 1);
    let mut traces = Vec::new();
    let mut outcomes = Vec::new();
    let mut sample_id = 0;
    for (task, (samples, labels)) in tests.iter().enumerate().take(stage + 1) {
        let task_traces: Vec<InferenceTrace> = samples
            .par_iter()
            .map(|s| match hierarchy {
                Some(h) => adaptive_infer(h, s, &evaluator, settings.tau, settings.tau_e),
                None => flat_ensemble_infer(&flat_experts, s, &evaluator),
            })
            .collect::<Result<_>>()?;
        let mut correct = 0;
        for (trace, &truth) in task_traces.iter().zip(labels) {
            let predicted = head.class_ids[trace.prediction];
            correct += usize::from(predicted == truth);
            outcomes.push(SampleOutcome {
                sample_id,
                task,
                predicted,
                truth,
                evaluations: trace.evaluations,
                depths: trace.path_len_per_tree(),
            });
            sample_id += 1;
        }
        accuracies.push(correct as f64 / labels.len() as f64);
        traces.extend(task_traces);
    }
    Ok(StageRun { accuracies, traces, outcomes })
}

fn prepare_tests(trained: &TrainedStream, world: &SyntheticWorld) -> Result<Vec<(Vec<PreparedSample>, Vec<usize>)>> {
    let mut stream = DataStream::new(world);
    for _ in 1..world.n_tasks() {
        stream.advance();
    }
    (0..world.n_tasks())
        .map(|task| {
            let (x, y) = stream.test(task)?;
            let h = trained.backbone.pre_activation(x.view());
            let frozen = trained.backbone.frozen(h.view());
            let samples = h
                .rows()
                .into_iter()
                .zip(frozen.rows())
                .map(|(h, f)| PreparedSample { h: h.to_owned(), frozen: f.to_owned() })
                .collect();
            Ok((samples, y))
        })
        .collect()
}

/// Evaluates a trained stream stage by stage. At stage `i` the forest is
/// rebuilt from the first `i + 1` task records (SAEF) or the first `i + 1`
/// adapters are queried as a flat ensemble, always with the head of stage `i`.
/// `final_hierarchy`, when given, replaces the rebuilt forest at the last
/// stage.
pub fn evaluate_trained(
    trained: &TrainedStream,
    world: &SyntheticWorld,
    settings: &EvalSettings,
    final_hierarchy: Option<&ForestHierarchy>,
) -> Result<EvalResult> {
    let n_tasks = trained.records.len();
    if n_tasks == 0 || n_tasks != world.n_tasks() || trained.heads.len() != n_tasks {
        return Err(SaefError::Config("trained stream does not match the world".into()));
    }
    let tests = prepare_tests(trained, world)?;
    let mut accuracy = AccuracyMatrix::new();
    let mut last = None;
    for stage in 0..n_tasks {
        let is_last = stage + 1 == n_tasks;
        let hierarchy = match settings.method {
            Method::Flat => None,
            Method::Saef => match final_hierarchy {
                Some(h) if is_last => Some(h.clone()),
                _ => Some(build_hierarchy(
                    &trained.records[..=stage],
                    stage_policy(settings.k_policy, stage + 1),
                    settings.strategy,
                    settings.seed,
                )?),
            },
        };
        let run = run_stage(trained, &tests, stage, settings, hierarchy.as_ref())?;
        accuracy.push_row(run.accuracies.clone())?;
        if is_last {
            last = Some((run, hierarchy));
        }
    }
    let (run, hierarchy) = last.expect("at least one stage");
    let cost = match &hierarchy {
        Some(h) => cost_report(&run.traces, h.n_leaves(), h.n_trees())?,
        None => {
            let mean = run.traces.iter().map(|t| t.evaluations as f64).sum::<f64>() / run.traces.len() as f64;
            CostReport::flat(n_tasks, mean)
        }
    };
    Ok(EvalResult {
        abar: accuracy.average_incremental()?,
        a_last: accuracy.last()?,
        accuracy,
        cost,
        outcomes: run.outcomes,
        hierarchy,
    })
}

/// Trains on the whole stream and evaluates it with `method`.
pub fn evaluate_stream(world: &SyntheticWorld, cfg: &RunConfig, method: Method) -> Result<(TrainedStream, EvalResult)> {
    let trained = train_stream(world, cfg)?;
    let result = evaluate_trained(&trained, world, &EvalSettings::from_config(cfg, method), None)?;
    Ok((trained, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            tasks: 4,
            classes_per_task: 2,
            n_concepts: 2,
            d: 16,
            r: 4,
            samples_per_class: 20,
            epochs: 10,
            m_pseudo: 16,
            ..RunConfig::default()
        }
    }

    #[test]
    fn training_reads_each_task_once_while_current() {
        let cfg = small();
        let world = SyntheticWorld::generate(&cfg).unwrap();
        let trained = train_stream(&world, &cfg).unwrap();
        let train_reads: Vec<_> = trained.accesses.iter().filter(|a| a.split == Split::Train).collect();
        assert_eq!(train_reads.len(), 4);
        assert!(train_reads.iter().all(|a| a.stage == a.task));
        assert!(trained.accesses.iter().all(|a| a.split == Split::Train));
    }

    #[test]
    fn stream_refuses_past_and_future_training_data() {
        let world = SyntheticWorld::generate(&small()).unwrap();
        let mut s = DataStream::new(&world);
        assert!(s.train(1).is_err());
        s.train(0).unwrap();
        s.advance();
        assert!(s.train(0).is_err());
        assert!(s.test(0).is_ok());
        assert!(s.test(2).is_err());
    }

    #[test]
    fn first_task_has_no_orthogonality_term() {
        let cfg = small();
        let world = SyntheticWorld::generate(&cfg).unwrap();
        let trained = train_stream(&world, &cfg).unwrap();
        assert!(trained.log.iter().filter(|e| e.task == 0).all(|e| e.orth == 0.0));
        assert!(trained.log.iter().filter(|e| e.task == 1).all(|e| e.orth > 0.0));
        assert_eq!(trained.heads[3].n_classes(), 8);
        assert_eq!(trained.class_stats.len(), 8);
    }

    #[test]
    fn visual_prototype_definition() {
        let bb = Backbone::new(3, 5, 2);
        let adapter = Adapter::init(5, 2, 0.3, &mut crate::rng::stream(2, "t", 0));
        let one = ndarray::array![[0.5, -1.0, 2.0]];
        let p = compute_visual_prototype(&bb, &adapter, one.view()).unwrap();
        let f = features_from_pre(&bb, &adapter, bb.pre_activation(one.view()).view()).unwrap();
        assert_eq!(p.values(), f.row(0).to_vec().as_slice());
        let two = ndarray::array![[0.5, -1.0, 2.0], [1.0, 1.0, 0.0]];
        let f2 = features_from_pre(&bb, &adapter, bb.pre_activation(two.view()).view()).unwrap();
        let p2 = compute_visual_prototype(&bb, &adapter, two.view()).unwrap();
        for j in 0..5 {
            assert!((p2.values()[j] - (f2[[0, j]] + f2[[1, j]]) / 2.0).abs() < 1e-12);
        }
        let dup = ndarray::concatenate![Axis(0), two, two];
        let p3 = compute_visual_prototype(&bb, &adapter, dup.view()).unwrap();
        for j in 0..5 {
            assert!((p3.values()[j] - p2.values()[j]).abs() < 1e-12);
        }
        assert!(compute_visual_prototype(&bb, &adapter, Array2::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn flat_baseline_queries_every_adapter() {
        let cfg = small();
        let world = SyntheticWorld::generate(&cfg).unwrap();
        let (_, res) = evaluate_stream(&world, &cfg, Method::Flat).unwrap();
        assert_eq!(res.cost.mean_evaluations, 4.0);
        assert_eq!(res.accuracy.n_tasks(), 4);
        assert!(res.outcomes.iter().all(|o| o.evaluations == 4));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = small();
        let world = SyntheticWorld::generate(&cfg).unwrap();
        let trained = train_stream(&world, &cfg).unwrap();
        let s = EvalSettings::from_config(&cfg, Method::Saef);
        let a = evaluate_trained(&trained, &world, &s, None).unwrap();
        let b = evaluate_trained(&trained, &world, &s, None).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.outcomes, b.outcomes);
        a.hierarchy.as_ref().unwrap().validate().unwrap();
    }

    #[test]
    fn separable_world_is_learned() {
        let cfg = RunConfig {
            concept_separation: 40.0,
            class_spread: 8.0,
            sample_noise: 0.05,
            ..small()
        };
        let world = SyntheticWorld::generate(&cfg).unwrap();
        let (_, res) = evaluate_stream(&world, &cfg, Method::Saef).unwrap();
        assert!(res.abar > 0.95, "abar {}", res.abar);
    }
}
