use std::path::Path;

use saef_core::bundle::ExpertBundle;
use saef_core::config::RunConfig;
use saef_core::forest::{build_hierarchy, KPolicy};
use saef_core::simulator::pipeline::{evaluate_trained, train_stream, EvalResult, EvalSettings, Method};
use saef_core::simulator::SyntheticWorld;

use crate::report::{self, MetricsRow};
use crate::{CliError, CliResult, ConfigArgs, SweepParam};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Layers `--config` and the individual flags over `base`.
fn resolve(base: RunConfig, args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        cfg.apply_kv(&std::fs::read_to_string(path)?)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    if let Some(tau_e) = args.tau_e {
        cfg.tau_e = tau_e;
    }
    if let Some(k) = &args.k {
        cfg.k_policy = k.parse()?;
    }
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The world in a bundle is fixed; a configuration that describes a different
/// one is rejected.
fn check_world(cfg: &RunConfig, world: &SyntheticWorld) -> CliResult<()> {
    let classes: usize = world.tasks.iter().map(Vec::len).sum();
    if cfg.tasks != world.n_tasks() || cfg.d_in != world.d_in || cfg.d_s != world.d_s || cfg.tasks * cfg.classes_per_task != classes {
        return Err(usage("configuration does not describe the world stored in the bundle"));
    }
    Ok(())
}

fn load(path: &Path) -> CliResult<ExpertBundle> {
    Ok(ExpertBundle::load(path)?)
}

pub fn generate(args: &ConfigArgs, out: &Path) -> CliResult<()> {
    let cfg = resolve(RunConfig::default(), args)?;
    let world = SyntheticWorld::generate(&cfg)?;
    let bundle = ExpertBundle::from_world(&cfg, world);
    bundle.save(out)?;
    println!("generated {} tasks x {} classes, {} concepts -> {}", cfg.tasks, cfg.classes_per_task, cfg.n_concepts, out.display());
    Ok(())
}

pub fn train(input: &Path, args: &ConfigArgs, out: &Path, log_csv: Option<&Path>) -> CliResult<()> {
    let mut bundle = load(input)?;
    let cfg = resolve(bundle.config.clone(), args)?;
    check_world(&cfg, &bundle.world)?;
    let trained = train_stream(&bundle.world, &cfg)?;
    bundle.attach_training(&cfg, &trained)?;
    bundle.save(out)?;
    for task in 0..trained.adapters.len() {
        let epochs: Vec<_> = trained.log.iter().filter(|e| e.task == task).collect();
        if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
            println!(
                "task {task}: loss {:.6} -> {:.6}  cls {:.6}  orth {:.6}",
                first.loss, last.loss, last.cls, last.orth
            );
        }
    }
    if let Some(path) = log_csv {
        report::write_training_log(path, &trained.log)?;
    }
    Ok(())
}

pub fn build(input: &Path, args: &ConfigArgs, out: &Path) -> CliResult<()> {
    let mut bundle = load(input)?;
    if !bundle.is_trained() {
        return Err(CliError::Core(saef_core::SaefError::Bundle("bundle has no trained adapters; run train first".into())));
    }
    let cfg = resolve(bundle.config.clone(), args)?;
    let records = bundle.task_records()?;
    let forest = build_hierarchy(&records, cfg.k_policy, cfg.strategy, cfg.seed)?;
    println!("K*={}", forest.n_trees());
    let heights: Vec<String> = forest.tree_heights().iter().map(ToString::to_string).collect();
    println!("tree_heights={}", heights.join(","));
    for (k, s) in &forest.silhouettes {
        println!("silhouette k={k} {s:.6}");
    }
    bundle.config = cfg;
    bundle.hierarchy = Some(forest);
    bundle.save(out)?;
    Ok(())
}

pub struct EvalOutputs<'a> {
    pub csv: Option<&'a Path>,
    pub per_task: Option<&'a Path>,
    pub traces: Option<&'a Path>,
}

fn run_eval(bundle: &ExpertBundle, cfg: &RunConfig, method: Method, use_stored: bool) -> CliResult<EvalResult> {
    let trained = bundle.trained_stream()?;
    let mut settings = EvalSettings::from_config(cfg, method);
    let stored = match (method, use_stored) {
        (Method::Saef, true) => {
            let h = bundle
                .hierarchy
                .as_ref()
                .ok_or_else(|| CliError::Core(saef_core::SaefError::Bundle("bundle has no hierarchy; run build first".into())))?;
            settings.k_policy = h.k_policy;
            settings.strategy = h.strategy;
            Some(h)
        }
        _ => None,
    };
    Ok(evaluate_trained(&trained, &bundle.world, &settings, stored)?)
}

pub fn evaluate(input: &Path, args: &ConfigArgs, outputs: EvalOutputs<'_>, run_id: &str, flat: bool) -> CliResult<()> {
    let bundle = load(input)?;
    let cfg = resolve(bundle.config.clone(), args)?;
    let method = if flat { Method::Flat } else { Method::Saef };
    let result = run_eval(&bundle, &cfg, method, true)?;
    let row = MetricsRow::new(run_id, method, &cfg, &result);
    if let Some(path) = outputs.csv {
        report::write_metrics(Some(path), std::slice::from_ref(&row))?;
    }
    if let Some(path) = outputs.per_task {
        report::write_per_task(path, &result)?;
    }
    if let Some(path) = outputs.traces {
        report::write_traces(path, &result)?;
    }
    println!("{}", row.summary());
    Ok(())
}

fn parse_k(value: &str, tasks: usize) -> CliResult<KPolicy> {
    if value == "T" {
        return Ok(KPolicy::Flat);
    }
    let policy: KPolicy = value.parse()?;
    if let KPolicy::Fixed(k) = policy {
        if k > tasks {
            return Err(usage(format!("k = {k} exceeds the {tasks} tasks")));
        }
    }
    Ok(policy)
}

pub fn sweep(
    input: &Path,
    args: &ConfigArgs,
    param: SweepParam,
    values: &[String],
    out: Option<&Path>,
    run_id: &str,
) -> CliResult<()> {
    let bundle = load(input)?;
    let base = resolve(bundle.config.clone(), args)?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        let float = |v: &str| v.trim().parse::<f64>().map_err(|_| usage(format!("invalid {param:?} value '{v}'")));
        let use_stored = match param {
            SweepParam::Tau => {
                cfg.tau = float(value)?;
                true
            }
            SweepParam::TauE => {
                cfg.tau_e = float(value)?;
                true
            }
            SweepParam::K => {
                cfg.k_policy = parse_k(value.trim(), cfg.tasks)?;
                false
            }
        };
        cfg.validate()?;
        let use_stored = use_stored && bundle.hierarchy.is_some();
        if !use_stored {
            log::info!("rebuilding hierarchy for {param:?} = {value}");
        }
        let result = run_eval(&bundle, &cfg, Method::Saef, use_stored)?;
        let mut row = MetricsRow::new(run_id, Method::Saef, &cfg, &result);
        if param == SweepParam::K {
            row.run_id = format!("{run_id}:k={}", value.trim());
        }
        rows.push(row);
    }
    report::write_metrics(out, &rows)?;
    Ok(())
}
