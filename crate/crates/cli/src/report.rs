//! CSV and summary rendering.

use std::io::Write;
use std::path::Path;

use saef_core::config::RunConfig;
use saef_core::simulator::pipeline::{EvalResult, Method};
use saef_core::simulator::training::EpochLog;

use crate::CliResult;

pub const METRICS_HEADER: [&str; 10] =
    ["run_id", "method", "K", "tau", "tau_e", "abar", "a_t", "mean_depth", "theo_speedup", "mean_evals"];

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: Method,
    pub k: usize,
    pub tau: f64,
    pub tau_e: f64,
    pub abar: f64,
    pub a_t: f64,
    pub mean_depth: f64,
    pub speedup: f64,
    pub mean_evals: f64,
}

impl MetricsRow {
    pub fn new(run_id: &str, method: Method, cfg: &RunConfig, r: &EvalResult) -> Self {
        Self {
            run_id: run_id.to_string(),
            method,
            k: r.cost.n_trees,
            tau: cfg.tau,
            tau_e: cfg.tau_e,
            abar: r.abar,
            a_t: r.a_last,
            mean_depth: r.cost.mean_depth,
            speedup: r.cost.theoretical_speedup,
            mean_evals: r.cost.mean_evaluations,
        }
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.run_id.clone(),
            self.method.to_string(),
            self.k.to_string(),
            num(self.tau),
            num(self.tau_e),
            num(self.abar),
            num(self.a_t),
            num(self.mean_depth),
            num(self.speedup),
            num(self.mean_evals),
        ]
    }

    pub fn summary(&self) -> String {
        format!(
            "ABAR={:.4} AT={:.4} DEPTH={:.3} SPEEDUP={:.3} EVALS={:.3}",
            self.abar, self.a_t, self.mean_depth, self.speedup, self.mean_evals
        )
    }
}

fn writer(path: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

/// Writes metric rows to `path`, or to stdout when no path is given.
pub fn write_metrics(path: Option<&Path>, rows: &[MetricsRow]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Mean accuracy after each task, the running average of those means, and a
/// closing row with the final accuracy and query cost.
pub fn write_per_task(path: &Path, r: &EvalResult) -> CliResult<()> {
    let mut w = writer(Some(path))?;
    w.write_record(["task_idx", "acc_after_task", "abar_running", "mean_depth", "theo_speedup"])?;
    let mut running = 0.0;
    for stage in 0..r.accuracy.n_tasks() {
        let acc = r.accuracy.stage_mean(stage).expect("stage in range");
        running += acc;
        w.write_record([stage.to_string(), num(acc), num(running / (stage + 1) as f64), String::new(), String::new()])?;
    }
    w.write_record([
        "final".to_string(),
        num(r.a_last),
        num(r.abar),
        num(r.cost.mean_depth),
        num(r.cost.theoretical_speedup),
    ])?;
    w.flush()?;
    Ok(())
}

/// One row per final-stage test sample.
pub fn write_traces(path: &Path, r: &EvalResult) -> CliResult<()> {
    let k = r.outcomes.iter().map(|o| o.depths.len()).max().unwrap_or(0);
    let mut w = writer(Some(path))?;
    let mut header: Vec<String> = ["sample_id", "pred", "true", "n_eval"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=k).map(|i| format!("depth_tree_{i}")));
    w.write_record(&header)?;
    for o in &r.outcomes {
        let mut rec = vec![o.sample_id.to_string(), o.predicted.to_string(), o.truth.to_string(), o.evaluations.to_string()];
        rec.extend((0..k).map(|i| o.depths.get(i).map_or(String::new(), ToString::to_string)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> CliResult<()> {
    let mut w = writer(Some(path))?;
    w.write_record(["task", "epoch", "loss", "cls", "orth"])?;
    for e in log {
        w.write_record([e.task.to_string(), e.epoch.to_string(), format!("{:.9}", e.loss), format!("{:.9}", e.cls), format!("{:.9}", e.orth)])?;
    }
    w.flush()?;
    Ok(())
}
