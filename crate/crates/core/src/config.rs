//! Run configuration: a flat `key = value` file with command-line overrides.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaefError};
use crate::forest::{KPolicy, MergeStrategy};
use crate::simulator::pipeline::HeadMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Number of incremental tasks `T`.
    pub tasks: usize,
    pub classes_per_task: usize,
    pub n_concepts: usize,
    pub d_in: usize,
    /// Backbone feature width.
    pub d: usize,
    /// Adapter bottleneck width.
    pub r: usize,
    /// Semantic embedding width.
    pub d_s: usize,
    pub samples_per_class: usize,
    pub concept_separation: f64,
    pub class_spread: f64,
    pub sample_noise: f64,
    pub semantic_separation: f64,
    pub semantic_noise: f64,
    /// Weight of the orthogonality penalty.
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    /// Fusion temperature.
    pub tau: f64,
    /// Early-exit entropy threshold (nats).
    pub tau_e: f64,
    pub k_policy: KPolicy,
    pub strategy: MergeStrategy,
    pub head: HeadMode,
    /// Pseudo-features drawn per old class during alignment.
    pub m_pseudo: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1993,
            tasks: 10,
            classes_per_task: 5,
            n_concepts: 2,
            d_in: 16,
            d: 64,
            r: 16,
            d_s: 16,
            samples_per_class: 50,
            concept_separation: 32.0,
            class_spread: 4.0,
            sample_noise: 4.0,
            semantic_separation: 20.0,
            semantic_noise: 0.5,
            lambda: 0.1,
            epochs: 60,
            lr: 0.05,
            cosine_decay: true,
            tau: 1.0,
            tau_e: 1.0,
            k_policy: KPolicy::Auto,
            strategy: MergeStrategy::Balanced,
            head: HeadMode::PerExpert,
            m_pseudo: 64,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "tasks",
    "classes_per_task",
    "n_concepts",
    "d_in",
    "d",
    "r",
    "d_s",
    "samples_per_class",
    "concept_separation",
    "class_spread",
    "sample_noise",
    "semantic_separation",
    "semantic_noise",
    "lambda",
    "epochs",
    "lr",
    "cosine_decay",
    "tau",
    "tau_e",
    "k_policy",
    "strategy",
    "head",
    "m_pseudo",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SaefError::Config(format!("invalid value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Sets one field from its textual form. `T`, `K` and `tau-e` style
    /// spellings are accepted as aliases.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "seed" => self.seed = parse(&key, value)?,
            "tasks" | "T" => self.tasks = parse(&key, value)?,
            "classes_per_task" => self.classes_per_task = parse(&key, value)?,
            "n_concepts" => self.n_concepts = parse(&key, value)?,
            "d_in" => self.d_in = parse(&key, value)?,
            "d" => self.d = parse(&key, value)?,
            "r" => self.r = parse(&key, value)?,
            "d_s" => self.d_s = parse(&key, value)?,
            "samples_per_class" => self.samples_per_class = parse(&key, value)?,
            "concept_separation" => self.concept_separation = parse(&key, value)?,
            "class_spread" => self.class_spread = parse(&key, value)?,
            "sample_noise" => self.sample_noise = parse(&key, value)?,
            "semantic_separation" => self.semantic_separation = parse(&key, value)?,
            "semantic_noise" => self.semantic_noise = parse(&key, value)?,
            "lambda" => self.lambda = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "cosine_decay" => self.cosine_decay = parse(&key, value)?,
            "tau" => self.tau = parse(&key, value)?,
            "tau_e" => self.tau_e = parse(&key, value)?,
            "k_policy" | "k" | "K" => self.k_policy = value.parse()?,
            "strategy" => self.strategy = value.parse()?,
            "head" => self.head = value.parse()?,
            "m_pseudo" | "M" => self.m_pseudo = parse(&key, value)?,
            other => return Err(SaefError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values; blank lines
    /// and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SaefError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_kv(&std::fs::read_to_string(path)?)
    }

    /// Renders the configuration in the same `key=value` form `parse_kv` reads.
    pub fn to_kv(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in KEYS {
            let field = &v[*key];
            let text = match key {
                &"k_policy" => self.k_policy.to_string(),
                &"strategy" => self.strategy.to_string(),
                &"head" => self.head.to_string(),
                _ => field.to_string().trim_matches('"').to_string(),
            };
            let _ = writeln!(out, "{key}={text}");
        }
        out
    }

    pub fn classes_per_concept(&self) -> usize {
        self.tasks * self.classes_per_task / self.n_concepts.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("n_concepts", self.n_concepts),
            ("d_in", self.d_in),
            ("d", self.d),
            ("r", self.r),
            ("d_s", self.d_s),
            ("m_pseudo", self.m_pseudo),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SaefError::Config(format!("{name} must be positive")));
            }
        }
        if self.samples_per_class < 2 {
            return Err(SaefError::Config("samples_per_class must be at least 2".into()));
        }
        if (self.tasks * self.classes_per_task) % self.n_concepts != 0 {
            return Err(SaefError::Config(format!(
                "{} tasks x {} classes cannot be split evenly over {} concepts",
                self.tasks, self.classes_per_task, self.n_concepts
            )));
        }
        if !(self.tau > 0.0) {
            return Err(SaefError::Config("tau must be > 0".into()));
        }
        if !(self.tau_e >= 0.0) {
            return Err(SaefError::Config("tau_e must be >= 0".into()));
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(SaefError::Config("lr must be > 0 and lambda >= 0".into()));
        }
        for (name, v) in [
            ("concept_separation", self.concept_separation),
            ("class_spread", self.class_spread),
            ("sample_noise", self.sample_noise),
            ("semantic_separation", self.semantic_separation),
            ("semantic_noise", self.semantic_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SaefError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if let KPolicy::Fixed(k) = self.k_policy {
            if k > self.tasks {
                return Err(SaefError::Config(format!("k = {k} exceeds the number of tasks")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("tau-e", "1.5").unwrap();
        cfg.set("k", "flat").unwrap();
        cfg.set("strategy", "unlimited").unwrap();
        let back = RunConfig::parse_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_with_comments() {
        let cfg = RunConfig::parse_kv("# run\nseed = 7\n\ntasks=4 # four\nk_policy=fixed:2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tasks, 4);
        assert_eq!(cfg.k_policy, KPolicy::Fixed(2));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse_kv("nonsense").is_err());
        assert!(RunConfig::parse_kv("colour=blue").is_err());
        assert!(RunConfig::parse_kv("tasks=many").is_err());
        let mut cfg = RunConfig::default();
        cfg.tasks = 0;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { tau: 0.0, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { tasks: 3, classes_per_task: 3, n_concepts: 2, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        RunConfig::default().validate().unwrap();
    }
}
