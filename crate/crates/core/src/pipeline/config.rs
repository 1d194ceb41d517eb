//! Declarative run configuration.
//!
//! A config is resolved in three layers: the stage's defaults, then a JSON
//! document, then `dotted.key=value` overrides. Every key in the document or
//! an override must already exist in the defaults, so typos are rejected
//! instead of silently ignored.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::distill::LossWeights;
use crate::error::{Error, Result};
use crate::models::{preset, ArchSpec};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adamw {
        lr: f64,
        weight_decay: f64,
        betas: [f64; 2],
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adamw_default() -> Self {
        OptimizerConfig::Adamw {
            lr: 1e-3,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }

    /// The fine-tuning recipe for pretrained teachers.
    pub fn sgd_default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Adamw { lr, .. } | OptimizerConfig::Sgd { lr, .. } => *lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// Linear warmup then cosine decay to zero. `warmup_epochs: null`
    /// resolves to 5% of the run.
    Cosine { warmup_epochs: Option<f64> },
    /// Learning rate multiplied by `gamma` at each milestone, given as a
    /// fraction of the run.
    Step {
        warmup_epochs: Option<f64>,
        milestones: Vec<f64>,
        gamma: f64,
    },
}

impl ScheduleConfig {
    /// x0.1 at 60% and 80% of the run, no warmup.
    pub fn step_default() -> Self {
        ScheduleConfig::Step {
            warmup_epochs: Some(0.0),
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Preset name, see [`crate::models::preset`].
    pub arch: String,
    /// Full architecture; takes precedence over `arch` when present.
    pub arch_spec: Option<ArchSpec>,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Required for the student stage.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Optional warm start for the trained model.
    pub init_checkpoint: Option<PathBuf>,
    pub bn_momentum: f64,
    /// Threads used for per-sample data preparation.
    pub workers: usize,
    /// Abort on the first non-finite activation.
    pub finite_checks: bool,
    /// Record real elapsed seconds in the metrics CSV. When off the column
    /// is written as 0 so reruns produce identical files.
    pub log_wall_time: bool,
}

impl TrainConfig {
    /// Documented defaults for a stage: a 50-epoch teacher and an 800-epoch
    /// student, both AdamW with cosine decay. Teachers start from random
    /// weights, which the SGD fine-tuning recipe does not train.
    pub fn defaults(stage: Stage) -> Self {
        match stage {
            Stage::Teacher => TrainConfig {
                stage,
                arch: "teacher_pam_lrnet18".into(),
                arch_spec: None,
                optimizer: OptimizerConfig::adamw_default(),
                schedule: ScheduleConfig::Cosine { warmup_epochs: None },
                epochs: 50,
                batch_size: 32,
                input_size: 64,
                loss: LossWeights::supervised(0.1),
                augment: AugmentConfig::default(),
                seed: 0,
                teacher_checkpoint: None,
                init_checkpoint: None,
                bn_momentum: 0.1,
                workers: 1,
                finite_checks: false,
                log_wall_time: false,
            },
            Stage::Student => TrainConfig {
                stage,
                arch: "lrnet18".into(),
                arch_spec: None,
                optimizer: OptimizerConfig::adamw_default(),
                schedule: ScheduleConfig::Cosine { warmup_epochs: None },
                epochs: 800,
                batch_size: 32,
                input_size: 64,
                loss: LossWeights::default(),
                augment: AugmentConfig::default(),
                seed: 0,
                teacher_checkpoint: None,
                init_checkpoint: None,
                bn_momentum: 0.1,
                workers: 1,
                finite_checks: false,
                log_wall_time: false,
            },
        }
    }

    /// Architecture for a task with `num_classes` classes.
    pub fn arch_spec(&self, num_classes: usize) -> Result<ArchSpec> {
        let mut spec = match &self.arch_spec {
            Some(s) => s.clone(),
            None => preset(&self.arch, num_classes, self.input_size)?,
        };
        spec.set_task(num_classes, self.input_size);
        spec.build()?;
        Ok(spec)
    }

    pub fn warmup_epochs(&self) -> f64 {
        match &self.schedule {
            ScheduleConfig::Cosine { warmup_epochs } | ScheduleConfig::Step { warmup_epochs, .. } => {
                warmup_epochs.unwrap_or(0.05 * self.epochs as f64)
            }
        }
    }

    /// Fills defaults that depend on other fields.
    pub fn materialize(&mut self) {
        let w = self.warmup_epochs();
        match &mut self.schedule {
            ScheduleConfig::Cosine { warmup_epochs } | ScheduleConfig::Step { warmup_epochs, .. } => {
                *warmup_epochs = Some(w)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} outside [0, 1]", self.bn_momentum));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        match &self.optimizer {
            OptimizerConfig::Adamw {
                lr,
                weight_decay,
                betas,
                eps,
            } => {
                if !(*lr > 0.0) || *weight_decay < 0.0 || !(*eps > 0.0) || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
                    return bad(format!("invalid adamw settings {:?}", self.optimizer));
                }
            }
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                if !(*lr > 0.0) || *weight_decay < 0.0 || !(0.0..1.0).contains(momentum) {
                    return bad(format!("invalid sgd settings {:?}", self.optimizer));
                }
            }
        }
        let w = self.warmup_epochs();
        if !(0.0..=self.epochs as f64).contains(&w) {
            return bad(format!("warmup_epochs {w} outside [0, epochs]"));
        }
        if let ScheduleConfig::Step { milestones, gamma, .. } = &self.schedule {
            if milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || !(*gamma > 0.0) {
                return bad("step schedule milestones must be fractions and gamma positive".into());
            }
        }
        match self.stage {
            Stage::Teacher => {
                if self.loss.beta > 0.0 {
                    return bad(format!(
                        "teacher stage trains with cross-entropy only; loss.beta must be 0, got {}",
                        self.loss.beta
                    ));
                }
            }
            Stage::Student => {
                if self.teacher_checkpoint.is_none() {
                    return bad("student stage requires teacher_checkpoint".into());
                }
            }
        }
        if self.arch_spec.is_none() {
            preset(&self.arch, 2, self.input_size)?;
        }
        Ok(())
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Fully populated `optimizer` or `schedule` block of the given kind, so
/// that switching kinds keeps later field overrides valid.
fn kind_defaults(path: &str, kind: &Value) -> Option<Value> {
    let blocks = match path {
        "optimizer" => [OptimizerConfig::adamw_default(), OptimizerConfig::sgd_default()]
            .map(|o| serde_json::to_value(o).ok())
            .to_vec(),
        "schedule" => [ScheduleConfig::Cosine { warmup_epochs: None }, ScheduleConfig::step_default()]
            .map(|o| serde_json::to_value(o).ok())
            .to_vec(),
        _ => return None,
    };
    blocks.into_iter().flatten().find(|b| b.get("kind") == Some(kind))
}

/// Overlays `src` onto `dst`. Objects merge key by key and only known keys
/// are accepted. An object whose `kind` tag changes restarts from that
/// kind's defaults when it has any, and is otherwise replaced wholesale and
/// checked later by deserialization, as is a slot that was `null`.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(mut s)) => {
            if let Some(kind) = s.get("kind").filter(|k| Some(*k) != d.get("kind")).cloned() {
                match kind_defaults(path, &kind) {
                    Some(Value::Object(base)) => {
                        *d = base;
                        s.remove("kind");
                    }
                    _ => {
                        *d = s;
                        return Ok(());
                    }
                }
            }
            for (k, v) in s {
                let slot = d
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {:?}", join(path, &k))))?;
                merge(slot, v, &join(path, &k))?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let mut node = Value::Object(Map::new());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    // build {a: {b: {c: value}}} and merge it strictly
    let mut cursor = &mut node;
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let next = if last { parse_value(raw) } else { Value::Object(Map::new()) };
        cursor = cursor.as_object_mut().unwrap().entry(p.to_string()).or_insert(next);
    }
    merge(doc, node, "")
}

/// Layers an optional JSON document and then dotted overrides onto
/// `defaults`, rejecting keys `defaults` does not have.
pub fn resolve_layered<T: Serialize + DeserializeOwned>(defaults: &T, doc: Option<Value>, overrides: &[String]) -> Result<T> {
    let mut merged = serde_json::to_value(defaults)?;
    if let Some(doc) = doc {
        if !doc.is_object() {
            return Err(Error::Config("config document must be a JSON object".into()));
        }
        merge(&mut merged, doc, "")?;
    }
    for o in overrides {
        apply_override(&mut merged, o)?;
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

/// Resolves a run config from an optional JSON document and overrides.
///
/// The stage is read from an override, then the document; it selects the
/// defaults everything else is layered onto.
pub fn resolve_config(doc: Option<Value>, overrides: &[String]) -> Result<TrainConfig> {
    let stage_override = overrides.iter().rev().find_map(|o| o.strip_prefix("stage="));
    let stage_value = match stage_override {
        Some(s) => parse_value(s),
        None => doc
            .as_ref()
            .and_then(|d| d.get("stage").cloned())
            .ok_or_else(|| Error::Config("config does not name a stage (teacher or student)".into()))?,
    };
    let stage: Stage = serde_json::from_value(stage_value.clone())
        .map_err(|_| Error::Config(format!("unknown stage {stage_value}; expected \"teacher\" or \"student\"")))?;
    let mut cfg = resolve_layered(&TrainConfig::defaults(stage), doc, overrides)?;
    cfg.materialize();
    cfg.validate()?;
    Ok(cfg)
}
