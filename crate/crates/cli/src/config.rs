//! Flat key-value config files: one `key = value` per line, `#` comments.
//! Parse errors name the offending key and line.

use std::collections::HashMap;
use std::path::Path;

use nca_core::model::NcaConfig;
use nca_core::train::{LossKind, TrainPlan};

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub key: String,
    pub detail: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config line {}: key '{}': {}", self.line, self.key, self.detail)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug)]
pub struct RunConfig {
    pub model: NcaConfig,
    pub plan: TrainPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: NcaConfig::standard(), plan: TrainPlan::default() }
    }
}

const KNOWN_KEYS: [&str; 13] = [
    "channels",
    "steps",
    "update_hidden",
    "classifier_hidden",
    "num_classes",
    "fire_rate",
    "batch_size",
    "epochs",
    "val_fraction",
    "loss",
    "augment",
    "lr0",
    "lr_decay",
];

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError {
                line: lineno,
                key: line.to_string(),
                detail: "expected 'key = value'".into(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let err = |detail: String| ConfigError { line: lineno, key: key.to_string(), detail };
        if !KNOWN_KEYS.contains(&key) {
            return Err(err(format!("unknown key (known keys: {})", KNOWN_KEYS.join(", "))));
        }
        if let Some(first) = seen.insert(key.to_string(), lineno) {
            return Err(err(format!("duplicate key, first set on line {first}")));
        }
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| err(format!("expected a non-negative integer, got '{v}'")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>().map_err(|_| err(format!("expected a number, got '{v}'")))
        };
        match key {
            "channels" => cfg.model.channels = parse_usize(value)?,
            "steps" => cfg.model.steps = parse_usize(value)?,
            "update_hidden" => cfg.model.update_hidden = parse_usize(value)?,
            "classifier_hidden" => cfg.model.classifier_hidden = parse_usize(value)?,
            "num_classes" => cfg.model.num_classes = parse_usize(value)?,
            "fire_rate" => cfg.model.fire_rate = parse_f64(value)?,
            "batch_size" => cfg.plan.batch_size = parse_usize(value)?,
            "epochs" => cfg.plan.epochs = parse_usize(value)?,
            "val_fraction" => cfg.plan.val_fraction = parse_f64(value)?,
            "lr0" => cfg.plan.hyper.lr0 = parse_f64(value)?,
            "lr_decay" => cfg.plan.hyper.decay = parse_f64(value)?,
            "loss" => {
                cfg.plan.loss = match value {
                    "softmax" => LossKind::SoftmaxCrossEntropy,
                    "sigmoid-bce" => LossKind::SigmoidBce,
                    other => {
                        return Err(err(format!(
                            "expected 'softmax' or 'sigmoid-bce', got '{other}'"
                        )))
                    }
                }
            }
            "augment" => {
                cfg.plan.augment = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(err(format!("expected 'true' or 'false', got '{other}'"))),
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}
