//! Flat run configuration: JSON file, then `--key=value` overrides.

use std::path::Path;

use atg_core::entropy::{StepRule, DEFAULT_BINS, DEFAULT_WINDOWS};
use atg_core::eval::TrainConfig;
use atg_core::graph::{GraphSpec, ThresholdPolicy};
use atg_core::nn::{AdamConfig, LstmInput, ModelConfig};
use atg_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    Quantile,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sample_len: usize,
    pub stride: usize,
    pub windows: Vec<usize>,
    /// scan step; `null` means half the window
    pub scan_step: Option<usize>,
    pub bins: usize,
    /// recordings used by the window scan
    pub scan_recordings: usize,
    /// fixed window; `null` runs the scan
    pub window: Option<usize>,
    /// segmentation step inside a sample; `null` means half the window
    pub graph_step: Option<usize>,
    pub tau_policy: TauPolicy,
    pub tau_quantile: f64,
    pub tau: f64,
    pub band_radius: Option<usize>,

    pub gat_layers: usize,
    pub heads: usize,
    pub hidden_per_head: usize,
    pub pooled_dim: usize,
    pub final_average: bool,
    pub seq_len: usize,
    pub lstm_hidden: usize,
    pub leaky_slope: f64,
    pub elu_alpha: f64,
    pub lstm_input: LstmInput,
    pub dropout: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub stratified: bool,
    /// also fit one model on every sample after cross-validation
    pub final_fit: bool,
    pub seed: u64,
    pub threads: usize,

    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 2);
        let a = AdamConfig::default();
        let t = TrainConfig::default();
        Self {
            sample_len: 1024,
            stride: 512,
            windows: DEFAULT_WINDOWS.to_vec(),
            scan_step: None,
            bins: DEFAULT_BINS,
            scan_recordings: 20,
            window: None,
            graph_step: None,
            tau_policy: TauPolicy::Quantile,
            tau_quantile: 0.5,
            tau: 0.5,
            band_radius: None,
            gat_layers: m.gat_layers,
            heads: m.heads,
            hidden_per_head: m.hidden_per_head,
            pooled_dim: m.pooled_dim,
            final_average: m.final_average,
            seq_len: m.seq_len,
            lstm_hidden: m.lstm_hidden,
            leaky_slope: m.leaky_slope,
            elu_alpha: m.elu_alpha,
            lstm_input: m.lstm_input,
            dropout: m.dropout,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            weight_decay: a.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            folds: 5,
            stratified: true,
            final_fit: true,
            seed: 0,
            threads: 1,
            synthetic_classes: 3,
            synthetic_per_class: 30,
            synthetic_seed: 7,
        }
    }
}

/// Every key the document accepts.
pub fn config_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the file at `path`, then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match serde_json::to_value(Self::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let file: Map<String, Value> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            for (k, v) in file {
                if !doc.contains_key(&k) {
                    return Err(Error::Config(format!("unknown config key `{k}` in {}", p.display())));
                }
                doc.insert(k, v);
            }
        }
        for (k, raw) in overrides {
            let key = k.replace('-', "_");
            if !doc.contains_key(&key) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            doc.insert(key, parse_value(raw));
        }
        let cfg: Self =
            serde_json::from_value(Value::Object(doc)).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sample_len == 0 || self.stride == 0 {
            return fail("sample_len and stride must be positive".into());
        }
        if self.windows.is_empty() || self.windows.iter().any(|&w| w < 2 || w > self.sample_len) {
            return fail(format!("window candidates must lie in [2, {}]", self.sample_len));
        }
        if let Some(w) = self.window {
            if w < 2 || w > self.sample_len {
                return fail(format!("window {w} outside [2, {}]", self.sample_len));
            }
        }
        if self.scan_step == Some(0) || self.graph_step == Some(0) {
            return fail("steps must be positive".into());
        }
        if self.bins < 2 {
            return fail("bins must be at least 2".into());
        }
        if self.scan_recordings == 0 {
            return fail("scan_recordings must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau_quantile) {
            return fail(format!("tau_quantile {} outside [0, 1]", self.tau_quantile));
        }
        if !(self.tau >= 0.0) {
            return fail(format!("tau {} must be non-negative", self.tau));
        }
        if self.folds < 2 {
            return fail("folds must be at least 2".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("optimizer settings out of range".into());
        }
        if self.threads == 0 {
            return fail("threads must be positive".into());
        }
        // dimension chain with a placeholder input width
        self.model_config(self.window.unwrap_or(self.windows[0]), 2).validate()
    }

    pub fn scan_step_rule(&self) -> StepRule {
        self.scan_step.map_or(StepRule::HalfWindow, StepRule::Fixed)
    }

    pub fn graph_spec(&self, window: usize) -> GraphSpec {
        GraphSpec {
            window,
            step: self.graph_step.unwrap_or((window / 2).max(1)),
            policy: match self.tau_policy {
                TauPolicy::Quantile => ThresholdPolicy::Quantile(self.tau_quantile),
                TauPolicy::Fixed => ThresholdPolicy::Fixed(self.tau),
            },
            band_radius: self.band_radius,
        }
    }

    pub fn model_config(&self, in_features: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            in_features,
            classes,
            gat_layers: self.gat_layers,
            heads: self.heads,
            hidden_per_head: self.hidden_per_head,
            pooled_dim: self.pooled_dim,
            final_average: self.final_average,
            seq_len: self.seq_len,
            lstm_hidden: self.lstm_hidden,
            leaky_slope: self.leaky_slope,
            elu_alpha: self.elu_alpha,
            lstm_input: self.lstm_input,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            dropout: self.dropout,
            seed: self.seed,
        }
    }
}
