//! Training configuration and the flat `key = value` config file.
//!
//! A config file holds one assignment per line in TOML syntax, for example
//!
//! ```text
//! iterations = 1500
//! enable_su = true
//! seeds = [0, 1, 2, 3, 4]
//! depth = 16            # generator keys may share the file
//! ```
//!
//! Keys belong either to [`TrainConfig`] or to
//! [`GeneratorConfig`](crate::synth::GeneratorConfig); anything else is a
//! config error. Missing keys take their defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Architecture;
use crate::synth::GeneratorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of optimizer steps; 0 writes the initial checkpoint only.
    pub iterations: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied every `decay_period` steps.
    pub lr_decay: f64,
    pub decay_period: usize,
    pub momentum: f64,
    pub ema_decay: f64,
    /// Monte-Carlo dropout passes for the uncertainty map.
    pub mc_passes: usize,
    /// Temperature of the warm-up ramp in the confident ratio.
    pub tau_sched: f64,
    /// Temperature of the feature contrast loss.
    pub tau_contrast: f64,
    /// Negatives per positive class.
    pub k_neg: usize,
    /// Initial age parameter.
    pub alpha: f64,
    /// Per-step growth factor of the age parameter.
    pub delta: f64,
    /// Confident-ratio factor on the warm branch.
    pub warm_cap: f64,
    /// Seed of a single run.
    pub seed: u64,
    /// Seeds of the ablation.
    pub seeds: Vec<u64>,
    pub enable_su: bool,
    pub enable_sc: bool,
    /// Held-out evaluation interval in steps.
    pub eval_period: usize,
    /// Registration weight at the annotated slice.
    pub fusion_w0: f64,
    /// Slice distance at which the registration weight halves; depth/4 when absent.
    pub fusion_half_life: Option<f64>,
    /// Weak-view intensity noise as a fraction of the image range.
    pub weak_noise: f64,
    pub base_channels: usize,
    pub deep_channels: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    /// Loss weights. At 1 the objective is the plain sum `L_s + L_u + L_bf`.
    pub weight_s: f64,
    pub weight_u: f64,
    pub weight_bf: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            lr0: 0.01,
            lr_decay: 0.1,
            decay_period: 625,
            momentum: 0.9,
            ema_decay: 0.99,
            mc_passes: 8,
            tau_sched: 10.0,
            tau_contrast: 0.5,
            k_neg: 64,
            alpha: 0.1,
            delta: 1.01,
            warm_cap: 0.1,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            enable_su: true,
            enable_sc: true,
            eval_period: 250,
            fusion_w0: 0.8,
            fusion_half_life: None,
            weak_noise: 0.05,
            base_channels: 4,
            deep_channels: 8,
            embed_dim: 16,
            dropout: 0.2,
            weight_s: 1.0,
            weight_u: 1.0,
            weight_bf: 1.0,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("tau_sched", self.tau_sched),
            ("tau_contrast", self.tau_contrast),
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("warm_cap", self.warm_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("decay_period", self.decay_period),
            ("mc_passes", self.mc_passes),
            ("eval_period", self.eval_period),
            ("base_channels", self.base_channels),
            ("deep_channels", self.deep_channels),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.iterations > 0 && self.decay_period > self.iterations {
            return Err(config_err(format!(
                "decay_period {} exceeds iterations {}",
                self.decay_period, self.iterations
            )));
        }
        for (name, v) in [("momentum", self.momentum), ("ema_decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.fusion_w0) {
            return Err(config_err(format!("fusion_w0 must lie in [0, 1], got {}", self.fusion_w0)));
        }
        if let Some(h) = self.fusion_half_life {
            if !(h > 0.0) {
                return Err(config_err(format!("fusion_half_life must be positive, got {h}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        for (name, v) in [
            ("weak_noise", self.weak_noise),
            ("weight_s", self.weight_s),
            ("weight_u", self.weight_u),
            ("weight_bf", self.weight_bf),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// `lr0 · lr_decay^⌊t / decay_period⌋`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((t / self.decay_period) as i32)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            base_channels: self.base_channels,
            deep_channels: self.deep_channels,
            embed_dim: self.embed_dim,
            dropout: self.dropout,
            ..Architecture::default()
        }
    }

    pub fn half_life(&self, depth: usize) -> f64 {
        self.fusion_half_life.unwrap_or(depth as f64 / 4.0)
    }
}

fn field_names<T: Serialize + Default>() -> Vec<String> {
    match toml::Value::try_from(T::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn from_table<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(e.to_string()))
}

/// Parses config text into the training and generator halves.
pub fn parse_config(text: &str) -> Result<(TrainConfig, GeneratorConfig)> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    let train_keys = field_names::<TrainConfig>();
    // `fusion_half_life` is skipped when absent from the default serialization
    let is_train = |k: &str| k == "fusion_half_life" || train_keys.iter().any(|t| t == k);
    let gen_keys = field_names::<GeneratorConfig>();
    let (mut train, mut generator) = (toml::Table::new(), toml::Table::new());
    for (k, v) in table {
        if is_train(&k) {
            train.insert(k, v);
        } else if gen_keys.contains(&k) {
            generator.insert(k, v);
        } else {
            return Err(config_err(format!("unknown key `{k}`")));
        }
    }
    let train: TrainConfig = from_table(train)?;
    let generator: GeneratorConfig = from_table(generator)?;
    train.validate()?;
    generator.validate().map_err(|e| config_err(e.to_string()))?;
    Ok((train, generator))
}

pub fn load_config(path: &Path) -> Result<(TrainConfig, GeneratorConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Renders both halves as a config file that parses back to the same values.
pub fn render_config(train: &TrainConfig, generator: &GeneratorConfig) -> String {
    let mut out = String::from("# training\n");
    out.push_str(&toml::to_string(train).expect("config serializes"));
    out.push_str("\n# data\n");
    out.push_str(&toml::to_string(generator).expect("config serializes"));
    out
}
