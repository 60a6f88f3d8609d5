//! Training configuration as a flat `key = value` file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{DistanceMode, ModelConfig};
use crate::objectives::{KlOrientation, LossOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Rate for the entity embedding tables.
    pub base_lr_encoder: f64,
    /// Rate for the triplet encoder, relation table, deviation vectors and
    /// positional embeddings.
    pub base_lr_other: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mm_loss: bool,
    pub triplet_loss: bool,
    pub reverse_triplets: bool,
    pub deviation_compensation: bool,
    pub distance_mode: DistanceMode,
    pub global_epsilon: bool,
    /// Train a logit scale in place of the fixed temperature.
    pub learnable_scale: bool,
    pub kl_orientation: KlOrientation,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub fusion_weight: f64,
    /// Attention heads; 0 picks 4 below width 64 and 8 from there.
    pub heads: usize,
    /// Feed-forward width; 0 picks four times the embedding width.
    pub ff_width: usize,
    pub layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            base_lr_encoder: 1e-5,
            base_lr_other: 1e-4,
            weight_decay: 0.2,
            lambda: 1.0,
            tau: 1.0,
            batch_size: 64,
            seed: 0,
            mm_loss: true,
            triplet_loss: true,
            reverse_triplets: true,
            deviation_compensation: true,
            distance_mode: DistanceMode::Cosine,
            global_epsilon: false,
            learnable_scale: false,
            kl_orientation: KlOrientation::TruthFirst,
            grad_clip: 0.0,
            fusion_weight: 0.5,
            heads: 0,
            ff_width: 0,
            layers: 3,
        }
    }
}

pub const KEYS: [&str; 22] = [
    "epochs",
    "warmup_epochs",
    "base_lr_encoder",
    "base_lr_other",
    "weight_decay",
    "lambda",
    "tau",
    "batch_size",
    "seed",
    "mm_loss",
    "triplet_loss",
    "reverse_triplets",
    "deviation_compensation",
    "distance_mode",
    "global_epsilon",
    "learnable_scale",
    "kl_orientation",
    "grad_clip",
    "fusion_weight",
    "heads",
    "ff_width",
    "layers",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn orientation_name(o: KlOrientation) -> &'static str {
    match o {
        KlOrientation::TruthFirst => "truth-first",
        KlOrientation::ModelFirst => "model-first",
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_value(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, v)?,
            "base_lr_encoder" => self.base_lr_encoder = parse_value(key, v)?,
            "base_lr_other" => self.base_lr_other = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "mm_loss" => self.mm_loss = parse_bool(key, v)?,
            "triplet_loss" => self.triplet_loss = parse_bool(key, v)?,
            "reverse_triplets" => self.reverse_triplets = parse_bool(key, v)?,
            "deviation_compensation" => self.deviation_compensation = parse_bool(key, v)?,
            "distance_mode" => self.distance_mode = v.parse()?,
            "global_epsilon" => self.global_epsilon = parse_bool(key, v)?,
            "learnable_scale" => self.learnable_scale = parse_bool(key, v)?,
            "kl_orientation" => {
                self.kl_orientation = match v {
                    "truth-first" => KlOrientation::TruthFirst,
                    "model-first" => KlOrientation::ModelFirst,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for kl_orientation"))),
                }
            }
            "grad_clip" => self.grad_clip = parse_value(key, v)?,
            "fusion_weight" => self.fusion_weight = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "ff_width" => self.ff_width = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse { line: n + 1, detail: format!("duplicate key {k}") });
            }
            cfg.set(k, v).map_err(|e| Error::Parse { line: n + 1, detail: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "base_lr_encoder" => self.base_lr_encoder.to_string(),
            "base_lr_other" => self.base_lr_other.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "mm_loss" => self.mm_loss.to_string(),
            "triplet_loss" => self.triplet_loss.to_string(),
            "reverse_triplets" => self.reverse_triplets.to_string(),
            "deviation_compensation" => self.deviation_compensation.to_string(),
            "distance_mode" => self.distance_mode.to_string(),
            "global_epsilon" => self.global_epsilon.to_string(),
            "learnable_scale" => self.learnable_scale.to_string(),
            "kl_orientation" => orientation_name(self.kl_orientation).to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "fusion_weight" => self.fusion_weight.to_string(),
            "heads" => self.heads.to_string(),
            "ff_width" => self.ff_width.to_string(),
            "layers" => self.layers.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, rate) in [("base_lr_encoder", self.base_lr_encoder), ("base_lr_other", self.base_lr_other)] {
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {rate}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !self.triplet_loss && !(self.mm_loss && self.lambda > 0.0) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::Config("fusion_weight must lie in [0, 1]".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        let auto = ModelConfig::for_dim(dim);
        ModelConfig {
            dim,
            heads: if self.heads == 0 { auto.heads } else { self.heads },
            ff_width: if self.ff_width == 0 { auto.ff_width } else { self.ff_width },
            layers: self.layers,
            ln_eps: auto.ln_eps,
            global_epsilon: self.global_epsilon,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            tau: self.tau,
            distance: self.distance_mode,
            orientation: self.kl_orientation,
            reverse_triplets: self.reverse_triplets,
            logit_scale: None,
        }
    }

    /// Weight of the multi-modal term after applying the `mm_loss` flag.
    pub fn effective_lambda(&self) -> f64 {
        if self.mm_loss {
            self.lambda
        } else {
            0.0
        }
    }
}

impl fmt::Display for TrainConfig {
    /// Every key, one `key = value` line each; parses back to `self`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in KEYS {
            writeln!(f, "{k} = {}", self.get(k).unwrap())?;
        }
        Ok(())
    }
}
