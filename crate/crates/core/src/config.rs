//! Flat `key = value` run configuration (TOML syntax, no tables).
//!
//! ```text
//! n_layers = 8
//! d_model = 64
//! adapter = "cal"
//! placement = "late8th"
//! lr = 0.002
//! max_steps = 2000
//! ```
//!
//! Every key is optional; missing keys take the defaults below, which are
//! the desk-scale behavioral run (pre-trained d=64, 8-layer backbone, CAL
//! on the late eighth, 2000 steps).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::PretrainOptions;
use crate::error::{Error, Result};
use crate::model::{AdapterKind, ModelConfig};
use crate::placement::PlacementName;
use crate::task::RuleTask;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub adapter: AdapterKind,
    pub placement: PlacementName,
    // adapter training
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub checkpoint_every: Option<usize>,
    // backbone pre-training; 0 steps leaves the backbone random
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_samples: usize,
    // task
    pub train_samples: usize,
    pub eval_samples: usize,
    pub adversarial_rate: f64,
    pub max_fillers: usize,
    pub min_content: usize,
    pub max_content: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let task = RuleTask::default();
        let pre = PretrainOptions::default();
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            vocab_size: m.vocab_size,
            max_seq_len: 32,
            adapter: m.adapter,
            placement: m.placement,
            lr: 2e-3,
            warmup_ratio: t.warmup_ratio,
            weight_decay: t.weight_decay,
            batch_size: 16,
            grad_accum: t.grad_accum,
            max_grad_norm: t.max_grad_norm,
            epochs: t.epochs,
            max_steps: Some(2000),
            checkpoint_every: None,
            pretrain_steps: 300,
            pretrain_batch_size: pre.batch_size,
            pretrain_lr: pre.lr,
            pretrain_samples: 4000,
            train_samples: 4000,
            eval_samples: 200,
            adversarial_rate: task.adversarial_rate,
            max_fillers: task.max_fillers,
            min_content: task.min_content,
            max_content: task.max_content,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.model().validate()?;
        cfg.train().validate()?;
        cfg.task().validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            adapter: self.adapter,
            placement: self.placement,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            max_grad_norm: self.max_grad_norm,
            epochs: self.epochs,
            max_steps: self.max_steps,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
            pad_id: 0,
        }
    }

    pub fn task(&self) -> RuleTask {
        RuleTask {
            max_fillers: self.max_fillers,
            min_content: self.min_content,
            max_content: self.max_content,
            adversarial_rate: self.adversarial_rate,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn pretrain(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            seed: self.seed,
            ..PretrainOptions::default()
        }
    }
}
