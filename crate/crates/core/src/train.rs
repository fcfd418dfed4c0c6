//! Supervised fine-tuning of adapter parameters on a frozen backbone.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::cross_entropy_with_denominator;
use crate::model::{AdapterSet, ForwardOptions, Model, TokenBatch};
use crate::optim::{clip_global_norm, cosine_with_warmup, AdamW};
use crate::span::{BatchBounds, SpanBounds};
use crate::tensor::Tensor;

/// One training sequence. `loss_mask[i]` marks token `i` as a response
/// token whose prediction is scored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub ids: Vec<u32>,
    pub bounds: SpanBounds,
    pub loss_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub epochs: usize,
    /// Overrides `epochs` with a fixed number of optimizer steps.
    pub max_steps: Option<usize>,
    pub max_seq_len: usize,
    pub seed: u64,
    pub pad_id: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            batch_size: 8,
            grad_accum: 1,
            max_grad_norm: 1.0,
            epochs: 1,
            max_steps: None,
            max_seq_len: 256,
            seed: 0,
            pad_id: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} not in [0, 1)", self.warmup_ratio)));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.max_grad_norm <= 0.0 {
            return Err(Error::Config("lr, weight_decay must be ≥ 0 and max_grad_norm > 0".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        self.max_steps
            .unwrap_or(corpus_len.div_ceil(self.effective_batch()) * self.epochs)
    }
}

/// Learning rate for the update made at `step` (0-based).
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    cosine_with_warmup(step, total_steps, config.lr, config.warmup_ratio)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,grad_norm,lr";

pub fn write_train_log(mut w: impl Write, logs: &[StepLog]) -> std::io::Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for l in logs {
        writeln!(w, "{},{},{},{}", l.step, l.loss, l.grad_norm, l.lr)?;
    }
    Ok(())
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub adapters: AdapterSet<f32>,
    pub optimizer: AdamW<f32>,
    /// Exponential moving average of the loss.
    pub running_loss: Option<f64>,
    /// Data order: the epoch's permutation is drawn from `seed + epoch`.
    pub epoch: usize,
    pub cursor: usize,
}

impl TrainState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Turns samples into a padded batch, its bounds and response-only targets.
pub fn collate(samples: &[&Sample], pad: u32) -> (TokenBatch, BatchBounds, Vec<Option<usize>>) {
    let seqs: Vec<Vec<u32>> = samples.iter().map(|s| s.ids.clone()).collect();
    let batch = TokenBatch::from_sequences(&seqs, pad);
    let bounds = BatchBounds::new(samples.iter().map(|s| s.bounds).collect());
    let targets = batch.next_token_targets(|b, pos| samples[b].loss_mask.get(pos).copied().unwrap_or(false));
    (batch, bounds, targets)
}

/// Mean response-token loss of `model` over `samples`.
pub fn evaluate_loss(model: &Model<f32>, samples: &[Sample], batch_size: usize, pad: u32) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (batch, bounds, targets) = collate(&refs, pad);
        let logits = model.logits(&batch, &bounds)?;
        let rows = logits.reshape(&[batch.b * batch.t, model.backbone().vocab()])?;
        let ce = cross_entropy_with_denominator(&rows, &targets, 1)?;
        total += ce.loss as f64;
        count += ce.count;
    }
    Ok(total / count.max(1) as f64)
}

pub struct Trainer<'a> {
    model: Model<f32>,
    corpus: &'a [Sample],
    config: TrainConfig,
    optimizer: AdamW<f32>,
    decay: Vec<bool>,
    total_steps: usize,
    step: usize,
    running_loss: Option<f64>,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model<f32>, corpus: &'a [Sample], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        if model.adapters.is_empty() {
            return Err(Error::Config("model has no adapters to train".into()));
        }
        if let Some(s) = corpus.iter().find(|s| s.ids.len() > config.max_seq_len) {
            return Err(Error::Shape(format!(
                "sample of {} tokens exceeds max_seq_len {}",
                s.ids.len(),
                config.max_seq_len
            )));
        }
        let optimizer = AdamW::new(model.adapters.named_tensors().into_iter().map(|(_, t)| t), config.weight_decay);
        let decay = model.adapters.decay_mask();
        let total_steps = config.total_steps(corpus.len());
        let mut tr = Self {
            model,
            corpus,
            config,
            optimizer,
            decay,
            total_steps,
            step: 0,
            running_loss: None,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        tr.order = tr.epoch_order(0);
        Ok(tr)
    }

    /// Continues from a saved state; the model's adapters are replaced.
    pub fn resume(mut model: Model<f32>, corpus: &'a [Sample], config: TrainConfig, state: TrainState) -> Result<Self> {
        if state.adapters.layers != model.adapters.layers || state.adapters.kind != model.adapters.kind {
            return Err(Error::Config("saved adapters do not match model".into()));
        }
        model.adapters = state.adapters;
        let mut tr = Self::new(model, corpus, config)?;
        tr.optimizer = state.optimizer;
        tr.step = state.step;
        tr.running_loss = state.running_loss;
        tr.epoch = state.epoch;
        tr.cursor = state.cursor;
        tr.order = tr.epoch_order(state.epoch);
        Ok(tr)
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    fn next_sample(&mut self) -> &'a Sample {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.epoch_order(self.epoch);
        }
        let s = &self.corpus[self.order[self.cursor]];
        self.cursor += 1;
        s
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn snapshot(&self) -> TrainState {
        TrainState {
            step: self.step,
            adapters: self.model.adapters.clone(),
            optimizer: self.optimizer.clone(),
            running_loss: self.running_loss,
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    /// One optimizer update over `grad_accum` micro-batches. The loss is the
    /// mean over every scored token of all micro-batches, so accumulation
    /// is exactly equivalent to one large batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = self.config.clone();
        let micro: Vec<Vec<&'a Sample>> = (0..cfg.grad_accum)
            .map(|_| (0..cfg.batch_size).map(|_| self.next_sample()).collect())
            .collect();
        let collated: Vec<_> = micro.iter().map(|m| collate(m, cfg.pad_id)).collect();
        let denom = collated
            .iter()
            .map(|(_, _, t)| t.iter().filter(|x| x.is_some()).count())
            .sum::<usize>()
            .max(1);

        let vocab = self.model.backbone().vocab();
        let mut grads = self.model.adapters.zeros_like();
        let mut loss = 0.0f64;
        for (batch, bounds, targets) in &collated {
            let out = self.model.forward(batch, bounds, ForwardOptions::taped())?;
            let rows = out.logits.reshape(&[batch.b * batch.t, vocab])?;
            let ce = cross_entropy_with_denominator(&rows, targets, denom)?;
            loss += ce.loss as f64;
            let dlogits = ce.grad.reshape(&[batch.b, batch.t, vocab])?;
            self.model.backward_into(out.tape.as_ref(), &dlogits, &mut grads)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }

        let mut gl = grads.tensors_mut();
        let (_, grad_norm) = clip_global_norm(&mut gl, cfg.max_grad_norm);
        let gref: Vec<&Tensor<f32>> = gl.iter().map(|g| &**g).collect();
        let lr = lr_at(self.step, self.total_steps, &cfg);
        let mut params = self.model.adapters.tensors_mut();
        self.optimizer.update(&mut params, &gref, &self.decay, lr);

        self.running_loss = Some(match self.running_loss {
            Some(r) => 0.9 * r + 0.1 * loss,
            None => loss,
        });
        let log = StepLog {
            step: self.step,
            loss,
            grad_norm,
            lr,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs to `total_steps`, calling `on_step` after every update.
    pub fn run_with(&mut self, mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.total_steps.saturating_sub(self.step));
        while !self.is_done() {
            let log = self.step()?;
            on_step(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn run(&mut self) -> Result<Vec<StepLog>> {
        self.run_with(|_, _| Ok(()))
    }
}

/// Trains `model`'s adapters on `corpus` and returns it with the step logs.
pub fn train(model: Model<f32>, corpus: &[Sample], config: TrainConfig) -> Result<(Model<f32>, Vec<StepLog>)> {
    let mut tr = Trainer::new(model, corpus, config)?;
    let logs = tr.run()?;
    Ok((tr.into_model(), logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig { lr: 2e-4, warmup_ratio: 0.1, ..TrainConfig::default() };
        assert_eq!(lr_at(0, 100, &cfg), 0.0);
        assert_eq!(lr_at(10, 100, &cfg), 2e-4);
        assert!(lr_at(100, 100, &cfg).abs() < 1e-18);
    }

    #[test]
    fn warmup_ratio_must_be_below_one() {
        let cfg = TrainConfig { warmup_ratio: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn total_steps_counts_effective_batches() {
        let cfg = TrainConfig { batch_size: 4, grad_accum: 2, epochs: 3, ..TrainConfig::default() };
        assert_eq!(cfg.total_steps(17), 9);
        let capped = TrainConfig { max_steps: Some(5), ..cfg };
        assert_eq!(capped.total_steps(17), 5);
    }

    #[test]
    fn log_csv_has_header() {
        let mut buf = Vec::new();
        write_train_log(&mut buf, &[StepLog { step: 0, loss: 1.5, grad_norm: 0.5, lr: 0.0 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,grad_norm,lr\n0,1.5,0.5,0\n");
    }
}
