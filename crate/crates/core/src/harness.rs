//! End-to-end run: backbone pre-training, corpus generation, adapter
//! training and adherence evaluation, all seeded from one [`RunConfig`].

use log::info;

use crate::backbone::{pretrain, Backbone};
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Model;
use crate::task::{adherence_report, generate_corpus, pretrain_corpus, AdherenceReport};
use crate::tokenizer::ToyTokenizer;
use crate::train::{evaluate_loss, Sample, StepLog, Trainer};

// Stream offsets from the run seed, so that changing one stage does not
// reshuffle the others.
const PRETRAIN_DATA: u64 = 1;
const ADAPTER_INIT: u64 = 2;
const TRAIN_DATA: u64 = 3;
const EVAL_PROMPTS: u64 = 4;
const EVAL_CORPUS: u64 = 5;
const PROBE_CORPUS: u64 = 6;

/// The frozen backbone for `cfg`: pre-trained when `pretrain_steps > 0`,
/// otherwise freshly initialized. Also returns the pre-training loss curve.
pub fn prepare_backbone(cfg: &RunConfig) -> Result<(Backbone<f32>, Vec<f64>)> {
    let model_cfg = cfg.model();
    if cfg.pretrain_steps == 0 {
        return Ok((Backbone::new(&model_cfg, cfg.seed)?, Vec::new()));
    }
    let tok = ToyTokenizer::new();
    let seqs = pretrain_corpus(&cfg.task(), &tok, cfg.pretrain_samples, cfg.seed.wrapping_add(PRETRAIN_DATA))?;
    let (backbone, losses) = pretrain(&model_cfg, &seqs, ToyTokenizer::PAD, &cfg.pretrain())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        info!("pre-trained backbone for {} steps: loss {first:.4} -> {last:.4}", losses.len());
    }
    Ok((backbone, losses))
}

pub fn attach_adapters(cfg: &RunConfig, backbone: Backbone<f32>) -> Result<Model<f32>> {
    Model::with_backbone(&cfg.model(), backbone, cfg.seed.wrapping_add(ADAPTER_INIT))
}

pub fn training_corpus(cfg: &RunConfig) -> Result<Vec<Sample>> {
    generate_corpus(&cfg.task(), &ToyTokenizer::new(), cfg.train_samples, cfg.seed.wrapping_add(TRAIN_DATA))
}

/// Clean and adversarial adherence on `eval_samples` held-out prompts each.
pub fn evaluate(model: &Model<f32>, cfg: &RunConfig) -> Result<AdherenceReport> {
    adherence_report(model, &ToyTokenizer::new(), &cfg.task(), cfg.eval_samples, cfg.seed.wrapping_add(EVAL_PROMPTS))
}

/// Mean response-token loss on `eval_samples` held-out exchanges.
pub fn held_out_loss(model: &Model<f32>, cfg: &RunConfig) -> Result<f64> {
    let corpus = generate_corpus(
        &cfg.task(),
        &ToyTokenizer::new(),
        cfg.eval_samples.max(1),
        cfg.seed.wrapping_add(EVAL_CORPUS),
    )?;
    evaluate_loss(model, &corpus, cfg.batch_size, ToyTokenizer::PAD)
}

/// Held-out exchanges for the magnitude probe.
pub fn probe_corpus(cfg: &RunConfig, n: usize) -> Result<Vec<Sample>> {
    generate_corpus(&cfg.task(), &ToyTokenizer::new(), n, cfg.seed.wrapping_add(PROBE_CORPUS))
}

pub struct RunOutcome {
    pub model: Model<f32>,
    pub logs: Vec<StepLog>,
    pub pretrain_losses: Vec<f64>,
}

/// Pre-trains (if configured), then trains the adapters, calling `on_step`
/// after every optimizer step.
pub fn run(cfg: &RunConfig, on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>) -> Result<RunOutcome> {
    let (backbone, pretrain_losses) = prepare_backbone(cfg)?;
    let model = attach_adapters(cfg, backbone)?;
    let corpus = training_corpus(cfg)?;
    let mut trainer = Trainer::new(model, &corpus, cfg.train())?;
    let logs = trainer.run_with(on_step)?;
    Ok(RunOutcome {
        model: trainer.into_model(),
        logs,
        pretrain_losses,
    })
}
