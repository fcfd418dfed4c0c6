mod common;

use common::*;
use sysanchor::error::Error;
use sysanchor::backbone::{pretrain, PretrainOptions};
use sysanchor::task::{generate_corpus, pretrain_corpus, RuleTask};
use sysanchor::tokenizer::ToyTokenizer;
use sysanchor::train::{collate, evaluate_loss, train, Sample, TrainConfig, TrainState, Trainer};
use sysanchor::{build_model, AdapterKind, Model, ModelConfig, PlacementName, Tensor};

const LEN: usize = 24;

fn config(adapter: AdapterKind, placement: PlacementName) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        vocab_size: 128,
        max_seq_len: LEN,
        adapter,
        placement,
    }
}

fn corpus(n: usize, seed: u64) -> Vec<Sample> {
    let task = RuleTask { max_seq_len: LEN, ..RuleTask::default() };
    generate_corpus(&task, &ToyTokenizer::new(), n, seed).unwrap()
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        warmup_ratio: 0.0,
        batch_size: 8,
        max_steps: Some(steps),
        max_seq_len: LEN,
        ..TrainConfig::default()
    }
}

fn params(m: &Model) -> Vec<Tensor<f32>> {
    m.adapters.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

#[test]
fn first_logged_loss_is_the_base_loss() {
    let data = corpus(64, 1);
    let model = build_model(&config(AdapterKind::Cal, PlacementName::Every2), 1).unwrap();
    let base = model.base();
    let cfg = train_cfg(1);
    let mut tr = Trainer::new(model, &data, cfg.clone()).unwrap();
    let order: Vec<usize> = {
        // reproduce the trainer's first batch: the epoch-0 permutation
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut o: Vec<usize> = (0..data.len()).collect();
        o.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed));
        o
    };
    let first: Vec<Sample> = order[..cfg.batch_size].iter().map(|&i| data[i].clone()).collect();
    let expected = evaluate_loss(&base, &first, cfg.batch_size, 0).unwrap();
    let log = tr.step().unwrap();
    assert!((log.loss - expected).abs() <= 1e-5, "{} vs {expected}", log.loss);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = corpus(32, 2);
    let model = build_model(&config(AdapterKind::Cal, PlacementName::LateHalf), 2).unwrap();
    let before = params(&model);
    let (after, logs) = train(model, &data, TrainConfig { lr: 0.0, ..train_cfg(5) }).unwrap();
    assert_eq!(logs.len(), 5);
    assert_eq!(before, params(&after));
}

#[test]
fn warmup_makes_the_first_update_a_no_op() {
    let data = corpus(32, 2);
    let model = build_model(&config(AdapterKind::Cal, PlacementName::Last), 2).unwrap();
    let before = params(&model);
    let cfg = TrainConfig { warmup_ratio: 0.1, ..train_cfg(20) };
    let mut tr = Trainer::new(model, &data, cfg).unwrap();
    assert_eq!(tr.step().unwrap().lr, 0.0);
    assert_eq!(before, params(tr.model()));
    assert!(tr.step().unwrap().lr > 0.0);
    assert_ne!(before, params(tr.model()));
}

#[test]
fn runs_are_deterministic() {
    let data = corpus(64, 3);
    let run = || {
        let model = build_model(&config(AdapterKind::ParallelMlp, PlacementName::Every2), 3).unwrap();
        train(model, &data, train_cfg(6)).unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(params(&a), params(&b));
}

#[test]
fn accumulation_matches_one_large_batch() {
    let data = corpus(64, 4);
    for adapter in [AdapterKind::Cal, AdapterKind::ParallelMlp] {
        let fresh = || {
            let mut m = build_model(&config(adapter, PlacementName::Every2), 4).unwrap();
            randomize_adapters(&mut m.adapters, &mut rng(4), 0.1);
            m
        };
        let (big, lbig) = train(fresh(), &data, TrainConfig { batch_size: 8, ..train_cfg(1) }).unwrap();
        let (acc, lacc) = train(fresh(), &data, TrainConfig { batch_size: 4, grad_accum: 2, ..train_cfg(1) }).unwrap();
        assert!((lbig[0].loss - lacc[0].loss).abs() <= 1e-6);
        assert!((lbig[0].grad_norm - lacc[0].grad_norm).abs() <= 1e-6);
        for (x, y) in params(&big).iter().zip(params(&acc)) {
            assert!(max_abs_diff_f32(x.data(), y.data()) <= 1e-6, "{adapter:?}");
        }
    }
}

#[test]
fn logged_gradient_norm_respects_clip() {
    let data = corpus(64, 5);
    let mut model = build_model(&config(AdapterKind::Cal, PlacementName::All), 5).unwrap();
    randomize_adapters(&mut model.adapters, &mut rng(5), 0.2);
    let (_, logs) = train(model, &data, TrainConfig { max_grad_norm: 1e-3, ..train_cfg(5) }).unwrap();
    for l in &logs {
        assert!(l.grad_norm <= 1e-3 * (1.0 + 1e-5), "{}", l.grad_norm);
        assert!(l.grad_norm > 0.0);
    }
}

#[test]
fn backbone_is_untouched_by_training() {
    let data = corpus(64, 6);
    let model = build_model(&config(AdapterKind::Cal, PlacementName::Every2), 6).unwrap();
    let hash = model.backbone().weight_hash();
    let (after, _) = train(model, &data, train_cfg(50)).unwrap();
    assert_eq!(hash, after.backbone().weight_hash());
}

/// 200 steps on a small rule corpus over a briefly pre-trained backbone
/// (a random head cannot express confident predictions at all).
#[test]
fn short_run_cuts_loss_by_a_fifth() {
    let task = RuleTask { max_seq_len: LEN, ..RuleTask::default() };
    let tok = ToyTokenizer::new();
    let cfg = config(AdapterKind::Cal, PlacementName::All);
    let seqs = pretrain_corpus(&task, &tok, 2000, 1).unwrap();
    let opts = PretrainOptions { steps: 100, lr: 1e-2, ..PretrainOptions::default() };
    let (backbone, _) = pretrain(&cfg, &seqs, 0, &opts).unwrap();
    let model = Model::with_backbone(&cfg, backbone, 3).unwrap();
    let data = corpus(16, 7);
    let before = evaluate_loss(&model, &data, 16, 0).unwrap();
    let (model, logs) = train(model, &data, TrainConfig { lr: 1e-2, warmup_ratio: 0.05, ..train_cfg(200) }).unwrap();
    let after = evaluate_loss(&model, &data, 16, 0).unwrap();
    assert!(after <= 0.8 * before, "{before} -> {after}");
    assert!(logs.last().unwrap().loss <= 0.8 * logs[0].loss);
}

#[test]
fn state_round_trips_and_resumes_exactly() {
    let data = corpus(20, 9);
    let cfg = TrainConfig { batch_size: 6, ..train_cfg(8) };
    let model = build_model(&config(AdapterKind::Cal, PlacementName::Every2), 9).unwrap();
    let (straight, full_logs) = train(model.clone(), &data, cfg.clone()).unwrap();

    let mut tr = Trainer::new(model.clone(), &data, cfg.clone()).unwrap();
    for _ in 0..5 {
        tr.step().unwrap();
    }
    let json = tr.snapshot().to_json().unwrap();
    let state = TrainState::from_json(&json).unwrap();
    assert_eq!(state, tr.snapshot());
    assert!(state.epoch >= 1, "20 samples at 6 per step wrap within 5 steps");

    let mut resumed = Trainer::resume(model, &data, cfg, state).unwrap();
    let rest = resumed.run().unwrap();
    assert_eq!(rest, full_logs[5..]);
    assert_eq!(params(resumed.model()), params(&straight));
}

#[test]
fn non_finite_loss_aborts() {
    let data = corpus(16, 10);
    let mut model = build_model(&config(AdapterKind::Cal, PlacementName::Last), 10).unwrap();
    for t in model.adapters.tensors_mut() {
        t.data_mut()[0] = f32::NAN;
    }
    let err = train(model, &data, train_cfg(3)).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn rejects_bad_inputs() {
    let data = corpus(8, 11);
    let model = build_model(&config(AdapterKind::Cal, PlacementName::Last), 11).unwrap();
    assert!(Trainer::new(model.base(), &data, train_cfg(1)).is_err());
    assert!(Trainer::new(model.clone(), &[], train_cfg(1)).is_err());
    assert!(Trainer::new(model.clone(), &data, TrainConfig { max_seq_len: 4, ..train_cfg(1) }).is_err());
    assert!(Trainer::new(model, &data, TrainConfig { grad_accum: 0, ..train_cfg(1) }).is_err());
}

#[test]
fn loss_is_scored_on_response_tokens_only() {
    let data = corpus(4, 12);
    let refs: Vec<&Sample> = data.iter().collect();
    let (batch, _, targets) = collate(&refs, 0);
    for (bi, s) in data.iter().enumerate() {
        let prompt = s.loss_mask.iter().position(|&m| m).unwrap();
        for i in 0..batch.t {
            let scored = targets[bi * batch.t + i].is_some();
            assert_eq!(scored, i + 1 >= prompt && i + 1 < s.ids.len(), "row {bi} pos {i}");
        }
    }
}
