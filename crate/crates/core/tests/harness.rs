mod common;

use common::*;
use sysanchor::budget::count_adapter_params;
use sysanchor::checkpoint::{Checkpoint, ADAPTER_PREFIX, BACKBONE_PREFIX};
use sysanchor::config::RunConfig;
use sysanchor::harness;
use sysanchor::task::{adheres, evaluate_adherence, generate_corpus, RuleTask};
use sysanchor::tokenizer::ToyTokenizer;
use sysanchor::{build_model, AdapterKind, BatchBounds, ModelConfig, PlacementName, SpanBounds, TokenBatch};

fn small_run() -> RunConfig {
    RunConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        max_steps: Some(4),
        batch_size: 4,
        pretrain_steps: 3,
        pretrain_samples: 32,
        train_samples: 24,
        eval_samples: 8,
        placement: PlacementName::All,
        ..RunConfig::default()
    }
}

#[test]
fn corpus_is_deterministic_per_seed() {
    let task = RuleTask { max_seq_len: 32, ..RuleTask::default() };
    let tok = ToyTokenizer::new();
    let a = generate_corpus(&task, &tok, 50, 5).unwrap();
    assert_eq!(a, generate_corpus(&task, &tok, 50, 5).unwrap());
    assert_ne!(a, generate_corpus(&task, &tok, 50, 6).unwrap());
}

#[test]
fn every_sample_anchors_on_its_rule() {
    let task = RuleTask { max_seq_len: 32, ..RuleTask::default() };
    let tok = ToyTokenizer::new();
    for inst in task.instances(&tok, 300, 7).unwrap() {
        let prompt = inst.prompt(&tok);
        assert!(prompt.len() + inst.target(&tok).len() <= 32);
        let span = sysanchor::detect_span(&tok.tokens(&prompt), sysanchor::Dialect::ChatMl);
        assert!(!span.is_empty());
        let inside = &prompt[span.s..span.e];
        assert!(inside.contains(&tok.rule(inst.rule)));
        assert!(!inside.contains(&ToyTokenizer::USER));
        assert_eq!(inst.target(&tok)[0], tok.rule(inst.rule));
        if let Some(j) = inst.counter_rule {
            assert_ne!(j, inst.rule);
            assert!(inst.user.contains(&tok.rule(j)));
            assert!(!inside.contains(&tok.rule(j)));
        }
    }
}

#[test]
fn adversarial_rate_is_roughly_respected() {
    let task = RuleTask { max_seq_len: 32, ..RuleTask::default() };
    let n = task.instances(&ToyTokenizer::new(), 2000, 8).unwrap().iter().filter(|i| i.is_adversarial()).count();
    assert!((900..=1100).contains(&n), "{n}");
}

#[test]
fn checkpoint_holds_exactly_the_adapter_parameters() {
    for (adapter, placement) in [
        (AdapterKind::Cal, PlacementName::Late8th),
        (AdapterKind::Cal, PlacementName::All),
        (AdapterKind::ParallelMlp, PlacementName::Every2),
    ] {
        let cfg = ModelConfig { n_layers: 8, d_model: 16, n_heads: 2, adapter, placement, ..ModelConfig::default() };
        let ck = Checkpoint::from_model(&build_model(&cfg, 1).unwrap());
        assert_eq!(ck.element_count(ADAPTER_PREFIX) as u64, count_adapter_params(&cfg).unwrap());
        assert!(ck.element_count(BACKBONE_PREFIX) > 0);
    }
}

#[test]
fn checkpoint_round_trips_through_disk() {
    let cfg = ModelConfig { n_layers: 4, d_model: 16, n_heads: 2, vocab_size: 32, ..ModelConfig::default() };
    let mut model = build_model(&cfg, 2).unwrap();
    randomize_adapters(&mut model.adapters, &mut rng(2), 0.3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.clrx");
    Checkpoint::from_model(&model).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model(&cfg).unwrap();

    let batch = TokenBatch::from_sequences(&[vec![1, 5, 9, 2, 7, 3]], 0);
    let bounds = BatchBounds::new(vec![SpanBounds::new(1, 4).unwrap()]);
    assert_eq!(model.logits(&batch, &bounds).unwrap(), back.logits(&batch, &bounds).unwrap());
    assert_eq!(model.backbone().weight_hash(), back.backbone().weight_hash());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let cfg = ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, vocab_size: 16, ..ModelConfig::default() };
    let mut bytes = Checkpoint::from_model(&build_model(&cfg, 3).unwrap()).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"nope").is_err());
}

#[test]
fn short_run_is_reproducible_and_keeps_the_backbone() {
    let cfg = small_run();
    let (backbone, losses) = harness::prepare_backbone(&cfg).unwrap();
    assert_eq!(losses.len(), 3);
    let hash = backbone.weight_hash();
    let a = harness::run(&cfg, |_, _| Ok(())).unwrap();
    let b = harness::run(&cfg, |_, _| Ok(())).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.logs.len(), 4);
    assert_eq!(a.pretrain_losses, losses);
    assert_eq!(a.model.backbone().weight_hash(), hash);
    let report = harness::evaluate(&a.model, &cfg).unwrap();
    assert!((0.0..=1.0).contains(&report.adherence));
}

#[test]
fn config_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "d_model = 32\nn_heads = 4\nplacement = \"last\"\nseed = 9\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!((cfg.d_model, cfg.placement, cfg.seed), (32, PlacementName::Last, 9));
    assert!(RunConfig::load(dir.path().join("missing.toml")).is_err());
}

#[test]
fn stored_bounds_match_fresh_detection() {
    let task = RuleTask { max_seq_len: 32, ..RuleTask::default() };
    let tok = ToyTokenizer::new();
    for s in generate_corpus(&task, &tok, 200, 9).unwrap() {
        assert_eq!(s.bounds, sysanchor::detect_span(&tok.tokens(&s.ids), sysanchor::Dialect::ChatMl));
        assert!(s.ids.len() <= 32);
    }
}

#[test]
fn reference_responses_always_adhere() {
    let task = RuleTask::default();
    let tok = ToyTokenizer::new();
    for inst in task.instances(&tok, 200, 10).unwrap() {
        assert!(adheres(&tok, inst.rule, &inst.target(&tok)));
    }
}

#[test]
fn fresh_adapters_match_base_adherence_exactly() {
    let cfg = ModelConfig { n_layers: 4, d_model: 16, n_heads: 2, max_seq_len: 32, ..ModelConfig::default() };
    let model = build_model(&cfg, 11).unwrap();
    let task = RuleTask { max_seq_len: 32, ..RuleTask::default() };
    let tok = ToyTokenizer::new();
    for adversarial in [false, true] {
        let adapted = evaluate_adherence(&model, &tok, &task, 100, 3, adversarial).unwrap();
        let base = evaluate_adherence(&model.base(), &tok, &task, 100, 3, adversarial).unwrap();
        assert_eq!(adapted, base);
    }
}

#[test]
fn readme_config_block_is_the_default_run() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    assert_eq!(RunConfig::parse(block).unwrap(), RunConfig::default());
}
