mod common;

use common::{rng, uniform_spec};
use mla_core::attention::AttentionConfig;
use mla_core::conversion::{convert_model_weights, ConversionSpec, Placement, Strategy};
use mla_core::model::{Model, ModelSpec, EOS, PAD};
use mla_core::training::{
    backward, finetune, finetune_on, finite_diff_check, forward_loss, read_examples,
    relative_error, write_examples, Example, Freeze, Optimizer, SyntheticTask, TaskKind,
    TrainConfig,
};
use mla_core::{Matrix, MlaError};

fn variants() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("mha", ModelSpec::toy()),
        ("mla_full", uniform_spec(AttentionConfig::mla_full(64, 4, 12).unwrap())),
        ("mla_preserving", uniform_spec(AttentionConfig::mla_preserving(64, 4, 8, 2).unwrap())),
    ]
}

fn batch(seed: u64, n: usize) -> Vec<Example> {
    SyntheticTask::copy(seed).generate().unwrap().into_iter().take(n).collect()
}

fn oracle_loss(m: &Model, batch: &[Example]) -> f64 {
    let (mut total, mut n) = (0.0, 0);
    for ex in batch {
        let logits = common::forward_logits(m, &ex.source, &ex.decoder_input());
        let (t, c) = common::cross_entropy(&logits, &ex.target);
        total += t;
        n += c;
    }
    total / n as f64
}

#[test]
fn loss_matches_oracle() {
    for (name, spec) in variants() {
        let m = Model::random(spec, &mut rng(31)).unwrap();
        let mut b = batch(2, 4);
        // A padded label position must not count.
        b[0].target.push(PAD);
        b[0].source.push(9);
        let got = forward_loss(&m, &b).unwrap();
        let want = oracle_loss(&m, &b);
        assert!((got - want).abs() <= 1e-10, "{name}: {got} vs {want}");
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut m = Model::random(ModelSpec::toy(), &mut rng(32)).unwrap();
    m.dec_ln.gamma = Matrix::zeros(1, 64);
    m.dec_ln.beta = Matrix::zeros(1, 64);
    let loss = forward_loss(&m, &batch(3, 5)).unwrap();
    assert!((loss - 64f64.ln()).abs() <= 1e-12, "{loss}");
}

#[test]
fn confident_correct_model_has_vanishing_loss_and_gradients() {
    let mut m = Model::random(ModelSpec::toy(), &mut rng(33)).unwrap();
    m.dec_ln.gamma = Matrix::zeros(1, 64);
    let mut beta = vec![0.0; 64];
    beta[0] = 1.0;
    m.dec_ln.beta = Matrix::row_vector(beta);
    m.dec_embed[(EOS as usize, 0)] = 100.0;
    let b: Vec<Example> = (0..3)
        .map(|i| Example {
            source: vec![5 + i, 6, 7],
            target: vec![EOS],
        })
        .collect();
    let (out, grads) = backward(&m, &b, &Freeze::none()).unwrap();
    assert!(out.loss <= 1e-12, "{}", out.loss);
    assert_eq!(out.correct, 3);
    for (name, g) in grads.named_tensors() {
        assert!(g.max_abs() <= 1e-8, "{name}: {}", g.max_abs());
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for (name, spec) in variants() {
        let m = Model::random(spec, &mut rng(34)).unwrap();
        let report = finite_diff_check(&m, &batch(4, 3), 50, 7).unwrap();
        assert_eq!(report.samples.len(), 50);
        assert!(
            report.max_relative_error <= 1e-4,
            "{name}: {:e} at {:?}",
            report.max_relative_error,
            report.samples.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
        );
        assert!(report.passed());
    }
}

#[test]
fn relative_error_uses_a_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!(relative_error(1e-12, -1e-12) <= 2e-6);
}

#[test]
fn frozen_gradients_are_zero_and_encoder_is_skipped() {
    let m = Model::random(ModelSpec::toy(), &mut rng(35)).unwrap();
    let freeze = Freeze::dso(&m.spec);
    let b = batch(5, 2);
    let (o1, g) = backward(&m, &b, &freeze).unwrap();
    let (o2, full) = backward(&m, &b, &Freeze::none()).unwrap();
    assert!((o1.loss - o2.loss).abs() <= 1e-14);
    for ((name, a), (_, f)) in g.named_tensors().into_iter().zip(full.named_tensors()) {
        if freeze.is_frozen(&name) {
            assert!(a.as_slice().iter().all(|&v| v == 0.0), "{name}");
        } else {
            assert!(a.max_abs_diff(f) <= 1e-12, "{name}");
        }
    }
}

fn small_task() -> (Vec<Example>, Vec<Example>) {
    let all = SyntheticTask {
        kind: TaskKind::Copy,
        vocab_size: 64,
        min_len: 1,
        max_len: 6,
        sample_count: 60,
        seed: 8,
    }
    .generate()
    .unwrap();
    (all[..50].to_vec(), all[50..].to_vec())
}

#[test]
fn finetune_is_deterministic() {
    let m = Model::random(ModelSpec::toy(), &mut rng(36)).unwrap();
    let (train, held) = small_task();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = finetune_on(&m, &train, &held, &cfg, &Freeze::none()).unwrap();
    let b = finetune_on(&m, &train, &held, &cfg, &Freeze::none()).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model, b.model);
    assert_eq!(a.steps, 2 * 7);
    assert_eq!(a.trace.len(), 4);
    let c = finetune_on(&m, &train, &held, &TrainConfig { seed: 4, ..cfg }, &Freeze::none()).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn frozen_tensors_stay_bit_identical() {
    let base = Model::random(ModelSpec::toy(), &mut rng(37)).unwrap();
    let spec = ConversionSpec::new(Strategy::Uniform, 8, 1, Placement::Dso);
    let (m, _) = convert_model_weights(&base, &spec, None).unwrap();
    let freeze = Freeze::dso(&m.spec);
    let (train, held) = small_task();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let out = finetune_on(&m, &train, &held, &cfg, &freeze).unwrap();
    let mut changed = 0;
    for ((name, before), (_, after)) in m.named_tensors().into_iter().zip(out.model.named_tensors()) {
        let same = before.as_slice().iter().zip(after.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if freeze.is_frozen(&name) {
            assert!(same, "{name} moved");
        } else if !same {
            changed += 1;
        }
    }
    assert!(changed > 10, "only {changed} trainable tensors moved");
}

#[test]
fn one_epoch_beats_chance() {
    let m = Model::random(ModelSpec::toy(), &mut rng(38)).unwrap();
    let out = finetune(&m, &SyntheticTask::copy(1), &TrainConfig { epochs: 1, ..TrainConfig::default() }, &Freeze::none()).unwrap();
    let row = out.final_heldout().unwrap();
    assert!(row.loss < 64f64.ln(), "{}", row.loss);
    assert_eq!(out.steps, 1800usize.div_ceil(16));
}

#[test]
fn divergence_is_reported() {
    let m = Model::random(ModelSpec::toy(), &mut rng(39)).unwrap();
    let (train, held) = small_task();
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e300,
        optimizer: Optimizer::Sgd,
        gradient_clip: None,
        ..TrainConfig::default()
    };
    let err = finetune_on(&m, &train, &held, &cfg, &Freeze::none()).unwrap_err();
    assert!(matches!(err, MlaError::Training { .. }), "{err}");
}

#[test]
fn split_and_round_trip() {
    let task = SyntheticTask::copy(11);
    let (train, held) = task.split().unwrap();
    assert_eq!((train.len(), held.len()), (1800, 200));
    assert_eq!(held[0], task.generate().unwrap()[1800]);
    for ex in train.iter().chain(&held) {
        assert_eq!(ex.target.last(), Some(&EOS));
        assert_eq!(&ex.target[..ex.target.len() - 1], ex.source.as_slice());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    write_examples(&path, &held).unwrap();
    assert_eq!(read_examples(&path).unwrap(), held);

    let rev = SyntheticTask { kind: TaskKind::Reverse, ..task };
    let ex = &rev.generate().unwrap()[0];
    let mut want: Vec<_> = ex.source.iter().rev().copied().collect();
    want.push(EOS);
    assert_eq!(ex.target, want);
}

#[test]
fn bad_configs_are_rejected() {
    let m = Model::random(ModelSpec::toy(), &mut rng(40)).unwrap();
    let (train, held) = small_task();
    for cfg in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(finetune_on(&m, &train, &held, &cfg, &Freeze::none()), Err(MlaError::Config(_))));
    }
    let all_pad = vec![Example { source: vec![4], target: vec![PAD] }];
    assert!(forward_loss(&m, &all_pad).is_err());
    let too_big = SyntheticTask { vocab_size: 100, ..SyntheticTask::copy(0) };
    assert!(finetune(&m, &too_big, &TrainConfig::default(), &Freeze::none()).is_err());
}
