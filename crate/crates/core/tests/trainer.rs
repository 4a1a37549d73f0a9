use std::collections::BTreeMap;

use candle_core::Device;
use duet_core::checkpoint::{self, load_model};
use duet_core::data::Split;
use duet_core::eval::pseudo_word_self_retrieval;
use duet_core::testing::tiny_run;
use duet_core::trainer::{snapshot, Trainer, LATEST};
use duet_core::DuetError;

fn trainable(t: &Trainer) -> BTreeMap<String, Vec<f32>> {
    let m = t.model();
    let it = m
        .encoder()
        .params()
        .trainable_map()
        .into_iter()
        .chain(m.composer().params().to_map())
        .chain(t.decoder().params().to_map());
    snapshot(it).unwrap()
}

#[test]
fn fit_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let mut steps = 0;
    let state = t
        .fit(|e| {
            if let duet_core::trainer::TrainEvent::Step(r) = e {
                assert!(r.loss.is_finite());
                assert_eq!(r.parts.len(), 6);
                steps += 1;
            }
        })
        .unwrap();
    assert_eq!(steps, 8);
    assert_eq!(state.global_step, 8);
    assert_eq!(state.epoch, 2);
    let latest = cfg.output.join(LATEST);
    for f in [
        checkpoint::MODEL_FILE,
        checkpoint::TRAINABLE_FILE,
        checkpoint::DECODER_FILE,
        checkpoint::STATE_FILE,
        checkpoint::CONFIG_FILE,
        "optimizer.json",
        "optimizer.safetensors",
    ] {
        assert!(latest.join(f).exists(), "{f}");
    }
    assert!(cfg
        .output
        .join("best")
        .join(checkpoint::MODEL_FILE)
        .exists());
    let lines = std::fs::read_to_string(cfg.output.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);

    let (model, card) = load_model(&latest, None, &Device::Cpu).unwrap();
    assert_eq!(card.fingerprint, t.model().fingerprint().unwrap());
    assert_eq!(model.fingerprint().unwrap(), card.fingerprint);
}

#[test]
fn resume_mid_epoch_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.fit(|_| {}).unwrap();

    let mut other = cfg.clone();
    other.output = dir.path().join("interrupted");
    let mut first = Trainer::new(other.clone()).unwrap();
    let batches = first
        .dataset()
        .epoch(other.batch_size, other.seed, 0)
        .unwrap();
    for b in batches.into_iter().take(3) {
        first.train_step(b).unwrap();
    }
    let ckpt = first.save_checkpoint(LATEST).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(other, &ckpt).unwrap();
    assert_eq!(resumed.state().step_in_epoch, 3);
    resumed.fit(|_| {}).unwrap();
    assert_eq!(resumed.state().global_step, straight.state().global_step);
    assert_eq!(trainable(&resumed), trainable(&straight));
}

#[test]
fn only_declared_parameters_move() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let frozen = t.model().encoder().frozen_checksum().unwrap();
    let before = trainable(&t);
    for b in t.dataset().epoch(cfg.batch_size, cfg.seed, 0).unwrap() {
        t.train_step(b).unwrap();
    }
    assert_eq!(t.model().encoder().frozen_checksum().unwrap(), frozen);
    let after = trainable(&t);
    let moved = before.iter().filter(|(k, v)| after[*k] != **v).count();
    assert_eq!(moved, before.len());
}

#[test]
fn checkpoint_refuses_a_different_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let t = Trainer::new(cfg.clone()).unwrap();
    let ckpt = t.save_checkpoint(LATEST).unwrap();
    let other = dir.path().join("other-backbone");
    let tok = duet_core::testing::corpus_tokenizer();
    duet_core::encoder::DualEncoder::random(
        duet_core::testing::tiny_config(tok.vocab_size()),
        tok,
        99,
        candle_core::DType::F32,
        &Device::Cpu,
    )
    .unwrap()
    .save(&other)
    .unwrap();
    let err = load_model(&ckpt, Some(&other), &Device::Cpu).unwrap_err();
    assert!(matches!(err, DuetError::Fingerprint { .. }), "{err:?}");
}

#[test]
fn ablation_removes_losses_from_the_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(dir.path());
    cfg.ablation = duet_core::objectives::Ablation::WithoutCompositionality;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let b = t
        .dataset()
        .epoch(cfg.batch_size, cfg.seed, 0)
        .unwrap()
        .remove(0);
    let r = t.train_step(b).unwrap();
    let names: Vec<&str> = r.parts.keys().map(String::as_str).collect();
    assert_eq!(names, ["rec", "rt", "trip", "tt"]);
}

#[test]
fn self_retrieval_is_a_deterministic_percentage() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny_run(dir.path())).unwrap();
    let n = t.dataset().eval_items(Split::Train).len();
    let a = pseudo_word_self_retrieval(t.dataset(), t.model(), Split::Train, 1).unwrap();
    let b = pseudo_word_self_retrieval(t.dataset(), t.model(), Split::Train, 1).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=100.0).contains(&a));
    let all = pseudo_word_self_retrieval(t.dataset(), t.model(), Split::Train, n).unwrap();
    assert_eq!(all, 100.0);
}
