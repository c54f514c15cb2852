use std::fs;

use lanpose_core::scene::{generate_record, DatasetRecord, GenConfig};
use lanpose_net::checkpoint::load_checkpoint;
use lanpose_net::model::ModelConfig;
use lanpose_net::train::{train, train_resume, TrainConfig};
use lanpose_net::NetError;

fn records(seed: u64, n: u64) -> Vec<DatasetRecord> {
    (0..n).map(|i| generate_record(&GenConfig::default(), seed, i).unwrap()).collect()
}

fn small() -> TrainConfig {
    TrainConfig {
        seed: 3,
        epochs_stage1: 2,
        epochs_stage2: 2,
        batch_size: 8,
        warmup_steps: 4,
        model: ModelConfig { map_size: 16, fc_width: 32, ..Default::default() },
        keep_epoch_checkpoints: true,
        ..Default::default()
    }
}

#[test]
fn runs_are_deterministic_resumable_and_respect_freezing() {
    let (tr, va) = (records(1, 40), records(2, 12));
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let run_a = train(&tr, &va, &cfg, &a).unwrap();
    train(&tr, &va, &cfg, &b).unwrap();
    let final_a = fs::read(a.join("final.ckpt")).unwrap();
    assert_eq!(final_a, fs::read(b.join("final.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(run_a.history.len(), 2 + 2 * 2);

    // direct branch is bit-identical across stage 2
    let s1 = load_checkpoint(&a.join("stage1.ckpt")).unwrap().network.params;
    let fin = load_checkpoint(&a.join("final.ckpt")).unwrap().network.params;
    let mut changed_lang = false;
    for i in 0..s1.len() {
        if s1.name(i).starts_with("direct.") {
            assert_eq!(s1.data(i), fin.data(i), "{}", s1.name(i));
        } else {
            changed_lang |= s1.data(i) != fin.data(i);
        }
    }
    assert!(changed_lang);

    for mid in ["stage1_epoch001.ckpt", "stage2_epoch001.ckpt"] {
        let ck = load_checkpoint(&a.join(mid)).unwrap();
        let _ = fs::remove_dir_all(&c);
        train_resume(&tr, &va, &cfg, &c, Some(ck)).unwrap();
        assert_eq!(final_a, fs::read(c.join("final.ckpt")).unwrap(), "resume from {mid}");
    }
}

#[test]
fn loss_decreases_early() {
    let tr = records(4, 400);
    let cfg = TrainConfig { epochs_stage1: 1, epochs_stage2: 0, validate_every: 0, keep_epoch_checkpoints: false, ..small() };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&tr, &[], &cfg, dir.path()).unwrap();
    let l = &out.step_losses[0];
    assert_eq!(l.len(), 50);
    let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn divergence_is_reported() {
    let tr = records(5, 16);
    let cfg = TrainConfig { lr: 1e39, warmup_steps: 0, epochs_stage1: 3, validate_every: 0, ..small() };
    let dir = tempfile::tempdir().unwrap();
    match train(&tr, &[], &cfg, dir.path()) {
        Err(NetError::NonFiniteLoss { stage, .. }) => assert_eq!(stage, 1),
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn config_errors_name_the_field() {
    let err = serde_json::from_str::<TrainConfig>(r#"{"epochs_stage1": 2, "batchsize": 4}"#).unwrap_err();
    assert!(err.to_string().contains("batchsize"), "{err}");
    let bad = TrainConfig { batch_size: 0, ..small() };
    assert!(matches!(bad.validate(), Err(NetError::InvalidConfig(f)) if f == "batch_size"));
    let bad = TrainConfig { model: ModelConfig { n_patches: 50, ..Default::default() }, ..small() };
    assert!(matches!(bad.validate(), Err(NetError::InvalidConfig(f)) if f == "model.n_patches"));
    let parsed: TrainConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
    assert_eq!(parsed.epochs_stage1, 30);
    assert_eq!(parsed.batch_size, 32);
}
