//! End-to-end training properties on a miniature synthetic dataset:
//! bit-exact seed determinism, the pure-classification history identity,
//! and history file round-trips.

use forgenet_core::dataio::{parse_objectives, synth_dataset, Dataset, SynthParams};
use forgenet_core::model::ArchConfig;
use forgenet_core::objective::LossWeights;
use forgenet_core::trainer::{train, EpochRecord, TrainConfig};
use std::path::Path;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_size: 48,
        conv_channels: vec![4, 6, 6, 6, 8, 8, 8, 8],
        ..ArchConfig::default()
    }
}

fn make_split(dir: &Path, objectives: &str, count: usize, seed: u64) -> Dataset {
    let params = SynthParams {
        count_per_class: count,
        size: 48,
        seed,
        ..SynthParams::default()
    };
    synth_dataset(&params, &parse_objectives(objectives).unwrap(), dir).unwrap();
    Dataset::open(&dir.join("manifest.json")).unwrap()
}

#[test]
fn identical_seeds_reproduce_identical_histories() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train_ds = make_split(&tmp.path().join("train"), "fake", 10, 1);
    let mut val_ds = make_split(&tmp.path().join("val"), "fake", 4, 2);
    let arch = tiny_arch();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        early_stop_patience: 0,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train(&mut train_ds, &mut val_ds, &arch, &cfg, None).unwrap();
    let b = train(&mut train_ds, &mut val_ds, &arch, &cfg, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.flat_params(), b.model.flat_params());

    let differently = TrainConfig { seed: 43, ..cfg };
    let c = train(&mut train_ds, &mut val_ds, &arch, &differently, None).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn classification_only_history_has_loss_equal_to_cls() {
    let tmp = tempfile::tempdir().unwrap();
    // k = 0 manifests: no segmentation objectives at all
    let mut train_ds = make_split(&tmp.path().join("train"), "none", 10, 3);
    let mut val_ds = make_split(&tmp.path().join("val"), "none", 4, 4);
    let arch = ArchConfig {
        num_seg_heads: 0,
        ..tiny_arch()
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        weights: LossWeights::classification_only(),
        early_stop_patience: 0,
        ..TrainConfig::default()
    };
    let outcome = train(&mut train_ds, &mut val_ds, &arch, &cfg, None).unwrap();
    for rec in &outcome.history {
        assert_eq!(
            rec.loss.to_bits(),
            rec.loss_cls.to_bits(),
            "epoch {}",
            rec.epoch
        );
        assert!(rec.loss_seg.is_empty());
    }
}

#[test]
fn k_mismatch_between_manifest_and_model_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train_ds = make_split(&tmp.path().join("train"), "fake", 6, 1);
    let mut val_ds = make_split(&tmp.path().join("val"), "fake", 3, 2);
    let arch = ArchConfig {
        num_seg_heads: 2,
        ..tiny_arch()
    };
    let cfg = TrainConfig {
        epochs: 1,
        weights: LossWeights {
            lambda_cls: 0.6,
            lambda_seg: vec![0.2, 0.2],
        },
        ..TrainConfig::default()
    };
    let err = train(&mut train_ds, &mut val_ds, &arch, &cfg, None).unwrap_err();
    assert!(err.to_string().contains("k="), "{err}");
}

#[test]
fn history_file_and_best_checkpoint_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train_ds = make_split(&tmp.path().join("train"), "fake", 8, 5);
    let mut val_ds = make_split(&tmp.path().join("val"), "fake", 3, 6);
    let out_dir = tmp.path().join("run");
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        early_stop_patience: 0,
        ..TrainConfig::default()
    };
    let outcome = train(
        &mut train_ds,
        &mut val_ds,
        &tiny_arch(),
        &cfg,
        Some(&out_dir),
    )
    .unwrap();

    let text = std::fs::read_to_string(out_dir.join("history.jsonl")).unwrap();
    let parsed: Vec<EpochRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed, outcome.history);

    let restored = forgenet_core::checkpoint::load_checkpoint(&out_dir.join("best")).unwrap();
    assert_eq!(restored.flat_params(), outcome.model.flat_params());
}
