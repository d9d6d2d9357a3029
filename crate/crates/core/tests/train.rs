use std::path::Path;

use specsep_core::config::RunConfig;
use specsep_core::data::{make_synthetic_dataset, SynthSpec};
use specsep_core::train::{self, read_epochs, TrainSummary};
use specsep_core::Error;

fn tiny(root: &Path, out: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "stft.fft_size=256",
        "stft.hop=128",
        "stft.patch_frames=16",
        "stft.sample_rate=8000",
        "model.bins=129",
        "model.split_bins=64",
        "model.scales=2",
        "model.band.layers=1",
        "model.full.layers=1",
        "model.final.layers=1",
        "train.max_epochs=6",
        "train.batch_size=2",
        "train.batches_per_epoch=2",
        "optim.patience=1",
    ])
    .unwrap();
    cfg.train.manifest = root.join("data");
    cfg.train.output_dir = root.join(out);
    cfg
}

fn dataset(root: &Path) {
    let spec = SynthSpec {
        duration: 2.0,
        sample_rate: 8000,
        ..SynthSpec::default()
    };
    make_synthetic_dataset(&spec, &root.join("data")).unwrap();
}

#[test]
fn training_is_reproducible_and_tracks_the_best_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let (a, b) = (tiny(tmp.path(), "a"), tiny(tmp.path(), "b"));
    let mut seen = Vec::new();
    let sa = train::train(&a, &mut |r| seen.push(r.epoch)).unwrap();
    let sb = train::train(&b, &mut |_| {}).unwrap();
    assert_eq!(seen, (1..=6).collect::<Vec<_>>());
    assert_eq!(sa, sb);
    for f in ["epochs.csv", "best.ckpt", "last.ckpt", "train_summary.json"] {
        let read = |c: &RunConfig| std::fs::read(c.train.output_dir.join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }
    assert_eq!(TrainSummary::load(&a.train.output_dir).unwrap(), sa);

    let epochs = read_epochs(&a.train.output_dir).unwrap();
    assert_eq!(epochs.len(), 6);
    let mut best = f64::INFINITY;
    for e in &epochs {
        best = best.min(e.valid.composite);
        assert_eq!(e.best_valid_composite, best);
    }
    let best_epoch = epochs.iter().find(|e| e.valid.composite == best).unwrap().epoch;
    assert_eq!(sa.best_epoch, best_epoch);
    // the learning rate only ever drops once
    let rates: Vec<f64> = epochs.iter().map(|e| e.learning_rate).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    assert!(rates.iter().all(|&r| r == 1e-3 || r == 1e-4));

    let mut other = tiny(tmp.path(), "c");
    other.train.seed = 1;
    assert_ne!(train::train(&other, &mut |_| {}).unwrap().model_checksum, sa.model_checksum);
}

#[test]
fn divergence_is_reported_with_its_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let mut cfg = tiny(tmp.path(), "run");
    cfg.optim.learning_rate = 1e30;
    match train::train(&cfg, &mut |_| {}) {
        Err(Error::NonFinite { op }) => assert!(op.contains("epoch"), "{op}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "run");
    let e = train::train(&cfg, &mut |_| {}).unwrap_err();
    assert!(!matches!(e, Error::Config { .. }), "{e}");
}
