//! Training loop for one per-source model.
//!
//! A run directory receives `config.txt` (every key), `epochs.csv` (one row
//! per epoch), `best.ckpt` (lowest validation composite loss), `last.ckpt`
//! and `train_summary.json`. Nothing written depends on wall-clock time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::data::{load_spectra, DatasetManifest, PatchBatch, PatchSampler, Split};
use crate::error::{Error, Result};
use crate::featloss::{composite_loss, FeatureExtractor, LossBreakdown};
use crate::mmdense::{save_params, MmDenseNet, Mode};
use crate::tensor::{Graph, LrSchedule, Real, RmsProp, Tensor};

pub const CONFIG_FILE: &str = "config.txt";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const SUMMARY_FILE: &str = "train_summary.json";

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;
const VALID_STREAM: u64 = 0x7661_6c69_6400_0002;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    pub best_valid_composite: f64,
    pub best_valid_pixel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub source: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub min_valid_pixel: f64,
    pub min_valid_composite: f64,
    pub first_train_pixel: f64,
    pub min_train_pixel: f64,
    pub final_train_pixel: f64,
    pub lr_dropped_after: Option<usize>,
    pub parameter_count: usize,
    pub model_checksum: u64,
}

impl TrainSummary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        pixel: avg(|b| b.pixel),
        feature: avg(|b| b.feature),
        style: avg(|b| b.style),
        composite: avg(|b| b.composite),
    }
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub const EPOCH_COLUMNS: [&str; 12] = [
    "epoch",
    "learning_rate",
    "train_pixel",
    "train_feature",
    "train_style",
    "train_composite",
    "valid_pixel",
    "valid_feature",
    "valid_style",
    "valid_composite",
    "best_valid_composite",
    "best_valid_pixel",
];

impl EpochRecord {
    fn row(&self) -> Vec<String> {
        let mut r = vec![self.epoch.to_string(), cell(self.learning_rate)];
        for b in [&self.train, &self.valid] {
            r.extend([b.pixel, b.feature, b.style, b.composite].map(cell));
        }
        r.extend([self.best_valid_composite, self.best_valid_pixel].map(cell));
        r
    }
}

/// Read back `epochs.csv`. Empty cells become NaN.
pub fn read_epochs(run_dir: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(run_dir.join(EPOCHS_FILE))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            let s = row.get(i).unwrap_or("");
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|e| Error::Data(format!("{EPOCHS_FILE}: bad number `{s}`: {e}")))
            }
        };
        let b = |o: usize| -> Result<LossBreakdown> {
            Ok(LossBreakdown {
                pixel: num(o)?,
                feature: num(o + 1)?,
                style: num(o + 2)?,
                composite: num(o + 3)?,
            })
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            learning_rate: num(1)?,
            train: b(2)?,
            valid: b(6)?,
            best_valid_composite: num(10)?,
            best_valid_pixel: num(11)?,
        });
    }
    Ok(out)
}

struct Trainer<'a, T: Real> {
    cfg: &'a RunConfig,
    model: MmDenseNet<T>,
    extractor: Option<FeatureExtractor<T>>,
    optimizer: RmsProp<T>,
    trainable: Vec<String>,
}

impl<T: Real> Trainer<'_, T> {
    fn step(&mut self, batch: &PatchBatch, lr: f64) -> Result<LossBreakdown> {
        let mut g = Graph::<T>::new();
        let x = g.constant(batch.mixture.cast())?;
        let pass = self.model.forward(&mut g, x, Mode::Train)?;
        let target: Tensor<T> = batch.target.cast();
        let loss = composite_loss(&mut g, pass.output, &target, &self.cfg.loss, self.extractor.as_ref(), false)?;
        g.backward(loss.composite)?;
        let breakdown = loss.breakdown(&g);
        let mut grads = pass.gradients(&g);
        drop(g);
        let grads: Vec<Tensor<T>> = self
            .trainable
            .iter()
            .map(|n| grads.remove(n).ok_or_else(|| Error::invalid("train", format!("no gradient for `{n}`"))))
            .collect::<Result<_>>()?;
        let mut params: Vec<&mut Tensor<T>> = self
            .model
            .params
            .tensors
            .iter_mut()
            .filter(|(k, _)| self.trainable.binary_search(k).is_ok())
            .map(|(_, v)| v)
            .collect();
        self.optimizer.step(lr, &mut params, &grads.iter().collect::<Vec<_>>())?;
        self.model.update_running_stats(&pass.bn_stats)?;
        Ok(breakdown)
    }

    fn validate(&self, batches: &[PatchBatch]) -> Result<LossBreakdown> {
        let mut out = Vec::with_capacity(batches.len());
        for b in batches {
            let mut g = Graph::<T>::new();
            let x = g.constant(b.mixture.cast())?;
            let pass = self.model.forward(&mut g, x, Mode::Infer)?;
            let target: Tensor<T> = b.target.cast();
            let loss = composite_loss(&mut g, pass.output, &target, &self.cfg.loss, self.extractor.as_ref(), false)?;
            out.push(loss.breakdown(&g));
        }
        Ok(mean_breakdown(&out))
    }
}

fn non_finite(what: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} during {what} in epoch {epoch}"),
        },
        other => other,
    }
}

/// Train per `cfg`, writing the run directory. `on_epoch` sees each record
/// as it is produced.
pub fn train(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainSummary> {
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, on_epoch),
        Precision::F64 => train_typed::<f64>(cfg, on_epoch),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let tc = &cfg.train;
    let manifest = DatasetManifest::load(&tc.manifest)?;
    let channels = cfg.model.input_channels;
    let train_tracks = load_spectra(&manifest, Split::Train, &tc.source, channels, &cfg.stft)?;
    if train_tracks.is_empty() {
        return Err(Error::Data(format!("{}: no training tracks", tc.manifest.display())));
    }
    let mut valid_tracks = load_spectra(&manifest, Split::Valid, &tc.source, channels, &cfg.stft)?;
    if valid_tracks.is_empty() {
        log::warn!("no validation tracks; validating on training tracks");
        valid_tracks = train_tracks.clone();
    }
    let mut sampler = PatchSampler::new(train_tracks, cfg.stft.patch_frames, tc.batch_size, tc.seed ^ TRAIN_STREAM)?;
    let mut vsampler = PatchSampler::new(valid_tracks, cfg.stft.patch_frames, tc.batch_size, tc.seed ^ VALID_STREAM)?;
    let valid: Vec<PatchBatch> = (0..tc.validation_batches)
        .map(|_| vsampler.next_batch())
        .collect::<Result<_>>()?;

    let model = MmDenseNet::<T>::new(cfg.model_config())?;
    let extractor = if cfg.loss.needs_extractor() {
        Some(FeatureExtractor::<T>::new(cfg.extractor.clone())?)
    } else {
        None
    };
    let extractor_checksum = extractor.as_ref().map(|e| e.params.checksum());
    let mut trainable = model.trainable_names();
    trainable.sort();
    let mut t = Trainer {
        cfg,
        model,
        extractor,
        optimizer: RmsProp::new(cfg.optim.rho, cfg.optim.epsilon),
        trainable,
    };

    let dir = &tc.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    let mut log = csv::Writer::from_path(dir.join(EPOCHS_FILE))?;
    log.write_record(EPOCH_COLUMNS)?;

    let mut schedule = LrSchedule::new(&cfg.optim);
    let mut records: Vec<EpochRecord> = Vec::new();
    let (mut best_c, mut best_p, mut best_epoch) = (f64::INFINITY, f64::INFINITY, 0);
    for epoch in 1..=tc.max_epochs {
        let lr = schedule.learning_rate();
        let mut losses = Vec::with_capacity(tc.batches_per_epoch);
        for _ in 0..tc.batches_per_epoch {
            let batch = sampler.next_batch()?;
            losses.push(t.step(&batch, lr).map_err(|e| non_finite("training", epoch, e))?);
        }
        let train = mean_breakdown(&losses);
        let valid = t.validate(&valid).map_err(|e| non_finite("validation", epoch, e))?;
        if !train.composite.is_finite() || !valid.composite.is_finite() {
            return Err(Error::NonFinite {
                op: format!("loss in epoch {epoch}"),
            });
        }
        if valid.composite < best_c {
            best_c = valid.composite;
            best_epoch = epoch;
            save_params(&t.model.params, &dir.join(BEST_CHECKPOINT))?;
        }
        best_p = best_p.min(valid.pixel);
        let rec = EpochRecord {
            epoch,
            learning_rate: lr,
            train,
            valid,
            best_valid_composite: best_c,
            best_valid_pixel: best_p,
        };
        log.write_record(rec.row())?;
        log.flush()?;
        schedule.observe(valid.composite);
        on_epoch(&rec);
        records.push(rec);
    }
    save_params(&t.model.params, &dir.join(LAST_CHECKPOINT))?;
    if let (Some(before), Some(ex)) = (extractor_checksum, &t.extractor) {
        if ex.params.checksum() != before {
            return Err(Error::invalid("train", "feature extractor weights changed during training"));
        }
    }
    let train_pixels: Vec<f64> = records.iter().map(|r| r.train.pixel).collect();
    let summary = TrainSummary {
        source: tc.source.clone(),
        seed: tc.seed,
        epochs: records.len(),
        best_epoch,
        min_valid_pixel: best_p,
        min_valid_composite: best_c,
        first_train_pixel: train_pixels[0],
        min_train_pixel: train_pixels.iter().copied().fold(f64::INFINITY, f64::min),
        final_train_pixel: *train_pixels.last().unwrap_or(&f64::NAN),
        lr_dropped_after: schedule.dropped_at(),
        parameter_count: t.model.params.count(),
        model_checksum: t.model.params.checksum(),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Read the config a run was trained with.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

/// Best checkpoint of a run directory.
pub fn best_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join(BEST_CHECKPOINT)
}
