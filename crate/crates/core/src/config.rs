//! Run configuration as flat `dotted.key = value` text.
//!
//! Lines starting with `#` are comments. Every key has a default, so an empty
//! file is a complete configuration. Unknown and repeated keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dsp::{StftConfig, WindowKind};
use crate::error::{Error, Result};
use crate::featloss::{FeatureExtractorConfig, LossWeights, WeightSource};
use crate::mmdense::{DenseBlockConfig, ModelConfig};
use crate::separation::SeparationConfig;
use crate::tensor::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Source the model learns to extract.
    pub source: String,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    /// Seeds model initialization and patch sampling.
    pub seed: u64,
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Fixed validation set size, in batches, drawn once per run.
    pub validation_batches: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source: "vocals".into(),
            manifest: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            max_epochs: 24,
            // the tape holds ~0.7 GB per default patch; 4 fits commodity RAM
            batches_per_epoch: 3,
            batch_size: 4,
            validation_batches: 1,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub extractor: FeatureExtractorConfig,
    pub loss: LossWeights,
    pub optim: OptimizerState,
    pub separation: SeparationConfig,
    pub train: TrainConfig,
}

const BLOCKS: [&str; 3] = ["band", "full", "final"];
const BLOCK_FIELDS: [&str; 4] = ["layers", "growth_rate", "bottleneck_factor", "compression"];

/// Every key, in serialization order.
pub fn keys() -> Vec<String> {
    let mut k: Vec<String> = [
        "stft.fft_size",
        "stft.hop",
        "stft.window",
        "stft.patch_frames",
        "stft.sample_rate",
        "stft.keep_nyquist",
        "model.input_channels",
        "model.bins",
        "model.scales",
        "model.split_bins",
        "model.full_band",
    ]
    .map(String::from)
    .to_vec();
    for b in BLOCKS {
        k.extend(BLOCK_FIELDS.iter().map(|f| format!("model.{b}.{f}")));
    }
    k.extend(
        [
            "extractor.width_multiplier",
            "extractor.weights",
            "extractor.feature_tap",
            "extractor.style_taps",
            "extractor.seed",
            "loss.pixel",
            "loss.feature",
            "loss.style",
            "optim.learning_rate",
            "optim.dropped_rate",
            "optim.rho",
            "optim.epsilon",
            "optim.patience",
            "separation.batch_size",
            "separation.wiener_exponent",
            "train.source",
            "train.manifest",
            "train.output_dir",
            "train.seed",
            "train.max_epochs",
            "train.batches_per_epoch",
            "train.batch_size",
            "train.validation_batches",
            "train.precision",
        ]
        .map(String::from),
    );
    k
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    fn block(&self, name: &str) -> &DenseBlockConfig {
        match name {
            "band" => &self.model.band_block,
            "full" => &self.model.full_band_block,
            _ => &self.model.final_block,
        }
    }

    fn block_mut(&mut self, name: &str) -> &mut DenseBlockConfig {
        match name {
            "band" => &mut self.model.band_block,
            "full" => &mut self.model.full_band_block,
            _ => &mut self.model.final_block,
        }
    }

    /// Text form of one key's value.
    pub fn get(&self, key: &str) -> Result<String> {
        if let Some((block, field)) = block_key(key) {
            let b = self.block(block);
            return Ok(match field {
                "layers" => b.layers.to_string(),
                "growth_rate" => b.growth_rate.to_string(),
                "bottleneck_factor" => b.bottleneck_factor.to_string(),
                _ => b.compression.to_string(),
            });
        }
        Ok(match key {
            "stft.fft_size" => self.stft.fft_size.to_string(),
            "stft.hop" => self.stft.hop.to_string(),
            "stft.window" => match self.stft.window {
                WindowKind::Hann => "hann".into(),
                WindowKind::Rectangular => "rectangular".into(),
            },
            "stft.patch_frames" => self.stft.patch_frames.to_string(),
            "stft.sample_rate" => self.stft.sample_rate.to_string(),
            "stft.keep_nyquist" => self.stft.keep_nyquist.to_string(),
            "model.input_channels" => self.model.input_channels.to_string(),
            "model.bins" => self.model.bins.to_string(),
            "model.scales" => self.model.scales.to_string(),
            "model.split_bins" => self
                .model
                .layout
                .split_bins
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", "),
            "model.full_band" => self.model.layout.includes_full_band.to_string(),
            "extractor.width_multiplier" => self.extractor.width_multiplier.to_string(),
            "extractor.weights" => match &self.extractor.weight_source {
                WeightSource::SeededRandom => "seeded".into(),
                WeightSource::Checkpoint(p) => p.display().to_string(),
            },
            "extractor.feature_tap" => self.extractor.feature_tap.clone(),
            "extractor.style_taps" => self.extractor.style_taps.join(", "),
            "extractor.seed" => self.extractor.seed.to_string(),
            "loss.pixel" => self.loss.pixel.to_string(),
            "loss.feature" => self.loss.feature.to_string(),
            "loss.style" => self.loss.style.to_string(),
            "optim.learning_rate" => self.optim.learning_rate.to_string(),
            "optim.dropped_rate" => self.optim.dropped_rate.to_string(),
            "optim.rho" => self.optim.rho.to_string(),
            "optim.epsilon" => self.optim.epsilon.to_string(),
            "optim.patience" => self.optim.patience.to_string(),
            "separation.batch_size" => self.separation.batch_size.to_string(),
            "separation.wiener_exponent" => self.separation.wiener_exponent.to_string(),
            "train.source" => self.train.source.clone(),
            "train.manifest" => self.train.manifest.display().to_string(),
            "train.output_dir" => self.train.output_dir.display().to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.max_epochs" => self.train.max_epochs.to_string(),
            "train.batches_per_epoch" => self.train.batches_per_epoch.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.validation_batches" => self.train.validation_batches.to_string(),
            "train.precision" => match self.train.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            _ => return Err(Error::config(key, "unknown key")),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some((block, field)) = block_key(key) {
            let b = self.block_mut(block);
            match field {
                "layers" => b.layers = parse(key, v)?,
                "growth_rate" => b.growth_rate = parse(key, v)?,
                "bottleneck_factor" => b.bottleneck_factor = parse(key, v)?,
                _ => b.compression = parse(key, v)?,
            }
            return Ok(());
        }
        match key {
            "stft.fft_size" => self.stft.fft_size = parse(key, v)?,
            "stft.hop" => self.stft.hop = parse(key, v)?,
            "stft.window" => {
                self.stft.window = match v {
                    "hann" => WindowKind::Hann,
                    "rectangular" => WindowKind::Rectangular,
                    _ => return Err(Error::config(key, format!("expected hann or rectangular, got `{v}`"))),
                }
            }
            "stft.patch_frames" => self.stft.patch_frames = parse(key, v)?,
            "stft.sample_rate" => self.stft.sample_rate = parse(key, v)?,
            "stft.keep_nyquist" => self.stft.keep_nyquist = parse(key, v)?,
            "model.input_channels" => self.model.input_channels = parse(key, v)?,
            "model.bins" => self.model.bins = parse(key, v)?,
            "model.scales" => self.model.scales = parse(key, v)?,
            "model.split_bins" => {
                self.model.layout.split_bins = list(v).iter().map(|s| parse(key, s)).collect::<Result<_>>()?
            }
            "model.full_band" => self.model.layout.includes_full_band = parse(key, v)?,
            "extractor.width_multiplier" => self.extractor.width_multiplier = parse(key, v)?,
            "extractor.weights" => {
                self.extractor.weight_source = match v {
                    "seeded" => WeightSource::SeededRandom,
                    "" => return Err(Error::config(key, "expected `seeded` or a checkpoint path")),
                    path => WeightSource::Checkpoint(PathBuf::from(path)),
                }
            }
            "extractor.feature_tap" => self.extractor.feature_tap = v.to_string(),
            "extractor.style_taps" => self.extractor.style_taps = list(v),
            "extractor.seed" => self.extractor.seed = parse(key, v)?,
            "loss.pixel" => self.loss.pixel = parse(key, v)?,
            "loss.feature" => self.loss.feature = parse(key, v)?,
            "loss.style" => self.loss.style = parse(key, v)?,
            "optim.learning_rate" => self.optim.learning_rate = parse(key, v)?,
            "optim.dropped_rate" => self.optim.dropped_rate = parse(key, v)?,
            "optim.rho" => self.optim.rho = parse(key, v)?,
            "optim.epsilon" => self.optim.epsilon = parse(key, v)?,
            "optim.patience" => self.optim.patience = parse(key, v)?,
            "separation.batch_size" => self.separation.batch_size = parse(key, v)?,
            "separation.wiener_exponent" => self.separation.wiener_exponent = parse(key, v)?,
            "train.source" => self.train.source = v.to_string(),
            "train.manifest" => self.train.manifest = PathBuf::from(v),
            "train.output_dir" => self.train.output_dir = PathBuf::from(v),
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.batches_per_epoch" => self.train.batches_per_epoch = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.validation_batches" => self.train.validation_batches = parse(key, v)?,
            "train.precision" => {
                self.train.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::config(key, format!("expected f32 or f64, got `{v}`"))),
                }
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parse config text over the defaults. Does not validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, format!("set twice (line {})", n + 1)));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in keys() {
            // every listed key is known
            let v = self.get(&k).unwrap_or_default();
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.train.seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.model.validate()?;
        if self.model.bins != self.stft.bins() {
            return Err(Error::config(
                "model.bins",
                format!("{} does not match the {} bins the STFT produces", self.model.bins, self.stft.bins()),
            ));
        }
        self.loss.validate()?;
        if self.loss.needs_extractor() {
            self.extractor.validate()?;
        }
        let positive = [
            ("optim.learning_rate", self.optim.learning_rate),
            ("optim.dropped_rate", self.optim.dropped_rate),
            ("optim.epsilon", self.optim.epsilon),
            ("separation.wiener_exponent", self.separation.wiener_exponent),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("must be positive, got {v}")));
            }
        }
        if !(self.optim.rho > 0.0 && self.optim.rho < 1.0) {
            return Err(Error::config("optim.rho", format!("must be in (0, 1), got {}", self.optim.rho)));
        }
        let counts = [
            ("optim.patience", self.optim.patience),
            ("separation.batch_size", self.separation.batch_size),
            ("train.max_epochs", self.train.max_epochs),
            ("train.batches_per_epoch", self.train.batches_per_epoch),
            ("train.batch_size", self.train.batch_size),
            ("train.validation_batches", self.train.validation_batches),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if !crate::data::SOURCE_NAMES.contains(&self.train.source.as_str()) {
            return Err(Error::config(
                "train.source",
                format!("unknown source `{}`, expected one of {:?}", self.train.source, crate::data::SOURCE_NAMES),
            ));
        }
        Ok(())
    }
}

fn block_key(key: &str) -> Option<(&'static str, &str)> {
    let rest = key.strip_prefix("model.")?;
    let (block, field) = rest.split_once('.')?;
    let block = BLOCKS.into_iter().find(|b| *b == block)?;
    BLOCK_FIELDS.contains(&field).then_some((block, field))
}
