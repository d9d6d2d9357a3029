//! Composite spectrogram loss: a weighted sum of the pixel-level L2 loss and
//! feature/style reconstruction losses measured in the activations of a
//! frozen VGG-16-topology convolutional network.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdense::{load_params, ModelParams};
use crate::tensor::{Graph, PoolMode, Real, Tensor, Var};

/// Convolutions per stage of the VGG-16 stack, up to its fourth stage.
pub const VGG_STAGES: [usize; 4] = [2, 2, 3, 3];
/// Full-width channel counts per stage.
pub const VGG_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Smallest spatial extent the stack accepts (three 2x2 pools before stage 4).
pub const MIN_EXTENT: usize = 8;

const NORMALIZER_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightSource {
    SeededRandom,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    pub width_multiplier: f64,
    pub weight_source: WeightSource,
    /// Layer id such as `relu3_3`.
    pub feature_tap: String,
    pub style_taps: Vec<String>,
    pub seed: u64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 0.25,
            weight_source: WeightSource::SeededRandom,
            feature_tap: "relu3_3".into(),
            style_taps: ["relu1_2", "relu2_2", "relu3_3", "relu4_3"]
                .map(String::from)
                .to_vec(),
            seed: 0,
        }
    }
}

/// Every layer id of the stack, in order.
pub fn layer_ids() -> Vec<String> {
    VGG_STAGES
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (1..=n).map(move |i| format!("relu{}_{i}", s + 1)))
        .collect()
}

impl FeatureExtractorConfig {
    pub fn stage_widths(&self) -> [usize; 4] {
        VGG_WIDTHS.map(|w| ((w as f64 * self.width_multiplier).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::config(
                "extractor.width_multiplier",
                format!("must be positive, got {}", self.width_multiplier),
            ));
        }
        let ids = layer_ids();
        if !ids.contains(&self.feature_tap) {
            return Err(Error::config(
                "extractor.feature_tap",
                format!("unknown layer `{}`", self.feature_tap),
            ));
        }
        if let Some(bad) = self.style_taps.iter().find(|t| !ids.contains(t)) {
            return Err(Error::config("extractor.style_taps", format!("unknown layer `{bad}`")));
        }
        Ok(())
    }
}

/// Frozen convolutional stack. Its weights never enter an optimizer.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Real = f64> {
    pub config: FeatureExtractorConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(config: FeatureExtractorConfig) -> Result<Self> {
        config.validate()?;
        let specs = Self::plan(&config);
        let params = match &config.weight_source {
            WeightSource::SeededRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let mut tensors = BTreeMap::new();
                for (name, shape) in specs {
                    let t = if name.ends_with(".weight") {
                        let fan_in = shape[1] * shape[2] * shape[3];
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let n: usize = shape.iter().product();
                        let data = (0..n).map(|_| T::from_real(rng.gen_range(-bound..bound))).collect();
                        Tensor::new(shape, data)?
                    } else {
                        Tensor::zeros(shape)
                    };
                    tensors.insert(name, t);
                }
                ModelParams { tensors }
            }
            WeightSource::Checkpoint(path) => {
                let params = load_params::<T>(path)?;
                for (name, shape) in &specs {
                    let t = params.get(name)?;
                    if t.shape() != shape.as_slice() {
                        return Err(Error::shape("feature extractor weights", shape, t.shape()));
                    }
                }
                params
            }
        };
        Ok(Self { config, params })
    }

    fn plan(config: &FeatureExtractorConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = 3;
        for (s, (&n, &w)) in VGG_STAGES.iter().zip(&config.stage_widths()).enumerate() {
            for i in 1..=n {
                out.push((format!("conv{}_{i}.weight", s + 1), vec![w, in_ch, 3, 3]));
                out.push((format!("conv{}_{i}.bias", s + 1), vec![w]));
                in_ch = w;
            }
        }
        out
    }

    /// Forward `[B, 3, H, W]` images and return the activations at `taps`.
    /// Extractor weights are recorded as constants, so no gradient reaches them.
    pub fn features(&self, graph: &mut Graph<T>, image: Var, taps: &[&str]) -> Result<BTreeMap<String, Var>> {
        let shape = graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid(
                "extract_features",
                format!("expected [batch, 3, H, W], got {shape:?}"),
            ));
        }
        if shape[2] < MIN_EXTENT || shape[3] < MIN_EXTENT {
            return Err(Error::invalid(
                "extract_features",
                format!(
                    "spatial extent {}x{} below the minimum {MIN_EXTENT}x{MIN_EXTENT}",
                    shape[2], shape[3]
                ),
            ));
        }
        let ids = layer_ids();
        let last = taps
            .iter()
            .map(|t| {
                ids.iter()
                    .position(|i| i == t)
                    .ok_or_else(|| Error::invalid("extract_features", format!("unknown tap `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        let mut out = BTreeMap::new();
        let mut h = image;
        let mut layer = 0;
        'stages: for (s, &n) in VGG_STAGES.iter().enumerate() {
            if s > 0 {
                h = graph.pool2d(h, PoolMode::Max, 2, 2)?;
            }
            for i in 1..=n {
                let w = graph.constant(self.params.get(&format!("conv{}_{i}.weight", s + 1))?.clone())?;
                let b = graph.constant(self.params.get(&format!("conv{}_{i}.bias", s + 1))?.clone())?;
                h = graph.conv2d(h, w, Some(b), 1, 1)?;
                h = graph.relu(h)?;
                let id = &ids[layer];
                if taps.contains(&id.as_str()) {
                    out.insert(id.clone(), h);
                }
                if layer == last {
                    break 'stages;
                }
                layer += 1;
            }
        }
        Ok(out)
    }

    /// Tensor-level convenience for [`features`](Self::features).
    pub fn extract(&self, image: &Tensor<T>, taps: &[&str]) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone())?;
        let feats = self.features(&mut g, x, taps)?;
        Ok(feats.into_iter().map(|(k, v)| (k, g.value(v).clone())).collect())
    }

    /// Layers needed for the requested terms, deduplicated.
    pub fn taps(&self, feature: bool, style: bool) -> Vec<&str> {
        let mut taps: Vec<&str> = feature
            .then_some(self.config.feature_tap.as_str())
            .into_iter()
            .chain(self.config.style_taps.iter().map(String::as_str).filter(|_| style))
            .collect();
        taps.sort_unstable();
        taps.dedup();
        taps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub feature: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 0.5,
            feature: 0.25,
            style: 0.25,
        }
    }
}

impl LossWeights {
    pub const PIXEL_ONLY: Self = Self {
        pixel: 1.0,
        feature: 0.0,
        style: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [("pixel", self.pixel), ("feature", self.feature), ("style", self.style)];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), format!("weight must be >= 0, got {w}")));
            }
        }
        if all.iter().all(|&(_, w)| w == 0.0) {
            return Err(Error::config("loss", "at least one weight must be positive"));
        }
        Ok(())
    }

    pub fn needs_extractor(&self) -> bool {
        self.feature > 0.0 || self.style > 0.0
    }

    pub fn combine(&self, b: &LossBreakdown) -> f64 {
        let mut total = self.pixel * b.pixel;
        if self.feature > 0.0 {
            total += self.feature * b.feature;
        }
        if self.style > 0.0 {
            total += self.style * b.style;
        }
        total
    }
}

/// Values of every loss term. Terms that were not evaluated are `NaN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub feature: f64,
    pub style: f64,
    pub composite: f64,
}

/// Mean over all elements of the squared difference.
pub fn pixel_l2_loss<T: Real>(graph: &mut Graph<T>, est: Var, target: Var) -> Result<Var> {
    let n = graph.value(est).len().max(1);
    graph.squared_distance(est, target, 1.0 / n as f64)
}

/// Largest magnitude in a target batch, floored so silent batches map to zero images.
pub fn image_normalizer<T: Real>(target: &Tensor<T>) -> f64 {
    target.max_abs().as_f64().max(NORMALIZER_FLOOR)
}

/// `[B, ch, H, W]` magnitudes to `[B, 3, H, W]` images: mono is replicated,
/// stereo becomes `[left, right, mean]`; everything is divided by `normalizer`.
pub fn spectrogram_to_image<T: Real>(graph: &mut Graph<T>, mag: Var, normalizer: f64) -> Result<Var> {
    let shape = graph.shape(mag).to_vec();
    if shape.len() != 4 || !(1..=2).contains(&shape[1]) {
        return Err(Error::invalid(
            "spectrogram_to_image",
            format!("expected [batch, 1 or 2, bins, frames], got {shape:?}"),
        ));
    }
    let image = if shape[1] == 1 {
        graph.concat(&[mag, mag, mag], 1)?
    } else {
        let left = graph.narrow(mag, 1, 0, 1)?;
        let right = graph.narrow(mag, 1, 1, 1)?;
        let sum = graph.add(left, right)?;
        let mean = graph.scale(sum, 0.5)?;
        graph.concat(&[left, right, mean], 1)?
    };
    graph.scale(image, 1.0 / normalizer)
}

/// Tensor-level convenience for [`spectrogram_to_image`].
pub fn spectrogram_to_image_tensor<T: Real>(mag: &Tensor<T>, normalizer: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(mag.clone())?;
    let y = spectrogram_to_image(&mut g, x, normalizer)?;
    Ok(g.value(y).clone())
}

/// `||est - target||^2 / (C H W)`, averaged over the batch.
pub fn feature_recon_loss<T: Real>(graph: &mut Graph<T>, est: Var, target: Var) -> Result<Var> {
    let n = graph.value(est).len().max(1);
    graph.squared_distance(est, target, 1.0 / n as f64)
}

/// Sum over taps of the squared Frobenius norm of the Gram difference,
/// averaged over the batch.
pub fn style_recon_loss<T: Real>(graph: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(est, target) in pairs {
        let batch = graph.shape(est)[0].max(1);
        let ge = graph.gram(est)?;
        let gt = graph.gram(target)?;
        let d = graph.squared_distance(ge, gt, 1.0 / batch as f64)?;
        total = Some(match total {
            Some(t) => graph.add(t, d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::invalid("style_recon_loss", "no style taps"))
}

/// Loss terms recorded on a graph. Terms are only recorded when their
/// weight is positive or when all terms were requested.
pub struct CompositeLoss {
    pub composite: Var,
    pub pixel: Var,
    pub feature: Option<Var>,
    pub style: Option<Var>,
}

impl CompositeLoss {
    pub fn breakdown<T: Real>(&self, graph: &Graph<T>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(f64::NAN, |v| graph.value(v).item().as_f64());
        LossBreakdown {
            pixel: get(Some(self.pixel)),
            feature: get(self.feature),
            style: get(self.style),
            composite: get(Some(self.composite)),
        }
    }
}

/// Composite loss between estimated magnitudes `est` (a graph variable) and
/// fixed target magnitudes. Gradients flow only into `est`.
pub fn composite_loss<T: Real>(
    graph: &mut Graph<T>,
    est: Var,
    target: &Tensor<T>,
    weights: &LossWeights,
    extractor: Option<&FeatureExtractor<T>>,
    all_terms: bool,
) -> Result<CompositeLoss> {
    if graph.shape(est) != target.shape() {
        return Err(Error::shape("composite_loss", graph.shape(est), target.shape()));
    }
    let tgt = graph.constant(target.clone())?;
    let pixel = pixel_l2_loss(graph, est, tgt)?;
    let want_feature = weights.feature > 0.0 || all_terms;
    let want_style = weights.style > 0.0 || all_terms;
    let (mut feature, mut style) = (None, None);
    if want_feature || want_style {
        let ex = extractor.ok_or_else(|| {
            Error::invalid("composite_loss", "feature or style term requested without an extractor")
        })?;
        let norm = image_normalizer(target);
        let taps = ex.taps(want_feature, want_style);
        let target_feats = {
            let image = spectrogram_to_image_tensor(target, norm)?;
            ex.extract(&image, &taps)?
        };
        let image = spectrogram_to_image(graph, est, norm)?;
        let est_feats = ex.features(graph, image, &taps)?;
        let constant = |name: &str, graph: &mut Graph<T>| -> Result<Var> {
            graph.constant(target_feats[name].clone())
        };
        if want_feature {
            let tap = ex.config.feature_tap.as_str();
            let t = constant(tap, graph)?;
            feature = Some(feature_recon_loss(graph, est_feats[tap], t)?);
        }
        if want_style {
            let mut pairs = Vec::with_capacity(ex.config.style_taps.len());
            for tap in &ex.config.style_taps {
                let t = constant(tap, graph)?;
                pairs.push((est_feats[tap.as_str()], t));
            }
            style = Some(style_recon_loss(graph, &pairs)?);
        }
    }
    let mut composite = graph.scale(pixel, weights.pixel)?;
    if weights.feature > 0.0 {
        let f = graph.scale(feature.expect("feature term"), weights.feature)?;
        composite = graph.add(composite, f)?;
    }
    if weights.style > 0.0 {
        let s = graph.scale(style.expect("style term"), weights.style)?;
        composite = graph.add(composite, s)?;
    }
    Ok(CompositeLoss {
        composite,
        pixel,
        feature,
        style,
    })
}
