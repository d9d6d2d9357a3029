//! Multi-scale multi-band DenseNet: one magnitude-to-magnitude network per
//! source, built from sub-band branches, an optional full-band branch, and a
//! final dense block over their merged feature maps.
//!
//! Every branch is an encoder/decoder:
//!
//! ```text
//! init 3x3 conv -> [dense block -> down transition] x scales -> dense block
//!               -> [up transition (upsample, conv, concat skip, dense block)] x scales
//! ```

mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Graph, PoolMode, Real, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_params, save_params, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    pub layers: usize,
    pub growth_rate: usize,
    pub bottleneck_factor: usize,
    pub compression: f64,
}

impl DenseBlockConfig {
    pub fn new(layers: usize, growth_rate: usize) -> Self {
        Self {
            layers,
            growth_rate,
            bottleneck_factor: 4,
            compression: 0.2,
        }
    }

    pub fn output_channels(&self, input: usize) -> usize {
        input + self.layers * self.growth_rate
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck_factor * self.growth_rate
    }

    pub fn transition_channels(&self, input: usize) -> usize {
        ((self.compression * input as f64).ceil() as usize).max(1)
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.growth_rate == 0 || self.bottleneck_factor == 0 {
            return Err(Error::config(field, "growth rate and bottleneck factor must be positive"));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::config(field, format!("compression {} not in (0, 1]", self.compression)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandLayout {
    /// Frequency boundaries between sub-bands, strictly increasing in `(0, bins)`.
    pub split_bins: Vec<usize>,
    pub includes_full_band: bool,
}

impl Default for BandLayout {
    fn default() -> Self {
        Self {
            split_bins: vec![512],
            includes_full_band: true,
        }
    }
}

impl BandLayout {
    pub fn validate(&self, bins: usize) -> Result<()> {
        let mut prev = 0;
        for &b in &self.split_bins {
            if b <= prev || b >= bins {
                return Err(Error::invalid(
                    "band_split",
                    format!("boundaries {:?} must increase strictly within (0, {bins})", self.split_bins),
                ));
            }
            prev = b;
        }
        Ok(())
    }

    /// `(start, len)` of every sub-band.
    pub fn ranges(&self, bins: usize) -> Vec<(usize, usize)> {
        let mut edges = vec![0];
        edges.extend(&self.split_bins);
        edges.push(bins);
        edges.windows(2).map(|w| (w[0], w[1] - w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub bins: usize,
    pub scales: usize,
    pub band_block: DenseBlockConfig,
    pub full_band_block: DenseBlockConfig,
    pub final_block: DenseBlockConfig,
    pub layout: BandLayout,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            bins: 1025,
            scales: 3,
            // Sized so 24 epochs of desk-scale training fit in half an hour
            // on one core; every block is configurable.
            band_block: DenseBlockConfig::new(2, 6),
            full_band_block: DenseBlockConfig::new(2, 4),
            final_block: DenseBlockConfig::new(1, 4),
            layout: BandLayout::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.input_channels) {
            return Err(Error::config(
                "model.input_channels",
                format!("must be 1 or 2, got {}", self.input_channels),
            ));
        }
        self.layout
            .validate(self.bins)
            .map_err(|e| Error::config("model.split_bins", e.to_string()))?;
        self.band_block.validate("model.band")?;
        self.full_band_block.validate("model.full")?;
        self.final_block.validate("model.final")?;
        Ok(())
    }

    fn branches(&self) -> Vec<(String, &DenseBlockConfig)> {
        let mut out: Vec<(String, &DenseBlockConfig)> = (0..self.layout.split_bins.len() + 1)
            .map(|i| (format!("band{i}"), &self.band_block))
            .collect();
        if self.layout.includes_full_band {
            out.push(("full".into(), &self.full_band_block));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// He-uniform with the given fan-in.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    init: Init,
}

struct Planner {
    specs: Vec<ParamSpec>,
}

impl Planner {
    fn push(&mut self, name: String, shape: Vec<usize>, trainable: bool, init: Init) {
        self.specs.push(ParamSpec {
            name,
            shape,
            trainable,
            init,
        });
    }

    fn conv(&mut self, prefix: &str, out_ch: usize, in_ch: usize, k: usize, bias: bool) {
        self.push(
            format!("{prefix}.weight"),
            vec![out_ch, in_ch, k, k],
            true,
            Init::He(in_ch * k * k),
        );
        if bias {
            self.push(format!("{prefix}.bias"), vec![out_ch], true, Init::Zeros);
        }
    }

    fn bn(&mut self, prefix: &str, ch: usize) {
        self.push(format!("{prefix}.gamma"), vec![ch], true, Init::Ones);
        self.push(format!("{prefix}.beta"), vec![ch], true, Init::Zeros);
        self.push(format!("{prefix}.running_mean"), vec![ch], false, Init::Zeros);
        self.push(format!("{prefix}.running_var"), vec![ch], false, Init::Ones);
    }

    fn block(&mut self, prefix: &str, in_ch: usize, cfg: &DenseBlockConfig) -> usize {
        let mut ch = in_ch;
        let width = cfg.bottleneck_width();
        for l in 0..cfg.layers {
            let p = format!("{prefix}/layer{l}");
            self.bn(&format!("{p}/bn1"), ch);
            self.conv(&format!("{p}/conv1"), width, ch, 1, false);
            self.bn(&format!("{p}/bn2"), width);
            self.conv(&format!("{p}/conv2"), cfg.growth_rate, width, 3, false);
            ch += cfg.growth_rate;
        }
        ch
    }

    fn branch(&mut self, name: &str, in_ch: usize, scales: usize, cfg: &DenseBlockConfig) -> usize {
        let mut ch = cfg.growth_rate;
        self.conv(&format!("{name}/init/conv"), ch, in_ch, 3, true);
        let mut skips = Vec::with_capacity(scales);
        for s in 0..scales {
            ch = self.block(&format!("{name}/enc{s}"), ch, cfg);
            skips.push(ch);
            let t = cfg.transition_channels(ch);
            self.conv(&format!("{name}/down{s}/conv"), t, ch, 1, true);
            ch = t;
        }
        ch = self.block(&format!("{name}/mid"), ch, cfg);
        for s in (0..scales).rev() {
            let t = cfg.transition_channels(ch);
            self.conv(&format!("{name}/up{s}/conv"), t, ch, 3, true);
            ch = self.block(&format!("{name}/dec{s}"), t + skips[s], cfg);
        }
        ch
    }
}

/// Names, shapes and initializers of every tensor of a model, in creation
/// order. Also returns per-branch output channel counts.
pub fn plan(config: &ModelConfig) -> (Vec<ParamSpec>, Vec<usize>) {
    let mut p = Planner { specs: Vec::new() };
    let mut outs = Vec::new();
    for (name, cfg) in config.branches() {
        outs.push(p.branch(&name, config.input_channels, config.scales, cfg));
    }
    let bands = config.layout.split_bins.len() + 1;
    let merged = outs[0] + if config.layout.includes_full_band { outs[bands] } else { 0 };
    let ch = p.block("final/block", merged, &config.final_block);
    p.conv("final/out", config.input_channels, ch, 1, true);
    (p.specs, outs)
}

/// Named tensors of one model. Iteration order is lexicographic by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f64> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("model params", format!("missing tensor `{name}`")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// FNV-1a over names and value bits; equal checksums mean identical params.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (k, v) in &self.tensors {
            k.bytes().for_each(&mut eat);
            for x in v.data() {
                x.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; parameters are tracked for gradients.
    Train,
    /// Running statistics; parameters are tracked for gradients.
    Eval,
    /// Running statistics; nothing is tracked.
    Infer,
}

/// Result of one forward pass recorded on a graph.
pub struct ForwardPass {
    pub output: Var,
    pub bound: BTreeMap<String, Var>,
    pub bn_stats: Vec<(String, BatchNormStats)>,
}

impl ForwardPass {
    /// Gradients of every bound parameter after `graph.backward`.
    pub fn gradients<T: Real>(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| graph.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MmDenseNet<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> MmDenseNet<T> {
    /// He-uniform weights seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (specs, _) = plan(&config);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let t = match spec.init {
                Init::He(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = spec.shape.iter().product();
                    let data = (0..n).map(|_| T::from_real(rng.gen_range(-bound..bound))).collect();
                    Tensor::new(spec.shape.clone(), data)?
                }
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
            };
            tensors.insert(spec.name, t);
        }
        Ok(Self {
            config,
            params: ModelParams { tensors },
        })
    }

    /// Wrap existing params, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let (specs, _) = plan(&config);
        if specs.len() != params.tensors.len() {
            return Err(Error::invalid(
                "model params",
                format!("expected {} tensors, found {}", specs.len(), params.tensors.len()),
            ));
        }
        for spec in &specs {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("model params", &spec.shape, t.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn trainable_names(&self) -> Vec<String> {
        plan(&self.config)
            .0
            .into_iter()
            .filter(|s| s.trainable)
            .map(|s| s.name)
            .collect()
    }

    /// Forward `[B, input_channels, bins, frames]` magnitudes.
    pub fn forward(&self, graph: &mut Graph<T>, input: Var, mode: Mode) -> Result<ForwardPass> {
        self.forward_bound(graph, input, mode, BTreeMap::new())
    }

    /// Like [`forward`](Self::forward), but parameters already present in
    /// `bound` are used as given instead of being copied onto the graph.
    pub fn forward_bound(
        &self,
        graph: &mut Graph<T>,
        input: Var,
        mode: Mode,
        bound: BTreeMap<String, Var>,
    ) -> Result<ForwardPass> {
        let shape = graph.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != self.config.bins {
            return Err(Error::invalid(
                "mmdense forward",
                format!(
                    "input {shape:?} does not match [batch, {}, {}, frames]",
                    self.config.input_channels, self.config.bins
                ),
            ));
        }
        let mut ctx = Ctx {
            graph,
            params: &self.params,
            mode,
            bound,
            bn_stats: Vec::new(),
        };
        let output = ctx.model(&self.config, input)?;
        Ok(ForwardPass {
            output,
            bound: ctx.bound,
            bn_stats: ctx.bn_stats,
        })
    }

    /// Inference on a `[B, C, bins, frames]` batch with running statistics.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let pass = self.forward(&mut g, x, Mode::Infer)?;
        Ok(g.value(pass.output).clone())
    }

    /// Fold training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchNormStats)]) -> Result<()> {
        for (prefix, s) in stats {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let mean = self
                .params
                .tensors
                .get_mut(&format!("{prefix}.running_mean"))
                .ok_or_else(|| Error::invalid("running stats", format!("unknown `{prefix}`")))?;
            for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = T::from_real((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * m);
            }
            let var = self
                .params
                .tensors
                .get_mut(&format!("{prefix}.running_var"))
                .ok_or_else(|| Error::invalid("running stats", format!("unknown `{prefix}`")))?;
            for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = T::from_real((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v * unbias);
            }
        }
        Ok(())
    }
}

/// Split `[B, C, bins, W]` into contiguous frequency slices, plus a full-band
/// copy when the layout asks for one.
pub fn band_split<T: Real>(
    graph: &mut Graph<T>,
    magnitude: Var,
    layout: &BandLayout,
) -> Result<(Vec<Var>, Option<Var>)> {
    let bins = graph.shape(magnitude)[2];
    layout.validate(bins)?;
    let bands = layout
        .ranges(bins)
        .into_iter()
        .map(|(start, len)| graph.narrow(magnitude, 2, start, len))
        .collect::<Result<Vec<_>>>()?;
    let full = layout.includes_full_band.then_some(magnitude);
    Ok((bands, full))
}

struct Ctx<'a, T: Real> {
    graph: &'a mut Graph<T>,
    params: &'a ModelParams<T>,
    mode: Mode,
    bound: BTreeMap<String, Var>,
    bn_stats: Vec<(String, BatchNormStats)>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = match self.mode {
            Mode::Infer => self.graph.constant(t)?,
            Mode::Train | Mode::Eval => self.graph.param(t)?,
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, prefix: &str, x: Var, pad: usize, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.p(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, 1, pad)
    }

    fn bn_relu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm_relu(x, gamma, beta, BN_EPS)?;
                self.bn_stats.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval | Mode::Infer => {
                let rm = self.params.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                let rv = self.params.get(&format!("{prefix}.running_var"))?.data().to_vec();
                self.graph.batch_norm_relu_infer(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }

    fn dense_block(&mut self, prefix: &str, x: Var, cfg: &DenseBlockConfig) -> Result<Var> {
        let mut stack = x;
        for l in 0..cfg.layers {
            let p = format!("{prefix}/layer{l}");
            let h = self.bn_relu(&format!("{p}/bn1"), stack)?;
            let h = self.conv(&format!("{p}/conv1"), h, 0, false)?;
            let h = self.bn_relu(&format!("{p}/bn2"), h)?;
            let h = self.conv(&format!("{p}/conv2"), h, 1, false)?;
            stack = self.graph.concat_channels(stack, h)?;
        }
        Ok(stack)
    }

    fn down_transition(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let mut h = self.conv(prefix, x, 0, true)?;
        for axis in [2, 3] {
            if self.graph.shape(h)[axis] % 2 == 1 {
                h = self.graph.pad_reflect_end(h, axis)?;
            }
        }
        self.graph.pool2d(h, PoolMode::Average, 2, 2)
    }

    fn up_transition(&mut self, prefix: &str, x: Var, skip: Var) -> Result<Var> {
        let up = self.graph.upsample2d(x, 2)?;
        let mut h = self.conv(prefix, up, 1, true)?;
        let target = self.graph.shape(skip).to_vec();
        for axis in [2, 3] {
            let have = self.graph.shape(h)[axis];
            if have < target[axis] || have > target[axis] + 1 {
                return Err(Error::shape("up_transition", self.graph.shape(h), &target));
            }
            if have != target[axis] {
                h = self.graph.narrow(h, axis, 0, target[axis])?;
            }
        }
        self.graph.concat_channels(h, skip)
    }

    fn branch(&mut self, name: &str, x: Var, scales: usize, cfg: &DenseBlockConfig) -> Result<Var> {
        let mut h = self.conv(&format!("{name}/init/conv"), x, 1, true)?;
        let mut skips = Vec::with_capacity(scales);
        for s in 0..scales {
            h = self.dense_block(&format!("{name}/enc{s}"), h, cfg)?;
            skips.push(h);
            h = self.down_transition(&format!("{name}/down{s}/conv"), h)?;
        }
        h = self.dense_block(&format!("{name}/mid"), h, cfg)?;
        for s in (0..scales).rev() {
            h = self.up_transition(&format!("{name}/up{s}/conv"), h, skips[s])?;
            h = self.dense_block(&format!("{name}/dec{s}"), h, cfg)?;
        }
        Ok(h)
    }

    fn model(&mut self, config: &ModelConfig, input: Var) -> Result<Var> {
        let (bands, full) = band_split(self.graph, input, &config.layout)?;
        let mut outs = Vec::with_capacity(bands.len());
        for (i, band) in bands.into_iter().enumerate() {
            outs.push(self.branch(&format!("band{i}"), band, config.scales, &config.band_block)?);
        }
        let full_out = match full {
            Some(f) => Some(self.branch("full", f, config.scales, &config.full_band_block)?),
            None => None,
        };
        self.band_merge(config, &outs, full_out)
    }

    fn band_merge(&mut self, config: &ModelConfig, bands: &[Var], full: Option<Var>) -> Result<Var> {
        let mut merged = self.graph.concat(bands, 2)?;
        if let Some(f) = full {
            if self.graph.shape(f)[2] != self.graph.shape(merged)[2] {
                return Err(Error::shape("band_merge", self.graph.shape(merged), self.graph.shape(f)));
            }
            merged = self.graph.concat_channels(merged, f)?;
        }
        let h = self.dense_block("final/block", merged, &config.final_block)?;
        let h = self.conv("final/out", h, 0, true)?;
        self.graph.relu(h)
    }
}
