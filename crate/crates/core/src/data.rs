//! WAV ingestion, stem sets on disk, dataset manifests, synthetic datasets,
//! and seeded training-patch sampling.
//!
//! A dataset is a directory holding `manifest.json` and one directory per
//! track with `mixture.wav` plus one WAV per stem (`vocals.wav`, ...).

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, StftConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SOURCE_NAMES: [&str; 4] = ["vocals", "drums", "bass", "other"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MIXTURE_FILE: &str = "mixture.wav";

/// Relative tolerance of the mixture-equals-sum-of-stems check.
pub const MIXTURE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// `[channel][sample]`.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if !(1..=2).contains(&samples.len()) {
            return Err(Error::Data(format!("clips have 1 or 2 channels, got {}", samples.len())));
        }
        if samples.iter().any(|c| c.len() != samples[0].len()) {
            return Err(Error::Data("channel lengths differ".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

fn wav_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Read 16-bit PCM (scaled by 1/32768) or 32-bit float WAV, 1-2 channels.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let found = format!("{:?} {}-bit, {} channel(s)", spec.sample_format, spec.bits_per_sample, channels);
    if !(1..=2).contains(&channels) {
        return Err(wav_err(path, format!("unsupported format: {found}")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        _ => return Err(wav_err(path, format!("unsupported format: {found}"))),
    }
    .map_err(|e| wav_err(path, e.to_string()))?;
    if !interleaved.len().is_multiple_of(channels) {
        return Err(wav_err(path, "truncated sample data"));
    }
    let mut samples = vec![Vec::with_capacity(interleaved.len() / channels); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            samples[c].push(v);
        }
    }
    AudioClip::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e.to_string()))
}

/// Write 32-bit float WAV.
pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: clip.channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for i in 0..clip.len() {
        for ch in &clip.samples {
            w.write_sample(ch[i] as f32).map_err(|e| wav_err(path, e.to_string()))?;
        }
    }
    w.finalize().map_err(|e| wav_err(path, e.to_string()))
}

pub fn downmix_mono(clip: &AudioClip) -> AudioClip {
    if clip.channels() == 1 {
        return clip.clone();
    }
    let n = clip.channels() as f64;
    let mono = (0..clip.len())
        .map(|i| clip.samples.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect();
    AudioClip {
        samples: vec![mono],
        sample_rate: clip.sample_rate,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemSet {
    pub mixture: AudioClip,
    pub stems: BTreeMap<String, AudioClip>,
}

impl StemSet {
    /// Hard errors for mismatched clips; the returned strings are warnings
    /// (a full stem set whose sum strays from the mixture).
    pub fn validate(&self) -> Result<Vec<String>> {
        for (name, s) in &self.stems {
            if !SOURCE_NAMES.contains(&name.as_str()) {
                return Err(Error::Data(format!("unknown stem `{name}`")));
            }
            let m = &self.mixture;
            if s.sample_rate != m.sample_rate || s.channels() != m.channels() || s.len() != m.len() {
                return Err(Error::Data(format!(
                    "stem `{name}` is {} Hz x {} ch x {} samples, mixture is {} Hz x {} ch x {} samples",
                    s.sample_rate,
                    s.channels(),
                    s.len(),
                    m.sample_rate,
                    m.channels(),
                    m.len()
                )));
            }
        }
        let mut warnings = Vec::new();
        if self.stems.len() == SOURCE_NAMES.len() {
            let err = self.mixture_error();
            if err > MIXTURE_TOLERANCE {
                warnings.push(format!("mixture differs from the sum of stems by {err:.3e} (relative)"));
            }
        }
        Ok(warnings)
    }

    /// `||mixture - sum(stems)|| / ||mixture||`.
    pub fn mixture_error(&self) -> f64 {
        let (mut diff, mut norm) = (0.0, 0.0);
        for (c, mix) in self.mixture.samples.iter().enumerate() {
            for (i, &m) in mix.iter().enumerate() {
                let sum: f64 = self.stems.values().map(|s| s.samples[c][i]).sum();
                diff += (m - sum).powi(2);
                norm += m * m;
            }
        }
        if norm == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (diff / norm).sqrt()
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_wav(&self.mixture, &dir.join(MIXTURE_FILE))?;
        for (name, clip) in &self.stems {
            save_wav(clip, &dir.join(format!("{name}.wav")))?;
        }
        Ok(())
    }

    /// Load `mixture.wav` and the named stems from a track directory.
    pub fn load(dir: &Path, stems: &[String]) -> Result<Self> {
        let mixture = load_wav(&dir.join(MIXTURE_FILE))?;
        let stems = stems
            .iter()
            .map(|n| Ok((n.clone(), load_wav(&dir.join(format!("{n}.wav")))?)))
            .collect::<Result<_>>()?;
        let set = Self { mixture, stems };
        for w in set.validate()? {
            log::warn!("{}: {w}", dir.display());
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    /// Directory relative to the dataset root.
    pub dir: String,
    pub split: Split,
    /// Seconds.
    pub duration: f64,
    pub stems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub tracks: Vec<TrackEntry>,
}

impl DatasetManifest {
    /// Read `manifest.json` from `path`, or from `path/manifest.json` when
    /// `path` is a directory, and check it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", file.display())))?;
        let mut m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("manifest {}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.root.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// No track listed twice and every listed file present.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tracks {
            if !seen.insert(&t.dir) {
                return Err(Error::Data(format!("track `{}` is listed more than once", t.dir)));
            }
            let dir = self.root.join(&t.dir);
            let files = std::iter::once(MIXTURE_FILE.to_string()).chain(t.stems.iter().map(|s| format!("{s}.wav")));
            for f in files {
                if !dir.join(&f).is_file() {
                    return Err(Error::Data(format!("track `{}`: missing {f}", t.dir)));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&TrackEntry> {
        self.tracks.iter().filter(|t| t.split == split).collect()
    }

    pub fn track_dir(&self, track: &TrackEntry) -> PathBuf {
        self.root.join(&track.dir)
    }

    /// Move the last 10% (at least one, when two or more remain) of the
    /// training tracks to validation. A no-op if validation tracks exist.
    pub fn assign_validation(&mut self) {
        if !self.split(Split::Valid).is_empty() {
            return;
        }
        let train: Vec<usize> = (0..self.tracks.len()).filter(|&i| self.tracks[i].split == Split::Train).collect();
        if train.len() < 2 {
            return;
        }
        let n = ((train.len() as f64 * 0.1).ceil() as usize).clamp(1, train.len() - 1);
        for &i in &train[train.len() - n..] {
            self.tracks[i].split = Split::Valid;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub tracks: usize,
    /// Seconds per track.
    pub duration: f64,
    pub sample_rate: u32,
    pub channels: usize,
    pub sources: Vec<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tracks: 3,
            duration: 30.0,
            sample_rate: 44100,
            channels: 2,
            sources: vec!["vocals".into(), "drums".into()],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self, fft_size: usize) -> Result<()> {
        if self.tracks == 0 {
            return Err(Error::config("synth.tracks", "must be positive"));
        }
        if !(1..=2).contains(&self.channels) {
            return Err(Error::config("synth.channels", format!("must be 1 or 2, got {}", self.channels)));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("synth.sample_rate", "must be positive"));
        }
        if self.samples() < 2 * fft_size {
            return Err(Error::config(
                "synth.duration",
                format!("{} samples is shorter than 2 x fft_size = {}", self.samples(), 2 * fft_size),
            ));
        }
        if self.sources.is_empty() {
            return Err(Error::config("synth.sources", "at least one source is required"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sources {
            if !SOURCE_NAMES.contains(&s.as_str()) || !seen.insert(s) {
                return Err(Error::config("synth.sources", format!("unknown or repeated source `{s}`")));
            }
        }
        Ok(())
    }
}

/// Sustained harmonic notes with vibrato: horizontal spectrogram lines.
fn synth_vocals(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let len = ((rng.gen_range(0.4..1.2) * sr) as usize).min(n - start);
        let f0 = 150.0 * 2f64.powf(rng.gen_range(0.0..1.5));
        let (rate, depth) = (rng.gen_range(4.5..6.5), rng.gen_range(0.01..0.03));
        let amp = rng.gen_range(0.15..0.3);
        let rest = rng.gen_bool(0.2);
        let mut phase = 0.0;
        for i in 0..len {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + depth * (2.0 * PI * rate * t).sin());
            phase += 2.0 * PI * f / sr;
            if rest {
                continue;
            }
            // 20 ms linear attack and release
            let edge = (t / 0.02).min((len - i) as f64 / sr / 0.02).min(1.0);
            let mut v = 0.0;
            for h in 1..=8 {
                if f * h as f64 >= sr / 2.0 {
                    break;
                }
                v += (h as f64 * phase).sin() / h as f64;
            }
            out[start + i] = amp * edge * v;
        }
        start += len;
    }
    out
}

/// Short decaying noise bursts on a beat grid: vertical spectrogram lines.
fn synth_drums(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let period = (60.0 / rng.gen_range(90.0..140.0) * sr) as usize;
    let decay = 0.004 * sr;
    let mut at = rng.gen_range(0..period);
    while at < n {
        let amp = rng.gen_range(0.5..0.9);
        for i in 0..((decay * 6.0) as usize).min(n - at) {
            out[at + i] += amp * rng.gen_range(-1.0..1.0) * (-(i as f64) / decay).exp();
        }
        at += period;
    }
    out
}

/// Low notes with a few harmonics, all below a few hundred hertz.
fn synth_bass(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let len = ((rng.gen_range(0.25..0.8) * sr) as usize).min(n - start);
        let f0 = 40.0 * 2f64.powf(rng.gen_range(0.0..1.5));
        let amp = rng.gen_range(0.2..0.35);
        for i in 0..len {
            let t = i as f64 / sr;
            let env = (-t * 3.0).exp() * (t / 0.01).min(1.0) * ((len - i) as f64 / sr / 0.01).min(1.0);
            let v: f64 = (1..=3).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / (h * h) as f64).sum();
            out[start + i] = amp * env * v;
        }
        start += len;
    }
    out
}

/// Slowly changing chords of pure tones.
fn synth_other(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let len = ((rng.gen_range(1.5..3.0) * sr) as usize).min(n - start);
        let root = 220.0 * 2f64.powf(rng.gen_range(0.0..1.0));
        let freqs = [root, root * 1.26, root * 1.5];
        for i in 0..len {
            let t = i as f64 / sr;
            let edge = (t / 0.1).min((len - i) as f64 / sr / 0.1).min(1.0);
            out[start + i] = 0.06 * edge * freqs.iter().map(|f| (2.0 * PI * f * t).sin()).sum::<f64>();
        }
        start += len;
    }
    out
}

fn track_rng(seed: u64, track: usize, source: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((track as u64) << 8 | source as u64);
    rng
}

/// One synthetic track. The mixture is the exact sum of the returned stems,
/// all scaled together so the mixture peaks at 0.9.
pub fn synthesize_track(spec: &SynthSpec, track: usize) -> Result<StemSet> {
    let (n, sr) = (spec.samples(), spec.sample_rate as f64);
    let mut stems = BTreeMap::new();
    for name in &spec.sources {
        let idx = SOURCE_NAMES.iter().position(|s| s == name).ok_or_else(|| {
            Error::config("synth.sources", format!("unknown source `{name}`"))
        })?;
        let mut rng = track_rng(spec.seed, track, idx);
        let mono = match idx {
            0 => synth_vocals(&mut rng, n, sr),
            1 => synth_drums(&mut rng, n, sr),
            2 => synth_bass(&mut rng, n, sr),
            _ => synth_other(&mut rng, n, sr),
        };
        // constant-power pan per stem
        let pan: f64 = rng.gen_range(0.2..0.8);
        let gains = if spec.channels == 1 {
            vec![1.0]
        } else {
            vec![(pan * PI / 2.0).cos() * 2f64.sqrt(), (pan * PI / 2.0).sin() * 2f64.sqrt()]
        };
        let samples: Vec<Vec<f64>> = gains.iter().map(|g| mono.iter().map(|v| g * v).collect()).collect();
        stems.insert(name.clone(), samples);
    }
    let sum = |stems: &BTreeMap<String, Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        (0..spec.channels)
            .map(|c| (0..n).map(|i| stems.values().map(|s| s[c][i]).sum()).collect())
            .collect()
    };
    let peak = sum(&stems).iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        for s in stems.values_mut() {
            for v in s.iter_mut().flatten() {
                *v *= g;
            }
        }
    }
    let mixture = AudioClip::new(sum(&stems), spec.sample_rate)?;
    let stems = stems
        .into_iter()
        .map(|(k, s)| Ok((k, AudioClip::new(s, spec.sample_rate)?)))
        .collect::<Result<_>>()?;
    Ok(StemSet { mixture, stems })
}

/// Write a synthetic dataset under `root`: all tracks in the training split,
/// the last 10% moved to validation.
pub fn make_synthetic_dataset(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest> {
    let mut tracks = Vec::with_capacity(spec.tracks);
    for t in 0..spec.tracks {
        let dir = format!("track{t:03}");
        let set = synthesize_track(spec, t)?;
        set.save(&root.join(&dir))?;
        tracks.push(TrackEntry {
            dir,
            split: Split::Train,
            duration: set.mixture.duration(),
            stems: set.stems.keys().cloned().collect(),
        });
    }
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        tracks,
    };
    manifest.assign_validation();
    manifest.save()?;
    Ok(manifest)
}

/// Magnitude spectrograms of one track's mixture and one source.
#[derive(Debug, Clone)]
pub struct TrackSpectra {
    pub track: String,
    /// `[C, bins, frames]`.
    pub mixture: Tensor<f64>,
    pub target: Tensor<f64>,
}

impl TrackSpectra {
    pub fn frames(&self) -> usize {
        self.mixture.shape()[2]
    }
}

/// Load mixture and `source` of every track in `split`, downmixing when
/// `channels` is 1.
pub fn load_spectra(
    manifest: &DatasetManifest,
    split: Split,
    source: &str,
    channels: usize,
    stft_config: &StftConfig,
) -> Result<Vec<TrackSpectra>> {
    let mut out = Vec::new();
    for t in manifest.split(split) {
        if !t.stems.iter().any(|s| s == source) {
            return Err(Error::Data(format!("track `{}` has no `{source}` stem", t.dir)));
        }
        let set = StemSet::load(&manifest.track_dir(t), &[source.to_string()])?;
        let prep = |c: &AudioClip| -> Result<Vec<Vec<f64>>> {
            if c.sample_rate != stft_config.sample_rate {
                return Err(Error::Data(format!(
                    "track `{}` is {} Hz, config expects {} Hz",
                    t.dir, c.sample_rate, stft_config.sample_rate
                )));
            }
            match (c.channels(), channels) {
                (a, b) if a == b => Ok(c.samples.clone()),
                (2, 1) => Ok(downmix_mono(c).samples),
                (a, b) => Err(Error::Data(format!("track `{}` has {a} channel(s), model expects {b}", t.dir))),
            }
        };
        let mixture = stft(&prep(&set.mixture)?, stft_config)?.magnitude;
        let target = stft(&prep(&set.stems[source])?, stft_config)?.magnitude;
        out.push(TrackSpectra {
            track: t.dir.clone(),
            mixture,
            target,
        });
    }
    Ok(out)
}

/// A batch of aligned `[B, C, bins, patch_frames]` patches and where each
/// was cut from.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub mixture: Tensor<f64>,
    pub target: Tensor<f64>,
    /// `(track index, first frame)` per patch.
    pub offsets: Vec<(usize, usize)>,
}

/// Seeded stream of patches: track and offset drawn uniformly.
#[derive(Debug)]
pub struct PatchSampler {
    tracks: Vec<TrackSpectra>,
    patch_frames: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl PatchSampler {
    /// Tracks shorter than one patch are dropped with a warning.
    pub fn new(tracks: Vec<TrackSpectra>, patch_frames: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || patch_frames == 0 {
            return Err(Error::invalid("patch_sampler", "batch size and patch width must be positive"));
        }
        let total = tracks.len();
        let tracks: Vec<TrackSpectra> = tracks
            .into_iter()
            .filter(|t| {
                let ok = t.frames() >= patch_frames;
                if !ok {
                    log::warn!("track `{}` has {} frames, fewer than one patch; skipped", t.track, t.frames());
                }
                ok
            })
            .collect();
        if tracks.is_empty() {
            return Err(Error::Data(format!("none of {total} track(s) is at least one patch long")));
        }
        Ok(Self {
            tracks,
            patch_frames,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn tracks(&self) -> &[TrackSpectra] {
        &self.tracks
    }

    pub fn next_batch(&mut self) -> Result<PatchBatch> {
        let mut offsets = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let t = self.rng.gen_range(0..self.tracks.len());
            let start = self.rng.gen_range(0..=self.tracks[t].frames() - self.patch_frames);
            offsets.push((t, start));
        }
        let cut = |pick: fn(&TrackSpectra) -> &Tensor<f64>| -> Result<Tensor<f64>> {
            let parts = offsets
                .iter()
                .map(|&(t, s)| Ok(pick(&self.tracks[t]).narrow(2, s, self.patch_frames)?.unsqueeze0()))
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&parts.iter().collect::<Vec<_>>(), 0)
        };
        Ok(PatchBatch {
            mixture: cut(|t| &t.mixture)?,
            target: cut(|t| &t.target)?,
            offsets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downmix_averages_channels() {
        let c = AudioClip::new(vec![vec![1.0, 0.5], vec![-1.0, 0.5]], 8000).unwrap();
        assert_eq!(downmix_mono(&c).samples, vec![vec![0.0, 0.5]]);
        let m = AudioClip::new(vec![vec![0.25]], 8000).unwrap();
        assert_eq!(downmix_mono(&m), m);
    }

    #[test]
    fn clip_invariants() {
        assert!(AudioClip::new(vec![vec![0.0], vec![]], 8000).is_err());
        assert!(AudioClip::new(vec![vec![0.0]; 3], 8000).is_err());
        assert!(AudioClip::new(vec![vec![0.0]], 0).is_err());
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let entry = |i: usize| TrackEntry {
            dir: format!("t{i}"),
            split: Split::Train,
            duration: 1.0,
            stems: vec![],
        };
        let mut m = DatasetManifest {
            root: PathBuf::new(),
            tracks: (0..12).map(entry).collect(),
        };
        m.assign_validation();
        let valid: Vec<_> = m.split(Split::Valid).iter().map(|t| t.dir.clone()).collect();
        assert_eq!(valid, ["t10", "t11"]);
        let mut one = DatasetManifest {
            root: PathBuf::new(),
            tracks: vec![entry(0)],
        };
        one.assign_validation();
        assert!(one.split(Split::Valid).is_empty());
    }

    #[test]
    fn synthetic_mixture_is_exact_sum() {
        let spec = SynthSpec {
            duration: 0.5,
            sample_rate: 8000,
            sources: SOURCE_NAMES.map(String::from).to_vec(),
            ..SynthSpec::default()
        };
        let set = synthesize_track(&spec, 1).unwrap();
        assert_eq!(set.mixture_error(), 0.0);
        assert!(set.validate().unwrap().is_empty());
        let peak = set.mixture.samples.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
    }
}
