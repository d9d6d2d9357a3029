use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bss::{framewise_scores, median, FramewiseScores, WindowConfig};
use super::stats::{welch_t_test, TTestSummary};
use super::Db;
use crate::data::{downmix_mono, load_wav};
use crate::error::{Error, Result};
use crate::featloss::LossWeights;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub label: String,
    pub seed: Option<u64>,
    pub loss_weights: Option<LossWeights>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongScores {
    pub track: String,
    pub scores: Vec<FramewiseScores>,
    /// Median SDR over windows, per source.
    pub medians: BTreeMap<String, Db>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    pub window: WindowConfig,
    pub songs: Vec<SongScores>,
    /// Median over songs of the per-song medians, per source.
    pub dataset_medians: BTreeMap<String, Db>,
}

impl EvalReport {
    pub fn new(metadata: RunMetadata, window: WindowConfig, songs: Vec<SongScores>) -> Self {
        let sources: BTreeSet<&String> = songs.iter().flat_map(|s| s.medians.keys()).collect();
        let dataset_medians = sources
            .into_iter()
            .map(|src| {
                let per_song: Vec<Db> = songs.iter().filter_map(|s| s.medians.get(src).copied()).collect();
                (src.clone(), median(&per_song))
            })
            .collect();
        Self {
            metadata,
            window,
            songs,
            dataset_medians,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per song x source x window.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["track", "source", "window", "start_sample", "sdr", "sir", "sar"])?;
        for song in &self.songs {
            for s in &song.scores {
                for i in 0..s.sdr.len() {
                    w.write_record([
                        song.track.clone(),
                        s.source.clone(),
                        i.to_string(),
                        (i * s.hop).to_string(),
                        s.sdr[i].to_text(),
                        s.sir[i].to_text(),
                        s.sar[i].to_text(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Score every estimated source of one track against all of its references.
/// `estimates` and `references` map source names to mono signals.
pub fn evaluate_track(
    track: &str,
    estimates: &BTreeMap<String, Vec<f64>>,
    references: &BTreeMap<String, Vec<f64>>,
    cfg: &WindowConfig,
) -> Result<SongScores> {
    let names: Vec<&String> = references.keys().collect();
    let refs: Vec<Vec<f64>> = references.values().cloned().collect();
    let mut scores = Vec::new();
    let mut medians = BTreeMap::new();
    for (source, est) in estimates {
        let target = names.iter().position(|n| *n == source).ok_or_else(|| {
            Error::Data(format!("track `{track}`: no reference for source `{source}`"))
        })?;
        if est.len() != refs[target].len() {
            return Err(Error::Data(format!(
                "track `{track}`, source `{source}`: estimate has {} samples, reference {}",
                est.len(),
                refs[target].len()
            )));
        }
        let s = framewise_scores(source, est, &refs, target, cfg)?;
        medians.insert(source.clone(), s.median_sdr());
        scores.push(s);
    }
    Ok(SongScores {
        track: track.to_string(),
        scores,
        medians,
    })
}

fn wav_stems(dir: &Path, skip_mixture: bool) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.extension().and_then(|x| x.to_str()) != Some("wav") {
            continue;
        }
        let name = path.file_stem().and_then(|x| x.to_str()).unwrap_or_default().to_string();
        if skip_mixture && name == "mixture" {
            continue;
        }
        let clip = downmix_mono(&load_wav(&path)?);
        out.insert(name, clip.samples.into_iter().next().unwrap_or_default());
    }
    Ok(out)
}

fn track_dirs(root: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    names.sort();
    Ok(names)
}

/// Score `estimates/<track>/<source>.wav` against
/// `references/<track>/<source>.wav`. Every reference stem of a track acts
/// as an interferer; stereo files are downmixed to mono first.
pub fn evaluate_directories(
    estimates: &Path,
    references: &Path,
    cfg: &WindowConfig,
    metadata: RunMetadata,
) -> Result<EvalReport> {
    let tracks = track_dirs(estimates)?;
    if tracks.is_empty() {
        return Err(Error::Data(format!("{}: no track directories", estimates.display())));
    }
    let missing: Vec<&String> = tracks.iter().filter(|t| !references.join(t).is_dir()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no reference directory under {} for track(s) {:?}",
            references.display(),
            missing
        )));
    }
    let mut songs = Vec::with_capacity(tracks.len());
    for t in &tracks {
        let est = wav_stems(&estimates.join(t), true)?;
        let refs = wav_stems(&references.join(t), true)?;
        songs.push(evaluate_track(t, &est, &refs, cfg)?);
    }
    Ok(EvalReport::new(metadata, *cfg, songs))
}

/// What one training run contributes to a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub min_val_pixel_loss: f64,
    pub median_sdr: BTreeMap<String, Db>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: usize,
    pub loss_a: Option<f64>,
    pub loss_b: Option<f64>,
    pub sdr_a: Db,
    pub sdr_b: Db,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub source: String,
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<ComparisonRow>,
    pub t_test: Option<TTestSummary>,
    /// Why the t-test is missing, when it is.
    pub t_test_note: Option<String>,
}

impl Comparison {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Pair runs of two arms by position and test their median SDRs for `source`.
pub fn compare_runs(
    label_a: &str,
    a: &[RunSummary],
    label_b: &str,
    b: &[RunSummary],
    source: &str,
) -> Result<Comparison> {
    let sources: BTreeSet<&String> = a.iter().chain(b).flat_map(|r| r.median_sdr.keys()).collect();
    if let Some(r) = a.iter().chain(b).find(|r| r.median_sdr.keys().collect::<BTreeSet<_>>() != sources) {
        return Err(Error::Data(format!(
            "run `{}` scores sources {:?}, others score {:?}",
            r.run,
            r.median_sdr.keys().collect::<Vec<_>>(),
            sources
        )));
    }
    if !sources.contains(&source.to_string()) {
        return Err(Error::Data(format!("no run scores source `{source}`")));
    }
    let sdr = |r: &RunSummary| r.median_sdr[source];
    let rows = (0..a.len().max(b.len()))
        .map(|i| ComparisonRow {
            run: i + 1,
            loss_a: a.get(i).map(|r| r.min_val_pixel_loss),
            loss_b: b.get(i).map(|r| r.min_val_pixel_loss),
            sdr_a: a.get(i).map_or(Db(f64::NAN), sdr),
            sdr_b: b.get(i).map_or(Db(f64::NAN), sdr),
        })
        .collect();
    let xa: Vec<f64> = a.iter().map(|r| sdr(r).0).collect();
    let xb: Vec<f64> = b.iter().map(|r| sdr(r).0).collect();
    let (t_test, t_test_note) = match welch_t_test(&xa, &xb) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(Comparison {
        source: source.to_string(),
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        rows,
        t_test,
        t_test_note,
    })
}

fn fixed(v: Option<f64>, places: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.places$}"),
        Some(x) if x.is_nan() => "-".into(),
        Some(x) => Db(x).to_text(),
        None => "-".into(),
    }
}

/// Plain-text table: per-run minimum validation pixel loss and median SDR for
/// both arms, followed by the Welch t-test block.
pub fn render_comparison(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Source: {}", c.source);
    let _ = writeln!(
        s,
        "{:<5}{:>14}{:>14}{:>12}{:>12}",
        "Run", "val L2 (A)", "val L2 (B)", "SDR (A)", "SDR (B)"
    );
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{:<5}{:>14}{:>14}{:>12}{:>12}",
            r.run,
            fixed(r.loss_a, 4),
            fixed(r.loss_b, 4),
            fixed(Some(r.sdr_a.0), 2),
            fixed(Some(r.sdr_b.0), 2)
        );
    }
    let _ = writeln!(s, "A = {}, B = {}", c.label_a, c.label_b);
    let _ = writeln!(s);
    let _ = writeln!(s, "Welch Two Sample t-test");
    match &c.t_test {
        Some(t) => {
            let rows = [
                ("t-statistic".to_string(), format!("{:.2}", t.t_statistic)),
                ("df".to_string(), format!("{:.2}", t.degrees_of_freedom)),
                ("p-value".to_string(), format!("{:.3}", t.p_value)),
                (format!("Mean SDR with {}", c.label_a), format!("{:.2}", t.mean_a)),
                (format!("Mean SDR with {}", c.label_b), format!("{:.2}", t.mean_b)),
                (
                    "95% confidence interval (Difference of means)".to_string(),
                    format!("{:.2}, {:.2}", t.ci95.0, t.ci95.1),
                ),
            ];
            for (k, v) in rows {
                let _ = writeln!(s, "{k:<48}{v}");
            }
        }
        None => {
            let _ = writeln!(s, "not available: {}", c.t_test_note.as_deref().unwrap_or("unknown"));
        }
    }
    s
}
