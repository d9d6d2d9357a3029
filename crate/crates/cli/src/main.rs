use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use specsep_core::config::{Precision, RunConfig};
use specsep_core::data::{load_wav, make_synthetic_dataset, save_wav, AudioClip, SynthSpec};
use specsep_core::eval::{
    compare_runs, evaluate_directories, render_comparison, Db, EvalReport, RunMetadata, RunSummary, WindowConfig,
};
use specsep_core::mmdense::{load_params, MmDenseNet};
use specsep_core::separation::{separate, MagnitudeModel};
use specsep_core::train::{self, TrainSummary};
use specsep_core::Error;

const EVAL_REPORT: &str = "eval.json";

#[derive(Parser)]
#[command(name = "specsep", version, about = "Spectrogram-domain music source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one per-source model.
    Train(TrainArgs),
    /// Split a mixture WAV into one WAV per trained source model.
    Separate(SeparateArgs),
    /// Score estimated stems against references (BSS-Eval).
    Evaluate(EvaluateArgs),
    /// Compare two groups of runs with Welch's t-test.
    Compare(CompareArgs),
    /// Write a synthetic stem dataset.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.pixel=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SeparateArgs {
    /// `source=path`, where path is a run directory or a checkpoint file.
    #[arg(long = "model", required = true, value_name = "SOURCE=PATH")]
    models: Vec<String>,
    /// Mixture WAV.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for `<source>.wav` files.
    #[arg(long)]
    out: PathBuf,
    /// Config for checkpoints given without a run directory; STFT and
    /// separation settings are always taken from here.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of `<track>/<source>.wav` estimates.
    #[arg(long)]
    estimates: PathBuf,
    /// Directory of `<track>/<source>.wav` references.
    #[arg(long)]
    references: PathBuf,
    /// JSON report path; a CSV with the same stem is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "")]
    label: String,
    #[arg(long, default_value_t = 44_100)]
    window: usize,
    #[arg(long, default_value_t = 44_100)]
    hop: usize,
    #[arg(long, default_value_t = 512)]
    filter_len: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories of arm A (each with train_summary.json and eval.json).
    #[arg(long = "a", num_args = 1..)]
    runs_a: Vec<PathBuf>,
    #[arg(long = "b", num_args = 1..)]
    runs_b: Vec<PathBuf>,
    /// Median SDRs of arm A given directly, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "runs_a")]
    sdr_a: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "runs_b")]
    sdr_b: Vec<f64>,
    #[arg(long, default_value = "vocals")]
    source: String,
    #[arg(long, default_value = "A")]
    label_a: String,
    #[arg(long, default_value = "B")]
    label_b: String,
    /// Also write the comparison as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    tracks: usize,
    /// Seconds per track.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    #[arg(long, default_value_t = 44_100)]
    sample_rate: u32,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "vocals,drums")]
    sources: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config { .. } | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => 2,
                Error::NonFinite { .. } | Error::Singular(_) | Error::Statistics(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    3
}

fn thread_count() -> Result<usize> {
    match std::env::var("SPECSEP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::config("SPECSEP_THREADS", format!("expected a non-negative integer, got `{v}`")))?;
            Ok(n.max(1))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = thread_count().and_then(|n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start thread pool")?;
        run(cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => cmd_separate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::SynthData(a) => cmd_synth(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let total = cfg.train.max_epochs;
    let summary = train::train(&cfg, &mut |r| {
        eprintln!(
            "epoch {:>3}/{total}  lr {:.0e}  train {:.6} (pixel {:.6})  valid {:.6} (pixel {:.6})",
            r.epoch, r.learning_rate, r.train.composite, r.train.pixel, r.valid.composite, r.valid.pixel
        );
    })?;
    println!(
        "trained `{}` for {} epochs; best epoch {}, min validation pixel loss {:.6}; run in {}",
        summary.source,
        summary.epochs,
        summary.best_epoch,
        summary.min_valid_pixel,
        cfg.train.output_dir.display()
    );
    Ok(())
}

/// Config and checkpoint for `path`: a run directory or a checkpoint file
/// (whose directory may hold the run's config).
fn resolve_model(path: &Path, fallback: &RunConfig) -> Result<(RunConfig, PathBuf)> {
    let (dir, ckpt) = if path.is_dir() {
        (path.to_path_buf(), train::best_checkpoint(path))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let cfg = if dir.join(train::CONFIG_FILE).is_file() {
        let c = train::load_run_config(&dir)?;
        c.validate()?;
        c
    } else {
        fallback.clone()
    };
    Ok((cfg, ckpt))
}

fn load_model(path: &Path, fallback: &RunConfig) -> Result<Box<dyn MagnitudeModel>> {
    let (cfg, ckpt) = resolve_model(path, fallback)?;
    let model_cfg = cfg.model_config();
    Ok(match cfg.train.precision {
        Precision::F32 => Box::new(MmDenseNet::<f32>::from_params(model_cfg, load_params(&ckpt)?)?),
        Precision::F64 => Box::new(MmDenseNet::<f64>::from_params(model_cfg, load_params(&ckpt)?)?),
    })
}

fn cmd_separate(a: SeparateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let mut models = Vec::new();
    for spec in &a.models {
        let (source, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::config("--model", format!("expected SOURCE=PATH, got `{spec}`")))?;
        let model = load_model(Path::new(path), &cfg).with_context(|| format!("loading model for `{source}`"))?;
        models.push((source.to_string(), model));
    }
    let mixture = load_wav(&a.input)?;
    if mixture.sample_rate != cfg.stft.sample_rate {
        return Err(Error::Data(format!(
            "{} is {} Hz, config expects {} Hz",
            a.input.display(),
            mixture.sample_rate,
            cfg.stft.sample_rate
        ))
        .into());
    }
    let refs: Vec<(String, &dyn MagnitudeModel)> = models.iter().map(|(n, m)| (n.clone(), m.as_ref())).collect();
    let sep = separate(&mixture.samples, &refs, &cfg.stft, &cfg.separation)?;
    std::fs::create_dir_all(&a.out)?;
    for (name, audio) in sep.sources.iter().zip(sep.audio) {
        let path = a.out.join(format!("{name}.wav"));
        save_wav(&AudioClip::new(audio, mixture.sample_rate)?, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let window = WindowConfig {
        window: a.window,
        hop: a.hop,
        filter_len: a.filter_len,
    };
    if window.window == 0 || window.hop == 0 || window.filter_len == 0 {
        return Err(Error::config("--window/--hop/--filter-len", "must be positive").into());
    }
    let metadata = RunMetadata {
        label: a.label,
        ..RunMetadata::default()
    };
    let report = evaluate_directories(&a.estimates, &a.references, &window, metadata)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, report.to_json()?)?;
    report.write_csv(&a.out.with_extension("csv"))?;
    for (src, m) in &report.dataset_medians {
        println!("{src}: median SDR {}", m.to_text());
    }
    Ok(())
}

fn run_summary(dir: &Path) -> Result<RunSummary> {
    let s = TrainSummary::load(dir)?;
    let path = dir.join(EVAL_REPORT);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let report = EvalReport::from_json(&text)?;
    Ok(RunSummary {
        run: dir.display().to_string(),
        min_val_pixel_loss: s.min_valid_pixel,
        median_sdr: report.dataset_medians,
    })
}

fn from_values(values: &[f64], source: &str) -> Vec<RunSummary> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| RunSummary {
            run: format!("run{}", i + 1),
            min_val_pixel_loss: f64::NAN,
            median_sdr: [(source.to_string(), Db(v))].into(),
        })
        .collect()
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let arm = |dirs: &[PathBuf], values: &[f64], label: &str| -> Result<Vec<RunSummary>> {
        let runs = if values.is_empty() {
            dirs.iter().map(|d| run_summary(d)).collect::<Result<Vec<_>>>()?
        } else {
            from_values(values, &a.source)
        };
        if runs.len() < 2 {
            return Err(Error::config(label, format!("at least 2 runs are required, got {}", runs.len())).into());
        }
        Ok(runs)
    };
    let ra = arm(&a.runs_a, &a.sdr_a, "--a")?;
    let rb = arm(&a.runs_b, &a.sdr_b, "--b")?;
    let cmp = compare_runs(&a.label_a, &ra, &a.label_b, &rb, &a.source)?;
    print!("{}", render_comparison(&cmp));
    if let Some(path) = &a.json {
        std::fs::write(path, cmp.to_json()?)?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        tracks: a.tracks,
        duration: a.duration,
        sample_rate: a.sample_rate,
        channels: a.channels,
        sources: a.sources,
        seed: a.seed,
    };
    spec.validate(RunConfig::default().stft.fft_size)?;
    if a.out.is_dir() && std::fs::read_dir(&a.out)?.next().is_some() && !a.force {
        bail!(Error::config(
            "--out",
            format!("{} exists and is not empty (use --force)", a.out.display())
        ));
    }
    let m = make_synthetic_dataset(&spec, &a.out)?;
    println!("wrote {} tracks to {}", m.tracks.len(), a.out.display());
    Ok(())
}
