//! Command-line workflows: synthetic data generation, classifier
//! training, detection, SNR estimation, evaluation, and threshold
//! sweeps. Every run is seeded and logs its fully resolved
//! configuration to stderr; artifacts carry no timestamps, so reruns
//! with the same seed are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use upcall_core::detector::{self, DetectionEvent, Scorer};
use upcall_core::error::Error as CoreError;
use upcall_core::eval::{self, Annotation, LabeledSample};
use upcall_core::lda::{self, LdaScorer};
use upcall_core::nnet::{self, NetConfig, ResNet, TrainConfig};
use upcall_core::signal::{self, AudioClip};
use upcall_core::snr as snr_mod;
use upcall_core::synth::{self, NoiseMix, SynthSpec};

/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
/// failure.
pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Usage(_) => 1,
        CliError::Core(e) => match e {
            CoreError::InvalidArgument(_) => 1,
            CoreError::DegenerateInput(_)
            | CoreError::SingularCovariance(_)
            | CoreError::Numerical(_) => 3,
            _ => 2,
        },
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(CoreError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "upcall",
    about = "Right-whale upcall detection toolkit",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// Optional key=value config file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets and recordings.
    Synth {
        #[command(subcommand)]
        what: SynthCommand,
    },
    /// Train a classifier on a labeled segment directory.
    Train(TrainArgs),
    /// Run the detector over a recording.
    Detect(DetectArgs),
    /// Estimate the SNR of a 3-s segment, or of every annotation.
    Snr(SnrArgs),
    /// Score detections against annotations.
    Evaluate(EvaluateArgs),
    /// Rerun threshold -> events -> metrics over a threshold grid.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Labeled 3-s WAV segments plus a labels CSV.
    Dataset {
        /// key=value recipe file (n_pos, n_neg, snr_lo, snr_hi, ...).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_pos: Option<usize>,
        #[arg(long)]
        n_neg: Option<usize>,
        #[arg(long)]
        snr_lo: Option<f64>,
        #[arg(long)]
        snr_hi: Option<f64>,
    },
    /// One continuous WAV plus an annotations CSV.
    Continuous {
        #[arg(long)]
        out: PathBuf,
        /// Recording length, seconds.
        #[arg(long, default_value_t = 600.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 30)]
        n_calls: usize,
        #[arg(long, default_value_t = 5.0)]
        snr_lo: f64,
        #[arg(long, default_value_t = 15.0)]
        snr_hi: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding labels.csv and the WAV segments.
    #[arg(long)]
    data: PathBuf,
    /// Classifier family.
    #[arg(long, value_parser = ["resnet", "lda"])]
    model: String,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metric log CSV (resnet only).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Run k-fold cross-validation (repeated 85:15 splits) first.
    #[arg(long)]
    cv: Option<usize>,
    /// Train this many models with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Residual blocks (resnet).
    #[arg(long)]
    blocks: Option<usize>,
    /// Per-stage channels, comma-separated (resnet).
    #[arg(long)]
    channels: Option<String>,
    /// PCA dimensionality candidates, comma-separated (lda).
    #[arg(long)]
    pca_dims: Option<String>,
}

#[derive(Args)]
struct DetectArgs {
    wav: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SnrArgs {
    wav: PathBuf,
    /// Segment start time in seconds (single-shot mode).
    t_start: Option<f64>,
    /// Annotation CSV: estimate the SNR of each annotated call.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Output CSV with the snr column filled (batch mode).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Total evaluated recording time, hours.
    #[arg(long)]
    duration_h: f64,
    /// Keep only annotations with SNR strictly above this bound.
    #[arg(long)]
    snr_min: Option<f64>,
    /// Evaluated source ids (defaults to the sources in the detections
    /// file; pass explicitly when a source produced zero events).
    #[arg(long)]
    sources: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    wav: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// "lo:hi:step" range or comma-separated list.
    #[arg(long, default_value = "0.05:0.95:0.05")]
    thresholds: String,
    #[arg(long)]
    out: PathBuf,
}

/// Flat key=value configuration file with optional [section] headers
/// (keys become "section.key").
struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Core(CoreError::io(path, e)))?;
            let mut section = String::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                if line.starts_with('[') && line.ends_with(']') {
                    section = line[1..line.len() - 1].trim().to_string();
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    usage(format!("{}:{}: expected key=value", path.display(), i + 1))
                })?;
                let key = if section.is_empty() {
                    k.trim().to_string()
                } else {
                    format!("{section}.{}", k.trim())
                };
                values.insert(key, v.trim().to_string());
            }
        }
        Ok(Self { values })
    }

    fn get<T: std::str::FromStr>(&self, scope: &str, key: &str) -> CliResult<Option<T>> {
        let raw = self
            .values
            .get(&format!("{scope}.{key}"))
            .or_else(|| self.values.get(key));
        match raw {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse '{s}'"))),
        }
    }
}

/// Resolve a parameter: explicit flag, then config file, then default.
fn resolve<T: std::str::FromStr + Copy>(
    flag: Option<T>,
    cfg: &ConfigMap,
    scope: &str,
    key: &str,
    default: T,
) -> CliResult<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(cfg.get::<T>(scope, key)?.unwrap_or(default))
}

fn log_config(command: &str, entries: &[(&str, String)]) {
    let mut parts: Vec<String> = entries.iter().map(|(k, v)| format!("{k}={v}")).collect();
    parts.sort();
    eprintln!("[{command}] resolved config: {}", parts.join(" "));
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let cfg = ConfigMap::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth { what } => match what {
            SynthCommand::Dataset {
                spec,
                out,
                n_pos,
                n_neg,
                snr_lo,
                snr_hi,
            } => cmd_synth_dataset(&cfg, seed, spec.as_deref(), &out, n_pos, n_neg, snr_lo, snr_hi),
            SynthCommand::Continuous {
                out,
                duration_s,
                n_calls,
                snr_lo,
                snr_hi,
            } => cmd_synth_continuous(seed, &out, duration_s, n_calls, snr_lo, snr_hi),
        },
        Command::Train(args) => cmd_train(&cfg, seed, args),
        Command::Detect(args) => cmd_detect(seed, args),
        Command::Snr(args) => cmd_snr(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

// ---- synth ----

#[allow(clippy::too_many_arguments)]
fn cmd_synth_dataset(
    cfg: &ConfigMap,
    seed: u64,
    spec_path: Option<&Path>,
    out: &Path,
    n_pos: Option<usize>,
    n_neg: Option<usize>,
    snr_lo: Option<f64>,
    snr_hi: Option<f64>,
) -> CliResult<()> {
    let recipe = ConfigMap::load(spec_path)?;
    let lookup_usize = |key: &str, flag: Option<usize>, default: usize| -> CliResult<usize> {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(v) = recipe.get::<usize>("dataset", key)? {
            return Ok(v);
        }
        resolve(None, cfg, "synth", key, default)
    };
    let lookup_f64 = |key: &str, flag: Option<f64>, default: f64| -> CliResult<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(v) = recipe.get::<f64>("dataset", key)? {
            return Ok(v);
        }
        resolve(None, cfg, "synth", key, default)
    };

    let spec = SynthSpec {
        n_pos: lookup_usize("n_pos", n_pos, 100)?,
        n_neg: lookup_usize("n_neg", n_neg, 100)?,
        snr_lo: lookup_f64("snr_lo", snr_lo, 0.0)?,
        snr_hi: lookup_f64("snr_hi", snr_hi, 15.0)?,
        jitter_max: lookup_f64("jitter_max", None, 0.5)?,
        noise_mix: NoiseMix {
            white: lookup_f64("noise_white", None, 1.0)?,
            tonal: lookup_f64("noise_tonal", None, 0.3)?,
            transient: lookup_f64("noise_transient", None, 0.3)?,
        },
        confusable_fraction: lookup_f64("confusable_fraction", None, 0.3)?,
        seed,
    };
    log_config(
        "synth dataset",
        &[
            ("n_pos", spec.n_pos.to_string()),
            ("n_neg", spec.n_neg.to_string()),
            ("snr_lo", spec.snr_lo.to_string()),
            ("snr_hi", spec.snr_hi.to_string()),
            ("jitter_max", spec.jitter_max.to_string()),
            ("noise_white", spec.noise_mix.white.to_string()),
            ("noise_tonal", spec.noise_mix.tonal.to_string()),
            ("noise_transient", spec.noise_mix.transient.to_string()),
            ("confusable_fraction", spec.confusable_fraction.to_string()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    );

    fs::create_dir_all(out).map_err(|e| CliError::Core(CoreError::io(out, e)))?;
    let segments = synth::synth_labeled_audio(&spec)?;
    let labels_path = out.join("labels.csv");
    let mut labels = String::from("file,label,timestamp,snr\n");
    for (i, seg) in segments.iter().enumerate() {
        let name = format!("seg_{i:04}.wav");
        signal::write_wav(&seg.clip, out.join(&name))?;
        let snr = seg.snr.map(|v| v.to_string()).unwrap_or_default();
        labels.push_str(&format!(
            "{name},{},{},{snr}\n",
            u8::from(seg.label),
            seg.timestamp
        ));
    }
    fs::write(&labels_path, labels).map_err(|e| CliError::Core(CoreError::io(&labels_path, e)))?;
    eprintln!(
        "[synth dataset] wrote {} segments and {}",
        segments.len(),
        labels_path.display()
    );
    Ok(())
}

fn cmd_synth_continuous(
    seed: u64,
    out: &Path,
    duration_s: f64,
    n_calls: usize,
    snr_lo: f64,
    snr_hi: f64,
) -> CliResult<()> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    log_config(
        "synth continuous",
        &[
            ("duration_s", duration_s.to_string()),
            ("n_calls", n_calls.to_string()),
            ("snr_lo", snr_lo.to_string()),
            ("snr_hi", snr_hi.to_string()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    );
    if snr_hi < snr_lo {
        return Err(usage("snr_hi must be >= snr_lo"));
    }
    // Seeded call placement with a 2-s minimum separation.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut times: Vec<f64> = Vec::with_capacity(n_calls);
    let mut guard = 0;
    while times.len() < n_calls {
        guard += 1;
        if guard > 100_000 {
            return Err(usage(format!(
                "cannot place {n_calls} non-overlapping calls in {duration_s} s"
            )));
        }
        let t = rng.gen_range(1.0..duration_s - 2.0);
        if times.iter().all(|&u: &f64| (u - t).abs() >= 2.0) {
            times.push(t);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let snrs: Vec<f64> = (0..n_calls).map(|_| rng.gen_range(snr_lo..=snr_hi)).collect();

    let (clip, annotations) =
        synth::synth_continuous(duration_s, &times, &snrs, &NoiseMix::default(), seed)?;
    fs::create_dir_all(out).map_err(|e| CliError::Core(CoreError::io(out, e)))?;
    let wav_path = out.join("continuous.wav");
    let ann_path = out.join("annotations.csv");
    // Annotations refer to the written file's stem.
    let annotations: Vec<Annotation> = annotations
        .into_iter()
        .map(|a| Annotation {
            source_id: "continuous".into(),
            ..a
        })
        .collect();
    signal::write_wav(&clip, &wav_path)?;
    eval::write_annotations(&ann_path, &annotations)?;
    eprintln!(
        "[synth continuous] wrote {} ({} calls) and {}",
        wav_path.display(),
        annotations.len(),
        ann_path.display()
    );
    Ok(())
}

// ---- dataset loading ----

fn load_labeled_dir(dir: &Path) -> CliResult<Vec<LabeledSample>> {
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| CliError::Core(CoreError::io(&labels_path, e)))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "file,label,timestamp,snr" => {}
        Some((_, h)) => {
            return Err(CliError::Core(CoreError::MalformedRow {
                path: labels_path,
                line: 1,
                detail: format!("unexpected header '{h}'"),
            }))
        }
        None => {
            return Err(CliError::Core(CoreError::MalformedRow {
                path: labels_path,
                line: 1,
                detail: "empty labels file".into(),
            }))
        }
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(CliError::Core(CoreError::MalformedRow {
                path: labels_path.clone(),
                line: idx + 1,
                detail: format!("expected 4 fields, got {}", fields.len()),
            }));
        }
        let bad = |detail: String| {
            CliError::Core(CoreError::MalformedRow {
                path: labels_path.clone(),
                line: idx + 1,
                detail,
            })
        };
        let label = match fields[1] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("label must be 0 or 1, got '{other}'"))),
        };
        let timestamp: f64 = fields[2]
            .parse()
            .map_err(|_| bad(format!("bad timestamp '{}'", fields[2])))?;
        let snr = if fields[3].is_empty() {
            None
        } else {
            Some(
                fields[3]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad snr '{}'", fields[3])))?,
            )
        };
        let clip = load_resampled(&dir.join(fields[0]))?;
        let spectrogram = signal::compute_spectrogram(&clip)?;
        samples.push(LabeledSample {
            spectrogram,
            label,
            timestamp,
            snr,
            source_id: fields[0].trim_end_matches(".wav").to_string(),
        });
    }
    Ok(samples)
}

fn load_resampled(path: &Path) -> CliResult<AudioClip> {
    let clip = signal::read_wav(path)?;
    Ok(signal::resample(&clip, signal::TARGET_SAMPLE_RATE)?)
}

// ---- train ----

fn parse_usize_list(s: &str, what: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad {what} entry '{p}'")))
        })
        .collect()
}

fn cmd_train(cfg: &ConfigMap, seed: u64, args: TrainArgs) -> CliResult<()> {
    let samples = load_labeled_dir(&args.data)?;
    if samples.is_empty() {
        return Err(CliError::Core(CoreError::DegenerateInput(
            "no training samples found".into(),
        )));
    }

    match args.model.as_str() {
        "lda" => {
            let dims_raw = match &args.pca_dims {
                Some(s) => s.clone(),
                None => cfg
                    .get::<String>("train", "pca_dims")?
                    .unwrap_or_else(|| "16,32,64,128,256".into()),
            };
            let candidates = parse_usize_list(&dims_raw, "pca_dims")?;
            log_config(
                "train",
                &[
                    ("model", "lda".into()),
                    ("pca_dims", dims_raw.clone()),
                    ("runs", args.runs.to_string()),
                    ("cv", args.cv.map(|k| k.to_string()).unwrap_or_default()),
                    ("seed", seed.to_string()),
                    ("data", args.data.display().to_string()),
                    ("out", args.out.display().to_string()),
                    ("n_samples", samples.len().to_string()),
                ],
            );

            if let Some(k) = args.cv {
                let report = lda_cv(&samples, &candidates, seed, k)?;
                eprintln!(
                    "[train] {k}-fold cv (85:15 splits): mean F1 {:.4} ({})",
                    report.iter().sum::<f64>() / report.len() as f64,
                    report
                        .iter()
                        .map(|f| format!("{f:.4}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                );
            }

            if args.runs <= 1 {
                let d = lda::select_pca_dim(&samples, &candidates, seed)?;
                let (scorer, _, lda_model) = lda::fit_pipeline(&samples, d)?;
                scorer.save(&args.out)?;
                eprintln!(
                    "[train] lda: selected d={d}, shrinkage {:.4}, model -> {}",
                    lda_model.shrinkage,
                    args.out.display()
                );
            } else {
                // Distinct seeds change only the selection split; the
                // fit itself is deterministic in the data.
                let stem = args.out.with_extension("");
                let ext = args
                    .out
                    .extension()
                    .map(|e| format!(".{}", e.to_string_lossy()))
                    .unwrap_or_default();
                for run in 0..args.runs {
                    let run_seed = seed.wrapping_add(run as u64);
                    let d = lda::select_pca_dim(&samples, &candidates, run_seed)?;
                    let (scorer, _, _) = lda::fit_pipeline(&samples, d)?;
                    let path = PathBuf::from(format!("{}_run{run}{ext}", stem.display()));
                    scorer.save(&path)?;
                    eprintln!("[train] lda run {run}: d={d} -> {}", path.display());
                }
            }
            Ok(())
        }
        "resnet" => {
            let epochs = resolve(args.epochs, cfg, "train", "epochs", 100)?;
            let batch_size = resolve(args.batch_size, cfg, "train", "batch_size", 128)?;
            let lr = resolve(args.lr, cfg, "train", "lr", 1e-3)?;
            let decay = resolve(args.decay, cfg, "train", "decay", 0.01)?;
            let blocks = resolve(args.blocks, cfg, "train", "blocks", 8)?;
            let channels_raw = match &args.channels {
                Some(s) => s.clone(),
                None => cfg
                    .get::<String>("train", "channels")?
                    .unwrap_or_else(|| default_channels(blocks)),
            };
            let channels = parse_usize_list(&channels_raw, "channels")?;
            let net_cfg = NetConfig {
                n_blocks: blocks,
                channels,
                input_shape: (94, 129),
                n_classes: 2,
                seed,
            };
            let tcfg = TrainConfig {
                batch_size,
                epochs,
                lr,
                decay,
                seed,
                ..TrainConfig::default()
            };
            log_config(
                "train",
                &[
                    ("model", "resnet".into()),
                    ("blocks", blocks.to_string()),
                    ("channels", channels_raw.clone()),
                    ("epochs", epochs.to_string()),
                    ("batch_size", batch_size.to_string()),
                    ("lr", lr.to_string()),
                    ("decay", decay.to_string()),
                    ("runs", args.runs.to_string()),
                    ("cv", args.cv.map(|k| k.to_string()).unwrap_or_default()),
                    ("seed", seed.to_string()),
                    ("data", args.data.display().to_string()),
                    ("out", args.out.display().to_string()),
                    ("n_samples", samples.len().to_string()),
                ],
            );

            if let Some(k) = args.cv {
                let report = nnet::kfold_cv(&samples, &net_cfg, &tcfg, k)?;
                eprintln!(
                    "[train] {k}-fold cv (85:15 splits, {} validation samples each): \
                     mean F1 {:.4} +/- {:.4} ({})",
                    report.n_val,
                    report.mean,
                    report.std,
                    report
                        .fold_f1
                        .iter()
                        .map(|f| format!("{f:.4}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                );
            }

            if args.runs <= 1 {
                let outcome = nnet::train(&samples, &net_cfg, &tcfg)?;
                write_metric_log(args.metrics.as_deref(), &outcome.log)?;
                outcome.net.save(&args.out)?;
                let last = outcome.log.last().unwrap();
                eprintln!(
                    "[train] resnet: {} epochs, final loss {:.4}, train F1 {:.4}, model -> {}",
                    epochs,
                    last.loss,
                    last.f1,
                    args.out.display()
                );
            } else {
                let outcomes = nnet::ensemble_train(&samples, &net_cfg, &tcfg, args.runs)?;
                let f1s: Vec<f64> = outcomes
                    .iter()
                    .map(|o| o.log.last().unwrap().f1)
                    .collect();
                let stem = args.out.with_extension("");
                let ext = args
                    .out
                    .extension()
                    .map(|e| format!(".{}", e.to_string_lossy()))
                    .unwrap_or_default();
                for (i, outcome) in outcomes.iter().enumerate() {
                    let path = PathBuf::from(format!("{}_run{i}{ext}", stem.display()));
                    outcome.net.save(&path)?;
                }
                write_metric_log(args.metrics.as_deref(), &outcomes[0].log)?;
                eprintln!(
                    "[train] {} runs: train F1 mean {:.4}, p10 {:.4}, p90 {:.4}",
                    args.runs,
                    f1s.iter().sum::<f64>() / f1s.len() as f64,
                    nnet::percentile(&f1s, 0.1),
                    nnet::percentile(&f1s, 0.9),
                );
            }
            Ok(())
        }
        other => Err(usage(format!("unknown model family '{other}'"))),
    }
}

/// Repeated seeded 85:15 splits for the LDA pipeline: per fold, select
/// the dimensionality on the training part only, fit there, and report
/// the validation F1.
fn lda_cv(
    samples: &[LabeledSample],
    candidates: &[usize],
    seed: u64,
    k: usize,
) -> CliResult<Vec<f64>> {
    use rand::prelude::*;
    if k < 2 {
        return Err(usage(format!("need k >= 2 folds, got {k}")));
    }
    if samples.len() < k {
        return Err(usage(format!(
            "k = {k} exceeds the dataset size {}",
            samples.len()
        )));
    }
    let n = samples.len();
    let n_train = (((n as f64) * 0.85).round() as usize).clamp(2, n - 1);
    let mut out = Vec::with_capacity(k);
    for fold in 0..k {
        let fold_seed = seed.wrapping_add(fold as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(fold_seed);
        idx.shuffle(&mut rng);
        let (tr, va) = idx.split_at(n_train);
        let train_set: Vec<LabeledSample> = tr.iter().map(|&i| samples[i].clone()).collect();
        let d = lda::select_pca_dim(&train_set, candidates, fold_seed)?;
        let (scorer, _, _) = lda::fit_pipeline(&train_set, d)?;
        let (mut tp, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64);
        for &i in va {
            let predicted = scorer.score(&samples[i].spectrogram)? >= 0.5;
            match (predicted, samples[i].label) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        out.push(if 2.0 * tp + fp + fn_ == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        });
    }
    Ok(out)
}

fn default_channels(blocks: usize) -> String {
    let stages = blocks.div_ceil(2);
    (0..stages)
        .map(|s| (16usize << s.min(3)).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn write_metric_log(path: Option<&Path>, log: &[nnet::EpochLog]) -> CliResult<()> {
    let Some(path) = path else { return Ok(()) };
    let mut text = String::from("epoch,loss,f1\n");
    for e in log {
        text.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.loss, e.f1));
    }
    fs::write(path, text).map_err(|e| CliError::Core(CoreError::io(path, e)))
}

// ---- model loading ----

enum AnyScorer {
    Net(Box<ResNet>),
    Lda(Box<LdaScorer>),
}

impl Scorer for AnyScorer {
    fn score(&self, spec: &upcall_core::Spectrogram) -> upcall_core::Result<f64> {
        match self {
            AnyScorer::Net(m) => m.score(spec),
            AnyScorer::Lda(m) => m.score(spec),
        }
    }
}

fn load_model(path: &Path) -> CliResult<AnyScorer> {
    let bytes = fs::read(path).map_err(|e| CliError::Core(CoreError::io(path, e)))?;
    match bytes.get(..4) {
        Some(b"RNET") => Ok(AnyScorer::Net(Box::new(ResNet::load(path)?))),
        Some(b"LDA1") => Ok(AnyScorer::Lda(Box::new(LdaScorer::load(path)?))),
        _ => Err(CliError::Core(CoreError::MalformedModel {
            path: path.to_path_buf(),
            detail: "unknown magic (expected RNET or LDA1)".into(),
        })),
    }
}

// ---- detect ----

fn write_events_csv(
    path: &Path,
    source_id: &str,
    events: &[DetectionEvent],
) -> CliResult<()> {
    let mut text = String::from("source_id,t_start,t_end,core_start,core_end,peak_score\n");
    for e in events {
        text.push_str(&format!(
            "{source_id},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.t_start, e.t_end, e.core_start, e.core_end, e.peak_score
        ));
    }
    fs::write(path, text).map_err(|e| CliError::Core(CoreError::io(path, e)))
}

fn read_events_csv(path: &Path) -> CliResult<Vec<(String, DetectionEvent)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Core(CoreError::io(path, e)))?;
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "source_id,t_start,t_end,core_start,core_end,peak_score" => {}
        other => {
            return Err(CliError::Core(CoreError::MalformedRow {
                path: path.to_path_buf(),
                line: 1,
                detail: format!("unexpected header {other:?}"),
            }))
        }
    }
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        let bad = |detail: String| {
            CliError::Core(CoreError::MalformedRow {
                path: path.to_path_buf(),
                line: idx + 1,
                detail,
            })
        };
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> CliResult<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number '{}'", fields[i])))
        };
        out.push((
            fields[0].to_string(),
            DetectionEvent {
                t_start: num(1)?,
                t_end: num(2)?,
                core_start: num(3)?,
                core_end: num(4)?,
                peak_score: num(5)?,
            },
        ));
    }
    Ok(out)
}

fn cmd_detect(seed: u64, args: DetectArgs) -> CliResult<()> {
    log_config(
        "detect",
        &[
            ("wav", args.wav.display().to_string()),
            ("model", args.model.display().to_string()),
            ("threshold", args.threshold.to_string()),
            ("out", args.out.display().to_string()),
            ("seed", seed.to_string()),
        ],
    );
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(usage(format!(
            "threshold must lie in [0, 1], got {}",
            args.threshold
        )));
    }
    let clip = load_resampled(&args.wav)?;
    let model = load_model(&args.model)?;
    let events = detector::detect(&clip, &model, args.threshold)?;
    write_events_csv(&args.out, &clip.source_id, &events)?;
    eprintln!(
        "[detect] {} events over {:.1} s -> {}",
        events.len(),
        clip.duration(),
        args.out.display()
    );
    Ok(())
}

// ---- snr ----

fn cmd_snr(args: SnrArgs) -> CliResult<()> {
    let clip = load_resampled(&args.wav)?;
    match (&args.t_start, &args.annotations) {
        (Some(t0), None) => {
            log_config(
                "snr",
                &[
                    ("wav", args.wav.display().to_string()),
                    ("t_start", t0.to_string()),
                ],
            );
            let est = estimate_segment_snr(&clip, t0 + 1.5)?;
            println!("{est:.2}");
            Ok(())
        }
        (None, Some(ann_path)) => {
            let out = args
                .out
                .as_ref()
                .ok_or_else(|| usage("batch mode needs --out for the SNR-annotated CSV"))?;
            log_config(
                "snr",
                &[
                    ("wav", args.wav.display().to_string()),
                    ("annotations", ann_path.display().to_string()),
                    ("out", out.display().to_string()),
                ],
            );
            let annotations = eval::read_annotations(ann_path)?;
            let mut out_rows = Vec::with_capacity(annotations.len());
            for a in annotations {
                let mid = 0.5 * (a.t_start + a.t_end);
                let est = estimate_segment_snr(&clip, mid)?;
                out_rows.push(Annotation {
                    snr: Some(est),
                    ..a
                });
            }
            eval::write_annotations(out, &out_rows)?;
            eprintln!("[snr] annotated {} calls -> {}", out_rows.len(), out.display());
            Ok(())
        }
        (Some(_), Some(_)) => Err(usage(
            "pass either a start time or --annotations, not both",
        )),
        (None, None) => Err(usage("pass a start time or --annotations <csv>")),
    }
}

/// SNR of the 3-s segment centered on `mid` (clamped to the clip).
fn estimate_segment_snr(clip: &AudioClip, mid: f64) -> CliResult<f64> {
    let rate = clip.sample_rate as f64;
    let n = clip.samples.len();
    let want = (3.0 * rate).round() as usize;
    if n < want {
        return Err(CliError::Core(CoreError::ClipTooShort(format!(
            "need 3 s for SNR estimation, clip has {:.2} s",
            clip.duration()
        ))));
    }
    let start = (((mid - 1.5) * rate).round() as isize).clamp(0, (n - want) as isize) as usize;
    let segment = AudioClip {
        samples: clip.samples[start..start + want].to_vec(),
        sample_rate: clip.sample_rate,
        start_time: clip.start_time + start as f64 / rate,
        source_id: clip.source_id.clone(),
    };
    let spec = signal::compute_spectrogram(&segment)?;
    Ok(snr_mod::estimate_snr(&spec)?)
}

// ---- evaluate ----

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    log_config(
        "evaluate",
        &[
            ("detections", args.detections.display().to_string()),
            ("annotations", args.annotations.display().to_string()),
            ("duration_h", args.duration_h.to_string()),
            (
                "snr_min",
                args.snr_min.map(|v| v.to_string()).unwrap_or_default(),
            ),
        ],
    );
    let events = read_events_csv(&args.detections)?;
    let annotations = eval::read_annotations(&args.annotations)?;

    let mut known: Vec<String> = match &args.sources {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => events.iter().map(|(s, _)| s.clone()).collect(),
    };
    known.sort();
    known.dedup();
    for a in &annotations {
        if !known.contains(&a.source_id) {
            return Err(CliError::Core(CoreError::InvalidArgument(format!(
                "annotation references source_id '{}' absent from the detections \
                 (pass --sources to name zero-event sources)",
                a.source_id
            ))));
        }
    }

    // Per-source matching, merged by summing counts (sources sorted).
    let mut totals = eval::MatchCounts {
        tp_ann: 0,
        missed: 0,
        tp_evt: 0,
        fp: 0,
    };
    let mut retained_total = 0usize;
    for source in &known {
        let src_events: Vec<DetectionEvent> = events
            .iter()
            .filter(|(s, _)| s == source)
            .map(|(_, e)| e.clone())
            .collect();
        let src_anns: Vec<Annotation> = annotations
            .iter()
            .filter(|a| &a.source_id == source)
            .cloned()
            .collect();
        match args.snr_min {
            Some(snr_min) => {
                let (report, retained) =
                    eval::snr_filtered_metrics(&src_anns, &src_events, snr_min, args.duration_h)?;
                retained_total += retained;
                totals.tp_ann += report.tp_ann;
                totals.missed += report.missed;
                totals.tp_evt += report.tp_evt;
                totals.fp += report.fp;
            }
            None => {
                let counts = eval::match_events(&src_anns, &src_events);
                retained_total += src_anns.len();
                totals.tp_ann += counts.tp_ann;
                totals.missed += counts.missed;
                totals.tp_evt += counts.tp_evt;
                totals.fp += counts.fp;
            }
        }
    }
    let report = eval::compute_metrics(totals, args.duration_h)?;
    println!("{}", eval::summarize_report(&report));
    if args.snr_min.is_some() {
        println!("retained annotations: {retained_total}");
    }
    if let Some(out) = &args.out {
        eval::write_report_csv(out, &[(f64::NAN, report)]).map_err(CliError::Core)?;
        eprintln!("[evaluate] report -> {}", out.display());
    }
    Ok(())
}

// ---- sweep ----

fn parse_thresholds(spec: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let list: Vec<f64> = if parts.len() == 3 {
        let lo: f64 = parts[0].parse().map_err(|_| usage("bad threshold range"))?;
        let hi: f64 = parts[1].parse().map_err(|_| usage("bad threshold range"))?;
        let step: f64 = parts[2].parse().map_err(|_| usage("bad threshold range"))?;
        if step <= 0.0 || hi < lo {
            return Err(usage("threshold range must be lo:hi:step with step > 0"));
        }
        let mut v = Vec::new();
        let mut t = lo;
        while t <= hi + 1e-12 {
            v.push((t * 1e9).round() / 1e9);
            t += step;
        }
        v
    } else {
        spec.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| usage(format!("bad threshold '{p}'")))
            })
            .collect::<CliResult<Vec<f64>>>()?
    };
    if list.is_empty() {
        return Err(usage("empty threshold list"));
    }
    Ok(list)
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    log_config(
        "sweep",
        &[
            ("wav", args.wav.display().to_string()),
            ("model", args.model.display().to_string()),
            ("annotations", args.annotations.display().to_string()),
            ("thresholds", args.thresholds.clone()),
            ("out", args.out.display().to_string()),
        ],
    );
    let thresholds = parse_thresholds(&args.thresholds)?;
    let clip = load_resampled(&args.wav)?;
    let annotations = eval::read_annotations(&args.annotations)?;
    let model = load_model(&args.model)?;

    let series = detector::score_stream(&clip, &model)?;
    let smoothed = detector::smooth(&series, detector::SMOOTH_WIDTH)?;
    let duration_h = clip.duration() / 3600.0;
    let rows = eval::threshold_sweep(&annotations, &smoothed, &thresholds, duration_h)?;

    eval::write_report_csv(&args.out, &rows)?;
    let stem = args.out.with_extension("");
    let pr: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|(_, r)| Some((r.recall?, r.precision?)))
        .collect();
    let fpr_r: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|(_, r)| Some((r.fpr, r.recall?)))
        .collect();
    eval::write_curve_csv(
        PathBuf::from(format!("{}_pr.csv", stem.display())),
        ("recall", "precision"),
        &pr,
    )?;
    eval::write_curve_csv(
        PathBuf::from(format!("{}_fpr.csv", stem.display())),
        ("fpr_per_h", "recall"),
        &fpr_r,
    )?;
    eprintln!(
        "[sweep] {} thresholds over {:.2} h -> {}",
        rows.len(),
        duration_h,
        args.out.display()
    );
    // Report the best threshold by min(recall, precision).
    if let Some((t, r)) = rows
        .iter()
        .filter(|(_, r)| r.recall.is_some() && r.precision.is_some())
        .max_by(|a, b| {
            let k = |r: &eval::EvalReport| r.recall.unwrap().min(r.precision.unwrap());
            k(&a.1).partial_cmp(&k(&b.1)).unwrap()
        })
    {
        println!(
            "best threshold {:.3}: {}",
            t,
            eval::summarize_report(r)
        );
    }
    Ok(())
}
