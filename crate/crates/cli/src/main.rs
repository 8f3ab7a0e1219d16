use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rehab_core::eval::{
    generate_synthetic, load_config, prepare_features, run_context_sweep, run_dimred_comparison,
    run_scoring_comparison, template_recording, train_pipeline, write_runs, DimredConfig,
    ExperimentReport, RunMetadata, ScoringConfig, SweepConfig, SynthConfig,
};
use rehab_core::features::{extract_features, FeatureSequence, FeatureSpec};
use rehab_core::feedback::FeedbackConfig;
use rehab_core::service::{Server, ServerConfig, ServiceState};
use rehab_core::skeleton::{equalize_lengths, Dataset, ExerciseId};
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "rehab",
    version,
    about = "Skeleton exercise feedback, scoring and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a directory of `.rec` recordings into one dataset file.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample one exercise's recordings to their mean length.
    Equalize {
        #[arg(long)]
        exercise: ExerciseId,
        /// Dataset file or directory of `.rec` files.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-frame feature matrices as JSON.
    Extract {
        #[arg(long)]
        exercise: ExerciseId,
        #[arg(long = "in")]
        input: PathBuf,
        /// Feature spec TOML; the built-in default for the exercise otherwise.
        #[arg(long, alias = "spec")]
        features: Option<PathBuf>,
        /// Resample to the mean length first.
        #[arg(long)]
        equalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scored dataset.
    Synth {
        /// Synthesis TOML; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `.json` writes a dataset file, anything else a directory of `.rec` files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write noise-free template recordings for every exercise.
    Templates {
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 2)]
        repetitions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Autoencoder versus PCA reconstruction error.
    RunDimred(ExperimentArgs),
    /// Multi-scale scorer versus the deep-LSTM baseline.
    RunScoring(ExperimentArgs),
    /// Score error across context window sizes.
    RunContextSweep(ExperimentArgs),
    /// Print a report directory as a table.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
    /// Train a scoring pipeline checkpoint for the live service.
    Train {
        /// Scoring experiment TOML supplying model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scored dataset; synthesized from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        exercise: Option<ExerciseId>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the live feedback service.
    Serve {
        #[arg(long, env = "REHAB_BIND", default_value = "127.0.0.1:7878")]
        bind: String,
        /// Directory of template `.rec` files, one per exercise.
        #[arg(long)]
        templates: PathBuf,
        /// Directory of pipeline checkpoints (`*.json`).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Grading thresholds TOML.
        #[arg(long)]
        feedback: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        queue: usize,
    },
}

#[derive(clap::Args)]
struct ExperimentArgs {
    /// Experiment TOML; the published configuration otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Report directory; existing sections are kept.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = if path.is_dir() {
        Dataset::from_dir(path)
    } else {
        Dataset::load(path)
    };
    ds.with_context(|| format!("loading dataset {}", path.display()))
}

fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        ds.save(path)?;
    } else {
        ds.write_dir(path)?;
    }
    Ok(())
}

fn feature_spec(exercise: ExerciseId, path: Option<&Path>) -> Result<FeatureSpec> {
    match path {
        Some(p) => {
            let spec = FeatureSpec::load(p).with_context(|| format!("loading {}", p.display()))?;
            if spec.exercise != exercise {
                bail!(
                    "{} describes {} but {exercise} was requested",
                    p.display(),
                    spec.exercise
                );
            }
            Ok(spec)
        }
        None => Ok(FeatureSpec::default_for(exercise)),
    }
}

fn config_or<T: serde::de::DeserializeOwned>(
    path: Option<&Path>,
    default: impl FnOnce() -> T,
) -> Result<T> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(default()),
    }
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Loads the report in `dir`, lets `update` fill a section, then rewrites it.
fn update_report(
    dir: &Path,
    section: &str,
    config: Value,
    update: impl FnOnce(&mut ExperimentReport),
) -> Result<()> {
    let mut report = ExperimentReport::load_dir(dir)?;
    update(&mut report);
    report.metadata = RunMetadata {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        commit: git_commit().or(report.metadata.commit.take()),
        configs: std::mem::take(&mut report.metadata.configs),
    };
    report.metadata.configs.insert(section.into(), config);
    report.write_dir(dir)?;
    println!("{}", report.to_markdown());
    Ok(())
}

fn features_for(synth: &SynthConfig, exercise: ExerciseId) -> Result<Vec<FeatureSequence>> {
    let ds = generate_synthetic(synth)?;
    Ok(prepare_features(&ds, &FeatureSpec::default_for(exercise))?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, out } => {
            let ds = Dataset::from_dir(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            if ds.recordings.is_empty() {
                bail!("no .rec files in {}", input.display());
            }
            ds.save(&out)?;
            for (ex, n) in ds.manifest() {
                println!("{ex}: {n} recordings");
            }
        }
        Command::Equalize {
            exercise,
            input,
            out,
        } => {
            let ds = equalize_lengths(&load_dataset(&input)?, exercise)?;
            save_dataset(&ds, &out)?;
            let len = ds.for_exercise(exercise).next().map(|r| r.len());
            if let Some(len) = len {
                println!("{exercise}: {len} frames");
            }
        }
        Command::Extract {
            exercise,
            input,
            features,
            equalize,
            out,
        } => {
            let mut ds = load_dataset(&input)?;
            if equalize {
                ds = equalize_lengths(&ds, exercise)?;
            }
            let spec = feature_spec(exercise, features.as_deref())?;
            let seqs = ds
                .for_exercise(exercise)
                .map(|r| extract_features(r, &spec))
                .collect::<rehab_core::Result<Vec<_>>>()?;
            if seqs.is_empty() {
                bail!("no {exercise} recordings in {}", input.display());
            }
            fs::write(&out, serde_json::to_string(&seqs)?)?;
            println!("{} sequences, {} features each", seqs.len(), spec.width());
        }
        Command::Synth { config, seed, out } => {
            let mut cfg: SynthConfig = config_or(config.as_deref(), SynthConfig::default)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = generate_synthetic(&cfg)?;
            save_dataset(&ds, &out)?;
            println!("{} recordings", ds.recordings.len());
        }
        Command::Templates {
            frames,
            repetitions,
            out,
        } => {
            let recs = ExerciseId::ALL
                .iter()
                .map(|&ex| template_recording(ex, frames, repetitions))
                .collect::<rehab_core::Result<Vec<_>>>()?;
            let ds = Dataset::new(recs);
            ds.write_dir(&out)?;
            println!("{} templates", ds.recordings.len());
        }
        Command::RunDimred(args) => {
            let mut cfg: DimredConfig = config_or(args.config.as_deref(), DimredConfig::published)?;
            if let Some(s) = args.seeds {
                cfg.seeds = s;
            }
            let out = run_dimred_comparison(&features_for(&cfg.synth, cfg.exercise)?, &cfg)?;
            write_runs(&args.out, "autoencoder", &out.autoencoders)?;
            update_report(&args.out, "dimred", serde_json::to_value(&cfg)?, |r| {
                r.dimred = Some(out.section)
            })?;
        }
        Command::RunScoring(args) => {
            let mut cfg: ScoringConfig =
                config_or(args.config.as_deref(), ScoringConfig::published)?;
            if let Some(s) = args.seeds {
                cfg.seeds = s;
            }
            let out = run_scoring_comparison(&features_for(&cfg.synth, cfg.exercise)?, &cfg)?;
            write_runs(&args.out, "scoring_autoencoder", &out.autoencoders)?;
            write_runs(&args.out, "multiscale", &out.scorers)?;
            write_runs(&args.out, "multiscale_no_encoding", &out.raw_scorers)?;
            write_runs(&args.out, "deep_lstm", &out.baselines)?;
            update_report(&args.out, "scoring", serde_json::to_value(&cfg)?, |r| {
                r.scoring = Some(out.section)
            })?;
        }
        Command::RunContextSweep(args) => {
            let mut cfg: SweepConfig = config_or(args.config.as_deref(), SweepConfig::published)?;
            if let Some(s) = args.seeds {
                cfg.seeds = s;
            }
            let out = run_context_sweep(&features_for(&cfg.synth, cfg.exercise)?, &cfg)?;
            write_runs(&args.out, "sweep_autoencoder", &out.autoencoders)?;
            for (w, runs) in cfg.windows.iter().zip(out.scorers.chunks(cfg.seeds.len())) {
                write_runs(&args.out, &format!("sweep_w{w}"), runs)?;
            }
            update_report(
                &args.out,
                "context_sweep",
                serde_json::to_value(&cfg)?,
                |r| r.sweep = Some(out.section),
            )?;
        }
        Command::Report { dir, format } => {
            if !dir.join(rehab_core::eval::REPORT_FILE).exists() {
                bail!("no report in {}", dir.display());
            }
            let report = ExperimentReport::load_dir(&dir)?;
            match format {
                Format::Md => print!("{}", report.to_markdown()),
                Format::Csv => print!("{}", report.to_csv()),
            }
        }
        Command::Train {
            config,
            data,
            exercise,
            features,
            seed,
            max_epochs,
            out,
        } => {
            let mut cfg: ScoringConfig = config_or(config.as_deref(), ScoringConfig::published)?;
            let exercise = exercise.unwrap_or(cfg.exercise);
            if let Some(n) = max_epochs {
                cfg.autoencoder_train.max_epochs = n;
                cfg.score_train.max_epochs = n;
            }
            let ds = match &data {
                Some(p) => load_dataset(p)?,
                None => generate_synthetic(&SynthConfig {
                    exercises: vec![exercise],
                    ..cfg.synth.clone()
                })?,
            };
            let spec = feature_spec(exercise, features.as_deref())?;
            let trained = train_pipeline(&ds, &spec, &cfg, seed)?;
            trained.pipeline.save(&out)?;
            println!(
                "{exercise}: autoencoder best epoch {}, scorer best epoch {}, validation MSE {:.5}",
                trained.autoencoder_log.best_epoch, trained.scorer_log.best_epoch, trained.val_mse
            );
        }
        Command::Serve {
            bind,
            templates,
            checkpoints,
            feedback,
            queue,
        } => {
            let fb = match feedback {
                Some(p) => FeedbackConfig::load(&p)?,
                None => FeedbackConfig::default(),
            };
            let state = ServiceState::load(&templates, checkpoints.as_deref(), fb)?;
            for t in state.templates() {
                log::info!(
                    "template {} ({} frames), scoring: {}",
                    t.exercise,
                    t.frames,
                    t.scoring
                );
            }
            let server = Server::bind(
                &bind,
                state,
                ServerConfig {
                    queue_capacity: queue,
                },
            )
            .with_context(|| format!("binding {bind}"))?;
            println!("listening on {}", server.local_addr()?);
            server.run()?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
