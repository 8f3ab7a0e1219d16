use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use crate::autodiff::OptimizerConfig;
use crate::error::{Error, Result};
use crate::features::{context_window, extract_features, FeatureSequence, FeatureSpec};
use crate::models::{
    pca_fit, pca_reconstruct, split_indices, train_autoencoder, train_score_model, Autoencoder,
    AutoencoderConfig, DeepLstmConfig, DeepLstmScorer, MultiScaleScorer, Pipeline, ScorerConfig,
    TrainConfig, TrainLog,
};
use crate::skeleton::{equalize_lengths, Cohort, Dataset, ExerciseId};

pub const METHOD_PCA: &str = "pca";
pub const METHOD_AUTOENCODER: &str = "autoencoder";
pub const METHOD_DEEP_LSTM: &str = "deep_lstm";
pub const METHOD_MULTISCALE: &str = "multiscale";
pub const METHOD_MULTISCALE_RAW: &str = "multiscale_no_encoding";

/// Reads an experiment configuration from TOML.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn config_to_toml<T: Serialize>(config: &T) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}

/// Equalizes one exercise's recordings and extracts features.
pub fn prepare_features(dataset: &Dataset, spec: &FeatureSpec) -> Result<Vec<FeatureSequence>> {
    let eq = equalize_lengths(dataset, spec.exercise)?;
    eq.for_exercise(spec.exercise)
        .map(|r| extract_features(r, spec))
        .collect()
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MethodRow {
    fn new(method: &str, per_seed: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        MethodRow {
            method: method.into(),
            mean,
            std,
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimredConfig {
    pub exercise: ExerciseId,
    pub synth: SynthConfig,
    pub autoencoder: AutoencoderConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl DimredConfig {
    /// Lateral trunk tilt with a two-dimensional latent space.
    pub fn published() -> Self {
        DimredConfig {
            exercise: ExerciseId::E2,
            synth: SynthConfig {
                exercises: vec![ExerciseId::E2],
                n_healthy: 30,
                n_impaired: 0,
                sensor_noise_std: 0.0,
                seed: 11,
                ..SynthConfig::default()
            },
            autoencoder: AutoencoderConfig {
                latent: 2,
                ..AutoencoderConfig::default()
            },
            train: TrainConfig {
                max_epochs: 600,
                patience: 100,
                optimizer: OptimizerConfig::adam(3e-3),
                ..TrainConfig::autoencoder()
            },
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimredSection {
    pub exercise: ExerciseId,
    pub latent_dims: usize,
    pub seeds: Vec<u64>,
    /// One row each for PCA and the autoencoder; validation MSE in
    /// standardized units.
    pub rows: Vec<MethodRow>,
}

impl DimredSection {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// A trained model with its seed and log, kept so report numbers can be
/// recomputed.
#[derive(Clone, Debug)]
pub struct SeedRun<M> {
    pub seed: u64,
    pub model: M,
    pub log: TrainLog,
}

pub struct DimredOutcome {
    pub section: DimredSection,
    pub autoencoders: Vec<SeedRun<Autoencoder>>,
}

fn healthy(features: &[FeatureSequence]) -> Vec<FeatureSequence> {
    features
        .iter()
        .filter(|f| f.cohort == Cohort::Healthy)
        .cloned()
        .collect()
}

/// PCA validation MSE on the same split and standardization as `ae`.
pub fn pca_validation_mse(
    ae: &Autoencoder,
    healthy: &[FeatureSequence],
    seed: u64,
    fraction: f64,
) -> Result<f64> {
    let (train_idx, val_idx) = split_indices(healthy.len(), fraction, seed)?;
    let z = |i: usize| ae.standardizer.apply(healthy[i].values.view());
    let train: Vec<Array2<f64>> = train_idx.iter().map(|&i| z(i)).collect::<Result<_>>()?;
    let views: Vec<ArrayView2<'_, f64>> = train.iter().map(|a| a.view()).collect();
    let pooled = concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
    let pca = pca_fit(pooled.view(), ae.config.latent)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for &i in &val_idx {
        let x = z(i)?;
        let r = pca_reconstruct(&pca, x.view())?;
        sum += (&x - &r).mapv(|d| d * d).sum();
        n += x.len();
    }
    Ok(sum / n as f64)
}

/// Autoencoder against PCA at the same latent width, per seed on identical
/// healthy train/validation splits.
pub fn run_dimred_comparison(
    features: &[FeatureSequence],
    cfg: &DimredConfig,
) -> Result<DimredOutcome> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let healthy = healthy(features);
    let mut ae_mse = Vec::new();
    let mut pca_mse = Vec::new();
    let mut autoencoders = Vec::new();
    for &seed in &cfg.seeds {
        let train = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let (ae, log) = train_autoencoder(&healthy, cfg.autoencoder.clone(), &train)?;
        log::info!(
            "dimred seed {seed}: autoencoder {:.5} at epoch {}",
            log.best_val_loss,
            log.best_epoch
        );
        ae_mse.push(log.best_val_loss);
        pca_mse.push(pca_validation_mse(
            &ae,
            &healthy,
            seed,
            train.validation_fraction,
        )?);
        autoencoders.push(SeedRun {
            seed,
            model: ae,
            log,
        });
    }
    Ok(DimredOutcome {
        section: DimredSection {
            exercise: cfg.exercise,
            latent_dims: cfg.autoencoder.latent,
            seeds: cfg.seeds.clone(),
            rows: vec![
                MethodRow::new(METHOD_PCA, pca_mse),
                MethodRow::new(METHOD_AUTOENCODER, ae_mse),
            ],
        },
        autoencoders,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub exercise: ExerciseId,
    pub synth: SynthConfig,
    pub autoencoder: AutoencoderConfig,
    pub autoencoder_train: TrainConfig,
    pub scorer: ScorerConfig,
    pub baseline: DeepLstmConfig,
    /// Shared by every score model; `context_window` sets W.
    pub score_train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ScoringConfig {
    pub fn published() -> Self {
        ScoringConfig {
            exercise: ExerciseId::E1,
            synth: SynthConfig {
                exercises: vec![ExerciseId::E1],
                n_healthy: 30,
                n_impaired: 30,
                seed: 21,
                ..SynthConfig::default()
            },
            autoencoder: AutoencoderConfig::default(),
            autoencoder_train: TrainConfig {
                max_epochs: 300,
                patience: 50,
                optimizer: OptimizerConfig::adam(3e-3),
                ..TrainConfig::autoencoder()
            },
            scorer: ScorerConfig::default(),
            baseline: DeepLstmConfig::default(),
            score_train: TrainConfig {
                max_epochs: 400,
                patience: 50,
                optimizer: OptimizerConfig::adam(3e-3),
                ..TrainConfig::scorer()
            },
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringSection {
    pub exercise: ExerciseId,
    pub context_window: usize,
    pub seeds: Vec<u64>,
    /// Validation MSE of scaled scores, one row per method.
    pub rows: Vec<MethodRow>,
}

impl ScoringSection {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub struct ScoringOutcome {
    pub section: ScoringSection,
    pub autoencoders: Vec<SeedRun<Autoencoder>>,
    pub scorers: Vec<SeedRun<MultiScaleScorer>>,
    pub raw_scorers: Vec<SeedRun<MultiScaleScorer>>,
    pub baselines: Vec<SeedRun<DeepLstmScorer>>,
}

fn targets(features: &[FeatureSequence]) -> Result<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            f.score
                .ok_or_else(|| Error::Data(format!("sequence `{}` has no score", f.subject_id)))
        })
        .collect()
}

fn windowed(seqs: &[Array2<f64>], w: usize) -> Result<Vec<Array2<f64>>> {
    seqs.iter().map(|s| context_window(s.view(), w)).collect()
}

fn views(seqs: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
    seqs.iter().map(|a| a.view()).collect()
}

fn encode_all(ae: &Autoencoder, features: &[FeatureSequence]) -> Result<Vec<Array2<f64>>> {
    let v: Vec<_> = features.iter().map(|f| f.values.view()).collect();
    ae.encode(&v)
}

fn standardize_all(ae: &Autoencoder, features: &[FeatureSequence]) -> Result<Vec<Array2<f64>>> {
    features
        .iter()
        .map(|f| ae.standardizer.apply(f.values.view()))
        .collect()
}

fn fit_multiscale(
    inputs: &[Array2<f64>],
    y: &[f64],
    cfg: &ScorerConfig,
    train: &TrainConfig,
) -> Result<(SeedRun<MultiScaleScorer>, f64)> {
    let w = train.context_window;
    let x = windowed(inputs, w)?;
    let width = x[0].ncols();
    let model = MultiScaleScorer::new(cfg.clone(), width, w, train.seed)?;
    let out = train_score_model(model, &views(&x), y, train)?;
    Ok((
        SeedRun {
            seed: train.seed,
            model: out.model,
            log: out.log,
        },
        out.val_mse,
    ))
}

/// Deep-LSTM baseline, multi-scale scorer on latents, and multi-scale scorer
/// on standardized features, all with the same context window and splits.
pub fn run_scoring_comparison(
    features: &[FeatureSequence],
    cfg: &ScoringConfig,
) -> Result<ScoringOutcome> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let y = targets(features)?;
    let healthy = healthy(features);
    let w = cfg.score_train.context_window;
    let mut out = ScoringOutcome {
        section: ScoringSection {
            exercise: cfg.exercise,
            context_window: w,
            seeds: cfg.seeds.clone(),
            rows: Vec::new(),
        },
        autoencoders: Vec::new(),
        scorers: Vec::new(),
        raw_scorers: Vec::new(),
        baselines: Vec::new(),
    };
    let (mut deep, mut multi, mut raw) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let ae_train = TrainConfig {
            seed,
            ..cfg.autoencoder_train.clone()
        };
        let (ae, ae_log) = train_autoencoder(&healthy, cfg.autoencoder.clone(), &ae_train)?;
        let latents = encode_all(&ae, features)?;
        let train = TrainConfig {
            seed,
            ..cfg.score_train.clone()
        };

        let (run, mse) = fit_multiscale(&latents, &y, &cfg.scorer, &train)?;
        multi.push(mse);
        out.scorers.push(run);

        let (run, mse) = fit_multiscale(&standardize_all(&ae, features)?, &y, &cfg.scorer, &train)?;
        raw.push(mse);
        out.raw_scorers.push(run);

        let x = windowed(&latents, w)?;
        let baseline = DeepLstmScorer::new(cfg.baseline.clone(), x[0].ncols(), seed)?;
        let fitted = train_score_model(baseline, &views(&x), &y, &train)?;
        deep.push(fitted.val_mse);
        out.baselines.push(SeedRun {
            seed,
            model: fitted.model,
            log: fitted.log,
        });
        log::info!(
            "scoring seed {seed}: multiscale {:.5}, no encoding {:.5}, deep lstm {:.5}",
            multi.last().unwrap(),
            raw.last().unwrap(),
            deep.last().unwrap()
        );
        out.autoencoders.push(SeedRun {
            seed,
            model: ae,
            log: ae_log,
        });
    }
    out.section.rows = vec![
        MethodRow::new(METHOD_DEEP_LSTM, deep),
        MethodRow::new(METHOD_MULTISCALE, multi),
        MethodRow::new(METHOD_MULTISCALE_RAW, raw),
    ];
    Ok(out)
}

pub struct PipelineTraining {
    pub pipeline: Pipeline,
    pub autoencoder_log: TrainLog,
    pub scorer_log: TrainLog,
    pub val_mse: f64,
}

/// Trains a deployable scoring pipeline for `spec.exercise`: autoencoder on
/// the healthy recordings, multi-scale scorer on every scored recording.
pub fn train_pipeline(
    dataset: &Dataset,
    spec: &FeatureSpec,
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<PipelineTraining> {
    let features = prepare_features(dataset, spec)?;
    let target_length = features
        .first()
        .map(|f| f.len())
        .ok_or_else(|| Error::EmptyInput(format!("no recordings for {}", spec.exercise)))?;
    let scored: Vec<FeatureSequence> = features
        .iter()
        .filter(|f| f.score.is_some())
        .cloned()
        .collect();
    let ae_train = TrainConfig {
        seed,
        ..cfg.autoencoder_train.clone()
    };
    let (ae, autoencoder_log) =
        train_autoencoder(&healthy(&features), cfg.autoencoder.clone(), &ae_train)?;
    let latents = encode_all(&ae, &scored)?;
    let train = TrainConfig {
        seed,
        ..cfg.score_train.clone()
    };
    let (run, val_mse) = fit_multiscale(&latents, &targets(&scored)?, &cfg.scorer, &train)?;
    Ok(PipelineTraining {
        pipeline: Pipeline::new(spec.clone(), target_length, ae, run.model)?,
        autoencoder_log,
        scorer_log: run.log,
        val_mse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub exercise: ExerciseId,
    pub synth: SynthConfig,
    pub autoencoder: AutoencoderConfig,
    pub autoencoder_train: TrainConfig,
    pub scorer: ScorerConfig,
    pub score_train: TrainConfig,
    pub windows: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn published() -> Self {
        let scoring = ScoringConfig::published();
        SweepConfig {
            exercise: ExerciseId::E3,
            synth: SynthConfig {
                exercises: vec![ExerciseId::E3],
                n_healthy: 30,
                n_impaired: 90,
                tremor_max: 0.15,
                score: super::synth::ScoreFunction {
                    attenuation_weight: 0.4,
                    tremor_weight: 0.6,
                },
                seed: 31,
                ..SynthConfig::default()
            },
            autoencoder: scoring.autoencoder,
            autoencoder_train: scoring.autoencoder_train,
            scorer: scoring.scorer,
            score_train: scoring.score_train,
            windows: vec![1, 3, 5, 7],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub window: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub exercise: ExerciseId,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

impl SweepSection {
    pub fn point(&self, window: usize) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.window == window)
    }
}

pub struct SweepOutcome {
    pub section: SweepSection,
    pub autoencoders: Vec<SeedRun<Autoencoder>>,
    /// One run per (window, seed), windows outermost.
    pub scorers: Vec<SeedRun<MultiScaleScorer>>,
}

/// Multi-scale scorer validation MSE for each context window, one
/// autoencoder per seed shared across windows.
pub fn run_context_sweep(features: &[FeatureSequence], cfg: &SweepConfig) -> Result<SweepOutcome> {
    if cfg.seeds.is_empty() || cfg.windows.is_empty() {
        return Err(Error::Config("sweep needs seeds and windows".into()));
    }
    if let Some(w) = cfg.windows.iter().find(|w| *w % 2 == 0) {
        return Err(Error::Parameter(format!("context window {w} is not odd")));
    }
    let y = targets(features)?;
    let healthy = healthy(features);
    let mut latents = Vec::new();
    let mut autoencoders = Vec::new();
    for &seed in &cfg.seeds {
        let train = TrainConfig {
            seed,
            ..cfg.autoencoder_train.clone()
        };
        let (ae, log) = train_autoencoder(&healthy, cfg.autoencoder.clone(), &train)?;
        latents.push(encode_all(&ae, features)?);
        autoencoders.push(SeedRun {
            seed,
            model: ae,
            log,
        });
    }
    let mut points = Vec::new();
    let mut scorers = Vec::new();
    for &w in &cfg.windows {
        let mut per_seed = Vec::new();
        for (&seed, z) in cfg.seeds.iter().zip(&latents) {
            let train = TrainConfig {
                seed,
                context_window: w,
                ..cfg.score_train.clone()
            };
            let (run, mse) = fit_multiscale(z, &y, &cfg.scorer, &train)?;
            log::info!("sweep W={w} seed {seed}: {mse:.5}");
            per_seed.push(mse);
            scorers.push(run);
        }
        let (mean, std) = mean_std(&per_seed);
        points.push(SweepPoint {
            window: w,
            mean,
            std,
            per_seed,
        });
    }
    Ok(SweepOutcome {
        section: SweepSection {
            exercise: cfg.exercise,
            seeds: cfg.seeds.clone(),
            points,
        },
        autoencoders,
        scorers,
    })
}
