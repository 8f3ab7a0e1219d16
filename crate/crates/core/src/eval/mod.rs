//! Synthetic data, experiments and reports.

mod experiments;
mod report;
mod synth;

pub use experiments::{
    config_to_toml, load_config, mean_std, pca_validation_mse, prepare_features, run_context_sweep,
    run_dimred_comparison, run_scoring_comparison, train_pipeline, DimredConfig, DimredOutcome,
    DimredSection, MethodRow, PipelineTraining, ScoringConfig, ScoringOutcome, ScoringSection,
    SeedRun, SweepConfig, SweepOutcome, SweepPoint, SweepSection, METHOD_AUTOENCODER,
    METHOD_DEEP_LSTM, METHOD_MULTISCALE, METHOD_MULTISCALE_RAW, METHOD_PCA,
};
pub use report::{write_runs, ExperimentReport, RunMetadata, REPORT_FILE};
pub use synth::{
    generate_synthetic, rest_pose, synthesize_recording, template_recording, Performance,
    ScoreFunction, SynthConfig,
};
