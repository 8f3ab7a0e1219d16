use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Autoencoder, MultiScaleScorer};
use crate::error::{Error, Result};
use crate::features::{extract_features, unscale_score, FeatureSpec};
use crate::skeleton::{resample_recording, ExerciseId, Recording};

const FORMAT: &str = "rehab-pipeline";

/// Everything needed to score a raw recording for one exercise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pipeline {
    pub format: String,
    pub feature_spec: FeatureSpec,
    /// Frame count recordings are resampled to before feature extraction.
    pub target_length: usize,
    pub autoencoder: Autoencoder,
    pub scorer: MultiScaleScorer,
}

impl Pipeline {
    pub fn new(
        feature_spec: FeatureSpec,
        target_length: usize,
        autoencoder: Autoencoder,
        scorer: MultiScaleScorer,
    ) -> Result<Self> {
        if autoencoder.input_width != feature_spec.width() {
            return Err(Error::shape(
                "pipeline features",
                &[feature_spec.width()],
                &[autoencoder.input_width],
            ));
        }
        if scorer.input_width != autoencoder.config.latent * scorer.context_window {
            return Err(Error::shape(
                "pipeline latent",
                &[autoencoder.config.latent * scorer.context_window],
                &[scorer.input_width],
            ));
        }
        if target_length < 2 {
            return Err(Error::Parameter(
                "target length must be at least 2 frames".into(),
            ));
        }
        Ok(Pipeline {
            format: FORMAT.into(),
            feature_spec,
            target_length,
            autoencoder,
            scorer,
        })
    }

    pub fn exercise(&self) -> ExerciseId {
        self.feature_spec.exercise
    }

    /// Predicted clinical score on the `[0, 50]` scale.
    pub fn score_recording(&self, rec: &Recording) -> Result<f64> {
        let resampled = resample_recording(rec, self.target_length)?;
        let features = extract_features(&resampled, &self.feature_spec)?;
        let latent = self.autoencoder.encode(&[features.values.view()])?;
        let scaled = self.scorer.score_sequence(latent[0].view())?;
        Ok(unscale_score(scaled))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Pipeline = serde_json::from_str(text)?;
        if p.format != FORMAT {
            return Err(Error::Schema(format!(
                "expected a {FORMAT} checkpoint, found {:?}",
                p.format
            )));
        }
        Pipeline::new(p.feature_spec, p.target_length, p.autoencoder, p.scorer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
