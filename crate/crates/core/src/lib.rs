pub mod autodiff;
pub mod error;
pub mod eval;
pub mod features;
pub mod feedback;
pub mod models;
pub mod nn;
pub mod service;
pub mod skeleton;

pub use error::{Error, Result};
pub use features::{FeatureSequence, FeatureSpec};
pub use feedback::{FeedbackConfig, FeedbackFrame, FeedbackSession, GradingScale};
pub use models::{Autoencoder, MultiScaleScorer, Pipeline};
pub use skeleton::{Cohort, Dataset, ExerciseId, Recording, SkeletonFrame};
