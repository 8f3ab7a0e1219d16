//! Sequence autoencoder, quality scorers and the PCA baseline.

mod autoencoder;
mod baseline;
mod pca;
mod pipeline;
mod scorer;
mod standardize;
mod train;

pub use autoencoder::{train_autoencoder, Autoencoder, AutoencoderConfig};
pub use baseline::{DeepLstmConfig, DeepLstmScorer};
pub use pca::{pca_fit, pca_reconstruct, symmetric_eigen, Pca};
pub use pipeline::Pipeline;
pub use scorer::{
    pooled_length, predict_score, train_score_model, train_scorer, MultiScaleScorer, ScoreModel,
    ScorerConfig, ScorerTraining, BRANCH_SCALES,
};
pub use standardize::Standardizer;
pub use train::{fit, split_indices, EpochRecord, TrainConfig, TrainLog};

use ndarray::{Array2, ArrayView2};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Stacks equal-shape `[M, D]` matrices into a `[B, M, D]` tape constant.
pub(crate) fn batch_constant(tape: &mut Tape, seqs: &[ArrayView2<'_, f64>]) -> Result<Var> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    let (m, d) = first.dim();
    let mut data = Vec::with_capacity(seqs.len() * m * d);
    for s in seqs {
        if s.dim() != (m, d) {
            return Err(Error::shape("batch", &[m, d], &[s.nrows(), s.ncols()]));
        }
        data.extend(s.iter().copied());
    }
    tape.constant(&[seqs.len(), m, d], data)
}

/// Splits a `[B, M, D]` tape value back into per-sequence matrices.
pub(crate) fn unbatch(tape: &Tape, v: Var) -> Vec<Array2<f64>> {
    let shape = tape.shape(v).to_vec();
    let (m, d) = (shape[1], shape[2]);
    tape.value(v)
        .chunks(m * d)
        .map(|c| Array2::from_shape_vec((m, d), c.to_vec()).expect("chunk matches shape"))
        .collect()
}

pub(crate) fn check_uniform(seqs: &[ArrayView2<'_, f64>], what: &str) -> Result<(usize, usize)> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::EmptyInput(format!("no {what} sequences")))?;
    let dim = first.dim();
    if dim.0 == 0 || dim.1 == 0 {
        return Err(Error::EmptyInput(format!("{what} sequence is empty")));
    }
    for s in seqs {
        if s.dim() != dim {
            return Err(Error::Parameter(format!(
                "{what} sequences must share one shape; found {:?} and {:?}",
                dim,
                s.dim()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{what} sequence contains a non-finite value"
            )));
        }
    }
    Ok(dim)
}
