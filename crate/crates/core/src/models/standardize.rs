use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels with a smaller standard deviation are only centered.
const MIN_STD: f64 = 1e-12;

/// Per-channel z-scoring fitted on pooled frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit<'a>(sequences: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let mut rows: Option<Array2<f64>> = None;
        for seq in sequences {
            rows = Some(match rows {
                None => seq.to_owned(),
                Some(acc) => {
                    if acc.ncols() != seq.ncols() {
                        return Err(Error::shape("standardizer", &[acc.ncols()], &[seq.ncols()]));
                    }
                    ndarray::concatenate![Axis(0), acc, seq]
                }
            });
        }
        let rows =
            rows.ok_or_else(|| Error::EmptyInput("standardizer fitted on no data".into()))?;
        let mean = rows.mean_axis(Axis(0)).expect("at least one row");
        let std = rows
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s < MIN_STD { 1.0 } else { s });
        Ok(Standardizer { mean, std })
    }

    pub fn identity(width: usize) -> Self {
        Standardizer {
            mean: Array1::zeros(width),
            std: Array1::ones(width),
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.width() {
            return Err(Error::shape("standardize", &[x.ncols()], &[self.width()]));
        }
        Ok((&x - &self.mean) / &self.std)
    }

    pub fn invert(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.width() {
            return Err(Error::shape("standardize", &[z.ncols()], &[self.width()]));
        }
        Ok(&z * &self.std + &self.mean)
    }
}
