use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("symmetric_eigen", &[n, a.ncols()], &[n, n]));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric_eigen"));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = m
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - sn * mkq;
                    m[[k, q]] = sn * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - sn * mqk;
                    m[[q, k]] = sn * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((values, vectors))
}

/// Linear projection onto the leading principal axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `dims x D`, one unit principal axis per row.
    pub components: Array2<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn dims(&self) -> usize {
        self.components.nrows()
    }

    pub fn transform(&self, data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::shape("pca", &[data.ncols()], &[self.mean.len()]));
        }
        Ok((&data - &self.mean).dot(&self.components.t()))
    }

    pub fn inverse(&self, codes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if codes.ncols() != self.dims() {
            return Err(Error::shape(
                "pca inverse",
                &[codes.ncols()],
                &[self.dims()],
            ));
        }
        Ok(codes.dot(&self.components) + &self.mean)
    }
}

/// Fits a `dims`-component PCA to the rows of `data` (`N x D`).
pub fn pca_fit(data: ArrayView2<'_, f64>, dims: usize) -> Result<Pca> {
    let (n, d) = data.dim();
    if n == 0 {
        return Err(Error::EmptyInput("pca fitted on no rows".into()));
    }
    if dims == 0 || dims > d {
        return Err(Error::Parameter(format!(
            "pca dims must lie in 1..={d}, got {dims}"
        )));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &data - &mean;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;
    let (eigenvalues, vectors) = symmetric_eigen(&cov)?;
    let components = vectors.slice(s![.., ..dims]).t().to_owned();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
    })
}

/// Projects onto the principal subspace and maps back.
pub fn pca_reconstruct(model: &Pca, data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let codes = model.transform(data)?;
    model.inverse(codes.view())
}
