//! Filling masked-out modality rows: zeros, warm-set column means, or a
//! ridge-regularized cross-modal linear map fitted on paired warm items.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::{AvailabilityMask, ModalityFeatureBank};
use crate::error::{Error, Result};

const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImputeStrategy {
    Zero,
    #[default]
    Mean,
    Map,
}

impl ImputeStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            ImputeStrategy::Zero => "zero",
            ImputeStrategy::Mean => "mean",
            ImputeStrategy::Map => "map",
        }
    }
}

/// Linear maps between every ordered pair of modalities, fitted by ridge
/// least squares on items where both modalities are available.
#[derive(Debug, Clone)]
pub struct CrossModalMap {
    maps: HashMap<(usize, usize), Array2<f64>>,
}

impl CrossModalMap {
    /// Map matrix for `src -> dst`, shape `d_src x d_dst`.
    pub fn matrix(&self, src: usize, dst: usize) -> Option<&Array2<f64>> {
        self.maps.get(&(src, dst))
    }

    /// Predict the `dst` row from a `src` row.
    pub fn apply(&self, src: usize, dst: usize, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let map = self.maps.get(&(src, dst)).ok_or_else(|| {
            Error::Impute(format!("no fitted map for modality pair {src}->{dst}"))
        })?;
        Ok(x.dot(map))
    }
}

/// Fit all ordered cross-modal maps on the reference items. Each map
/// minimizes the mean squared reconstruction error over items with both
/// modalities available, with a 1e-6 ridge on the Gram diagonal.
pub fn fit_cross_modal_map(
    features: &ModalityFeatureBank,
    mask: &AvailabilityMask,
) -> Result<CrossModalMap> {
    let m_count = features.n_modalities();
    let mut maps = HashMap::new();
    for src in 0..m_count {
        for dst in 0..m_count {
            if src == dst {
                continue;
            }
            let paired: Vec<usize> = (0..features.n_items())
                .filter(|&j| {
                    mask.is_available(j as u32, src) && mask.is_available(j as u32, dst)
                })
                .collect();
            let d_src = features.matrix(src).ncols();
            if paired.len() < d_src {
                return Err(Error::Fit(format!(
                    "modality pair {src}->{dst} has {} paired items, need >= {d_src}",
                    paired.len()
                )));
            }
            let xs = gather_rows(features.matrix(src), &paired);
            let xd = gather_rows(features.matrix(dst), &paired);
            maps.insert((src, dst), ridge_least_squares(&xs, &xd)?);
        }
    }
    Ok(CrossModalMap { maps })
}

/// Replace masked-out rows. Reference statistics (column means, fitted
/// maps) come from `train_ref` only; available rows pass through
/// unchanged.
pub fn impute(
    features: &ModalityFeatureBank,
    mask: &AvailabilityMask,
    strategy: ImputeStrategy,
    train_ref: (&ModalityFeatureBank, &AvailabilityMask),
) -> Result<ModalityFeatureBank> {
    let (ref_bank, ref_mask) = train_ref;
    if ref_bank.n_modalities() != features.n_modalities() {
        return Err(Error::Dimension("reference bank modality count mismatch".into()));
    }
    let m_count = features.n_modalities();
    let means = match strategy {
        ImputeStrategy::Mean => Some(column_means(ref_bank, ref_mask)?),
        _ => None,
    };
    let maps = match strategy {
        ImputeStrategy::Map => Some(fit_cross_modal_map(ref_bank, ref_mask)?),
        _ => None,
    };

    let mut mats: Vec<Array2<f64>> = features.matrices().to_vec();
    for j in 0..features.n_items() as u32 {
        for m in 0..m_count {
            if mask.is_available(j, m) {
                continue;
            }
            let replacement = match strategy {
                ImputeStrategy::Zero => Array1::zeros(features.matrix(m).ncols()),
                ImputeStrategy::Mean => means.as_ref().unwrap()[m].clone(),
                ImputeStrategy::Map => {
                    let src = (0..m_count).find(|&s| mask.is_available(j, s)).ok_or_else(
                        || Error::Impute(format!("item {j} has no source modality")),
                    )?;
                    let x = features.matrix(src).row(j as usize);
                    maps.as_ref().unwrap().apply(src, m, x)?
                }
            };
            mats[m].row_mut(j as usize).assign(&replacement);
        }
    }
    ModalityFeatureBank::new(mats)
}

/// Per-modality column mean over reference rows with that modality
/// available.
fn column_means(
    ref_bank: &ModalityFeatureBank,
    ref_mask: &AvailabilityMask,
) -> Result<Vec<Array1<f64>>> {
    let mut means = Vec::with_capacity(ref_bank.n_modalities());
    for m in 0..ref_bank.n_modalities() {
        let mat = ref_bank.matrix(m);
        let mut acc = Array1::zeros(mat.ncols());
        let mut count = 0usize;
        for j in 0..ref_bank.n_items() {
            if ref_mask.is_available(j as u32, m) {
                acc += &mat.row(j);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Impute(format!(
                "no reference rows available for modality {m}"
            )));
        }
        means.push(acc / count as f64);
    }
    Ok(means)
}

fn gather_rows(mat: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), mat.ncols()));
    for (r, &j) in rows.iter().enumerate() {
        out.row_mut(r).assign(&mat.row(j));
    }
    out
}

/// Least squares through the normal equations `(Xs'Xs + RIDGE I) L =
/// Xs'Xd` with a Cholesky factor. The ridge only conditions the solve; it
/// is far below the data scale.
fn ridge_least_squares(xs: &Array2<f64>, xd: &Array2<f64>) -> Result<Array2<f64>> {
    let mut gram = xs.t().dot(xs);
    for i in 0..gram.nrows() {
        gram[(i, i)] += RIDGE;
    }
    let rhs = xs.t().dot(xd);
    let chol = cholesky(gram.view())?;
    let mut out = Array2::zeros(rhs.raw_dim());
    for (c, col) in rhs.columns().into_iter().enumerate() {
        let y = forward_substitute(&chol, col);
        let x = back_substitute(&chol, y.view());
        out.column_mut(c).assign(&x);
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix.
fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Fit(
                        "normal-equation matrix is not positive definite".into(),
                    ));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

fn forward_substitute(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[(i, k)] * y[k];
        }
        y[i] = sum / l[(i, i)];
    }
    y
}

fn back_substitute(l: &Array2<f64>, y: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[(k, i)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}
