//! Small numeric helpers shared by preprocessing and evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Rows of a matrix as owned vectors.
pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Selects rows by index, in the given order.
pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n)
}

/// Fitted principal component analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One component per entry, each of length `mean.len()`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl Pca {
    /// Fits `k` components on the rows of `x`.
    ///
    /// Components are eigenvectors of the covariance sorted by eigenvalue,
    /// largest first; equal eigenvalues are ordered by the position of the
    /// vector's largest-magnitude entry. Each vector's largest-magnitude
    /// entry is made positive.
    pub fn fit(x: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 {
            return Err(Error::invalid("cannot fit PCA on zero rows"));
        }
        if k > d {
            return Err(Error::invalid(format!("{k} components requested from {d} columns")));
        }
        let mean = column_means(x);
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = centered.transpose() * &centered / denom;
        // exact symmetry keeps the eigen solver on its symmetric path
        cov = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov);

        let mut pairs: Vec<(f64, Vec<f64>, usize)> = (0..d)
            .map(|i| {
                let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                let lead = argmax_abs(&v);
                if v[lead] < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                (eig.eigenvalues[i].max(0.0), v, lead)
            })
            .collect();
        let scale = pairs.iter().map(|p| p.0).fold(0.0, f64::max).max(1.0);
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut start = 0;
        while start < pairs.len() {
            let mut end = start + 1;
            while end < pairs.len() && pairs[end - 1].0 - pairs[end].0 <= 1e-12 * scale {
                end += 1;
            }
            pairs[start..end].sort_by_key(|p| p.2);
            start = end;
        }
        let total: f64 = pairs.iter().map(|p| p.0).sum();
        let top = &pairs[..k];
        Ok(Self {
            mean: mean.iter().copied().collect(),
            components: top.iter().map(|p| p.1.clone()).collect(),
            explained_variance: top.iter().map(|p| p.0).collect(),
            explained_variance_ratio: top
                .iter()
                .map(|p| if total > 0.0 { p.0 / total } else { 0.0 })
                .collect(),
        })
    }

    fn component_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, self.components.len(), |i, j| self.components[j][i])
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        let mean = DVector::from_column_slice(&self.mean);
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        centered * self.component_matrix()
    }

    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z * self.component_matrix().transpose();
        let mean = DVector::from_column_slice(&self.mean);
        for mut row in x.row_iter_mut() {
            row += mean.transpose();
        }
        x
    }
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}
