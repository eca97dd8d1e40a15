//! Principal components by power iteration with deflation.

use super::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits the top `k` components of the sample covariance of `rows`.
    pub fn fit(rows: &[Vec<f64>], k: usize, tol: f64, max_iter: usize) -> Result<Self> {
        let data = Matrix::from_rows(rows)?;
        let (n, d) = data.shape();
        if n < 2 {
            return Err(Error::invalid("PCA needs at least two rows"));
        }
        if k == 0 || k > d {
            return Err(Error::invalid(format!("cannot extract {k} components from {d} dims")));
        }
        let mut mean = vec![0.0; d];
        for r in data.iter_rows() {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for r in data.iter_rows() {
            for i in 0..d {
                let ci = r[i] - mean[i];
                for j in 0..d {
                    cov[(i, j)] += ci * (r[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }

        let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut eigenvalues = Vec::with_capacity(k);
        for c in 0..k {
            // deterministic start that is not orthogonal to any axis
            let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i + c) as f64 * 0.1).collect();
            normalize(&mut v);
            let mut lambda = 0.0;
            for _ in 0..max_iter {
                let mut w = mat_vec(&cov, &v);
                for prev in &components {
                    let dot = dot(&w, prev);
                    w.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
                }
                let norm = normalize(&mut w);
                if norm == 0.0 {
                    lambda = 0.0;
                    break;
                }
                let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                v = w;
                lambda = norm;
                if delta < tol {
                    break;
                }
            }
            // deflate
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] -= lambda * v[i] * v[j];
                }
            }
            components.push(v);
            eigenvalues.push(lambda);
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        self.components.iter().map(|c| dot(&centered, c)).collect()
    }
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|r| dot(r, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}
