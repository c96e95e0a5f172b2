use std::hash::{DefaultHasher, Hasher};

use nalgebra::DMatrix;

use super::{hash_f64s, Energy};
use crate::diff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Tied linear autoencoder: encoder `z = W x`, decoder `x_hat = Wᵀ z`, with
/// unscaled energy `||x - WᵀW x||²`. Its Gibbs density is a zero-mean
/// Gaussian with precision `2(I - WᵀW)²/T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    w: Tensor,
    temperature: f64,
}

/// Eigenvalues of WᵀW closer than this to 1 make the precision singular.
const UNIT_EIGEN_TOL: f64 = 1e-9;

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

impl LinearModel {
    /// `w` has shape `[D_z, D_x]`.
    pub fn new(w: Tensor, temperature: f64) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::invalid(format!("W must be a matrix, got shape {:?}", w.shape())));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self { w, temperature })
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn w_mut(&mut self) -> &mut Tensor {
        &mut self.w
    }

    pub fn latent_dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// Eigenvalues of WᵀW, ascending.
    pub fn gram_eigenvalues(&self) -> Vec<f64> {
        let w = to_matrix(&self.w);
        let mut ev: Vec<f64> = (w.transpose() * w).symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// No eigenvalue of WᵀW equals 1.
    pub fn is_valid(&self) -> bool {
        self.gram_eigenvalues()
            .iter()
            .all(|l| (l - 1.0).abs() > UNIT_EIGEN_TOL)
    }

    /// `E(x) = ||x - WᵀW x||²` per row, with `W` given as a graph node.
    pub fn energy_with(g: &mut Graph, x: NodeId, w: NodeId) -> Result<NodeId> {
        let wt = g.transpose(w)?;
        let z = g.matmul(x, wt)?;
        let xh = g.matmul(z, w)?;
        let d = g.sub(x, xh)?;
        let sq = g.square(d)?;
        g.row_sum(sq)
    }

    /// `2(I - WᵀW)²/T`.
    pub fn linear_precision(&self) -> Result<Tensor> {
        if !self.is_valid() {
            return Err(Error::invalid("WᵀW has an eigenvalue equal to 1; the density is improper"));
        }
        let w = to_matrix(&self.w);
        let d = w.ncols();
        let m = DMatrix::<f64>::identity(d, d) - w.transpose() * &w;
        Ok(from_matrix(&((&m * &m) * (2.0 / self.temperature))))
    }

    /// Inverse of [`LinearModel::linear_precision`].
    pub fn covariance(&self) -> Result<Tensor> {
        let p = to_matrix(&self.linear_precision()?);
        let inv = p
            .try_inverse()
            .ok_or_else(|| Error::invalid("precision matrix is singular"))?;
        Ok(from_matrix(&inv))
    }
}

impl Energy for LinearModel {
    fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.constant(self.w.clone());
        Self::energy_with(g, x, w)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_f64s(&mut h, self.w.data());
        hash_f64s(&mut h, [&self.temperature]);
        h.finish()
    }
}

/// Empirical second moment `Σ x xᵀ / N` of zero-centered data `[N, D]`.
pub fn linear_ml_covariance(data: &Tensor) -> Result<Tensor> {
    if data.rank() != 2 || data.rows() == 0 {
        return Err(Error::invalid("covariance needs a non-empty [N, D] data matrix"));
    }
    let (n, d) = (data.rows(), data.last_dim());
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d * d];
    for r in data.iter_rows() {
        for i in 0..d {
            mean[i] += r[i];
            for j in 0..d {
                second[i * d + j] += r[i] * r[j];
            }
        }
    }
    let scale = ((0..d).map(|i| second[i * d + i]).sum::<f64>() / n as f64).sqrt();
    let mean_norm = mean.iter().map(|m| (m / n as f64).powi(2)).sum::<f64>().sqrt();
    if mean_norm > 1e-6 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "data must be zero-centered (mean norm {mean_norm:e}, scale {scale:e})"
        )));
    }
    second.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::new(vec![d, d], second)
}
