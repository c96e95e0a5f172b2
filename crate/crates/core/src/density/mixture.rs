use std::hash::{DefaultHasher, Hasher};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diff::{logsumexp, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::Energy;

/// Equal-weight mixture of isotropic Gaussians sharing one variance.
///
/// As an [`Energy`] it is `-log p(x)` at `T = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureOfGaussians {
    means: Vec<Vec<f64>>,
    variance: f64,
}

impl MixtureOfGaussians {
    pub fn new(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let dim = means.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::invalid("mixture means must be non-empty and equally sized"));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid(format!("mixture variance must be positive, got {variance}")));
        }
        Ok(Self { means, variance })
    }

    /// Eight modes: four on the axes at radius 2√2 and four at (±2, ±2),
    /// each with covariance `(√2/4)·I`.
    pub fn mixture8() -> Self {
        let r = 2.0 * 2f64.sqrt();
        let means = vec![
            vec![r, 0.0],
            vec![-r, 0.0],
            vec![0.0, r],
            vec![0.0, -r],
            vec![2.0, 2.0],
            vec![2.0, -2.0],
            vec![-2.0, 2.0],
            vec![-2.0, -2.0],
        ];
        Self::new(means, 2f64.sqrt() / 4.0).expect("valid mixture")
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_norm(&self) -> f64 {
        (self.means.len() as f64).ln() + 0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI * self.variance).ln()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let logits: Vec<f64> = self
            .means
            .iter()
            .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * self.variance))
            .collect();
        logsumexp(&logits) - self.log_norm()
    }

    pub fn nearest_mean_distance(&self, x: &[f64]) -> f64 {
        self.means
            .iter()
            .map(|m| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    /// `n` draws as `[n, dim]` plus the component index of each row.
    pub fn sample_with_labels<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
        let sd = self.variance.sqrt();
        let mut data = Vec::with_capacity(n * self.dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.random_range(0..self.means.len());
            labels.push(k);
            for &m in &self.means[k] {
                let e: f64 = rng.sample(StandardNormal);
                data.push(m + sd * e);
            }
        }
        (Tensor::new(vec![n, self.dim()], data).expect("sized"), labels)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        self.sample_with_labels(n, rng).0
    }
}

impl Energy for MixtureOfGaussians {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn temperature(&self) -> f64 {
        1.0
    }

    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (d, k) = (self.dim(), self.means.len());
        let b = g.shape(x)[0];
        let mut mt = vec![0.0; d * k];
        for (j, m) in self.means.iter().enumerate() {
            for (i, &v) in m.iter().enumerate() {
                mt[i * k + j] = v;
            }
        }
        let mt = g.constant(Tensor::new(vec![d, k], mt)?);
        let xm = g.matmul(x, mt)?;
        let cross = g.scale(xm, -2.0)?;
        let sq = g.square(x)?;
        let sq = g.row_sum(sq)?;
        let sq = g.reshape(sq, &[b, 1])?;
        let ones = g.constant(Tensor::full(&[1, k], 1.0));
        let sq = g.matmul(sq, ones)?;
        let d2 = g.add(sq, cross)?;
        let mu2 = g.constant(Tensor::vector(self.means.iter().map(|m| m.iter().map(|v| v * v).sum()).collect()));
        let d2 = g.bias_add(d2, mu2)?;
        let logits = g.scale(d2, -0.5 / self.variance)?;
        let lse = g.row_logsumexp(logits)?;
        let neg = g.scale(lse, -1.0)?;
        let c = g.constant(Tensor::full(&[b], self.log_norm()));
        g.add(neg, c)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for m in &self.means {
            crate::model::hash_f64s(&mut h, m);
        }
        h.write_u64(self.variance.to_bits());
        h.finish()
    }
}
