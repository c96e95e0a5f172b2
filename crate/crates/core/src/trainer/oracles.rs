//! Grid-exact maximum-likelihood references for low-dimensional models.
//!
//! On a grid the partition function is a finite sum, so the exact
//! log-likelihood gradient can be written down and compared against the
//! surrogate's positive/negative decomposition.

use rand::Rng;
use rand_distr::StandardNormal;

use super::adam::AdamState;
use crate::density::GridSpec;
use crate::diff::{logsumexp, Graph, LeafKind, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{AutoencoderModel, Energy, LinearModel};

/// Parameter gradients from the two routes to the grid log-likelihood.
#[derive(Clone, Debug)]
pub struct GradientPair {
    /// `mean ∇E(x⁺)/T − Σ_c softmax(−E_c/T) ∇E(c)/T`.
    pub estimator: Vec<Tensor>,
    /// Autodiff of `mean E(x⁺)/T + log Σ_c exp(−E_c/T)·Δ`.
    pub exact: Vec<Tensor>,
}

impl GradientPair {
    /// Largest elementwise difference relative to the largest exact entry.
    pub fn relative_error(&self) -> f64 {
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (a, b) in self.estimator.iter().zip(&self.exact) {
            diff = diff.max(a.max_abs_diff(b));
            scale = scale.max(b.data().iter().fold(0.0, |m, v| m.max(v.abs())));
        }
        diff / (scale + 1e-12)
    }
}

/// Both gradient routes for the negative log-likelihood of `data` under a
/// model normalized on `grid`. The temperature is held fixed.
pub fn ml_gradient_pair(model: &AutoencoderModel, data: &Tensor, grid: &GridSpec) -> Result<GradientPair> {
    grid.validate()?;
    let t = model.temperature();
    let cells = grid.midpoints();

    let mut g = Graph::new();
    let b = model.bind(&mut g, LeafKind::Param);
    let xp = g.constant(data.clone());
    let xc = g.constant(cells.clone());
    let (ep, _) = model.energy_nodes(&mut g, &b, xp)?;
    let (ec, _) = model.energy_nodes(&mut g, &b, xc)?;
    let pos = g.mean(ep)?;
    let pos = g.scale(pos, 1.0 / t)?;

    let logits: Vec<f64> = g.value(ec).data().iter().map(|e| -e / t).collect();
    let lse = logsumexp(&logits);
    let weights = Tensor::vector(logits.iter().map(|l| (l - lse).exp()).collect());
    let w = g.constant(weights);
    let weighted = g.mul(ec, w)?;
    let neg = g.sum(weighted)?;
    let neg = g.scale(neg, 1.0 / t)?;
    let est = g.sub(pos, neg)?;

    let n = cells.rows();
    let scaled = g.scale(ec, -1.0 / t)?;
    let row = g.reshape(scaled, &[1, n])?;
    let log_z = g.row_logsumexp(row)?;
    let log_z = g.sum(log_z)?;
    let log_area = g.constant(Tensor::scalar(grid.cell_volume().ln()));
    let log_z = g.add(log_z, log_area)?;
    let nll = g.add(pos, log_z)?;

    let collect = |loss: NodeId| -> Result<Vec<Tensor>> {
        let mut grads = g.backward(loss)?;
        Ok(b.all().map(|id| grads.take(id).expect("parameter leaf")).collect())
    };
    Ok(GradientPair {
        estimator: collect(est)?,
        exact: collect(nll)?,
    })
}

/// Settings for [`fit_linear_grid_ml`].
#[derive(Clone, Debug)]
pub struct LinearFit {
    pub latent_dim: usize,
    pub grid: GridSpec,
    pub steps: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
}

impl Default for LinearFit {
    fn default() -> Self {
        Self {
            latent_dim: 3,
            grid: GridSpec::square(2, -8.0, 8.0, 200),
            steps: 1500,
            learning_rate: 0.01,
            init_scale: 0.1,
        }
    }
}

/// Fits a linear NAE at `T = 1` by exact maximum likelihood, with the
/// partition function taken as a midpoint sum over `fit.grid`.
pub fn fit_linear_grid_ml<R: Rng + ?Sized>(data: &Tensor, fit: &LinearFit, rng: &mut R) -> Result<(LinearModel, f64)> {
    let d = data.last_dim();
    if fit.grid.dim() != d {
        return Err(Error::invalid(format!("grid has dim {}, data has {d}", fit.grid.dim())));
    }
    fit.grid.validate()?;
    let w0: Vec<f64> = (0..fit.latent_dim * d)
        .map(|_| fit.init_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut w = Tensor::new(vec![fit.latent_dim, d], w0)?;
    let cells = fit.grid.midpoints();
    let n = cells.rows();
    let log_area = fit.grid.cell_volume().ln();
    let mut adam = AdamState::new([&w]);
    let mut nll = f64::NAN;
    for _ in 0..fit.steps {
        let mut g = Graph::new();
        let wn = g.param(w.clone());
        let xp = g.constant(data.clone());
        let xc = g.constant(cells.clone());
        let ep = LinearModel::energy_with(&mut g, xp, wn)?;
        let pos = g.mean(ep)?;
        let ec = LinearModel::energy_with(&mut g, xc, wn)?;
        let neg = g.scale(ec, -1.0)?;
        let row = g.reshape(neg, &[1, n])?;
        let lz = g.row_logsumexp(row)?;
        let lz = g.sum(lz)?;
        let loss = g.add(pos, lz)?;
        nll = g.value(loss).item() + log_area;
        let grad = g.backward(loss)?.take(wn).expect("param");
        adam.update(&mut [&mut w], &[grad], fit.learning_rate)?;
    }
    Ok((LinearModel::new(w, 1.0)?, nll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_ml_covariance, ArchitectureSpec, LatentSpace, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_1d(rng: &mut ChaCha8Rng) -> AutoencoderModel {
        let spec = ModelSpec {
            input_dim: 1,
            architecture: ArchitectureSpec::Mlp {
                hidden: vec![8],
                activation: crate::model::Activation::Sigmoid,
            },
            latent: LatentSpace::Euclidean { dim: 1 },
            output_activation: None,
            temperature: 0.7,
            temperature_trainable: false,
            recon_scale: 1.0,
        };
        AutoencoderModel::new(spec, rng).unwrap()
    }

    #[test]
    fn estimator_equals_exact_gradient_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = tiny_1d(&mut rng);
        assert!(model.param_count() <= 200);
        let data = Tensor::new(vec![16, 1], (0..16).map(|i| -2.0 + 0.25 * i as f64).collect()).unwrap();
        let pair = ml_gradient_pair(&model, &data, &GridSpec::square(1, -4.0, 4.0, 81)).unwrap();
        assert!(pair.relative_error() < 1e-8, "{}", pair.relative_error());
    }

    #[test]
    fn linear_grid_fit_recovers_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = [[2f64.sqrt(), 0.0], [0.6 / 2f64.sqrt(), (1.0 - 0.18f64).sqrt()]];
        let mut xs = Vec::new();
        for _ in 0..4000 {
            let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            xs.push(l[0][0] * e[0]);
            xs.push(l[1][0] * e[0] + l[1][1] * e[1]);
        }
        let mut data = Tensor::new(vec![4000, 2], xs).unwrap();
        let mean = [0, 1].map(|k| data.iter_rows().map(|r| r[k]).sum::<f64>() / 4000.0);
        for r in 0..4000 {
            let row = data.row_mut(r);
            row[0] -= mean[0];
            row[1] -= mean[1];
        }
        let fit = LinearFit {
            grid: GridSpec::square(2, -8.0, 8.0, 96),
            steps: 800,
            ..LinearFit::default()
        };
        let (lin, _) = fit_linear_grid_ml(&data, &fit, &mut rng).unwrap();
        let got = lin.covariance().unwrap();
        let want = linear_ml_covariance(&data).unwrap();
        let rel = (got.max_abs_diff(&want)) / want.norm();
        assert!(rel < 0.05, "{got:?} vs {want:?}");
    }
}
