//! Langevin Monte Carlo in input and latent space, Metropolis-Hastings
//! correction, and the negative-sample initialization strategies.

mod init;

pub use init::{
    cd_init, latent_starts, omi_generate, omi_negative_sample, pcd_init, GeneratedStages, InitStrategy, NegativeSampler,
    OmiOutput, ReplayBuffer, SampleStats,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, FieldError, Result};
use crate::model::{AutoencoderModel, Energy, LatentSpace, OnManifold};

/// Numerator of the annealed noise schedule `0.05 / (1 + step)`.
pub const ANNEAL_BASE: f64 = 0.05;

/// Knobs of one Langevin chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub step_size: f64,
    pub noise: f64,
    pub n_steps: usize,
    /// Elementwise clamp on `∇E`, applied before the `λ/T` scaling.
    #[serde(default)]
    pub clip_grad: Option<f64>,
    #[serde(default)]
    pub anneal_noise: bool,
    #[serde(default)]
    pub mh_reject: bool,
}

impl ChainParams {
    /// Problems keyed by bare field name (`step_size`, `noise`, ...).
    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if !self.step_size.is_finite() || self.step_size < 0.0 || (self.n_steps > 0 && self.step_size == 0.0) {
            errs.push(FieldError::new("step_size", format!("must be > 0, got {}", self.step_size)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push(FieldError::new("noise", format!("must be >= 0, got {}", self.noise)));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0 && c.is_finite()) {
                errs.push(FieldError::new("clip_grad", format!("must be > 0, got {c}")));
            }
        }
        if self.mh_reject && self.noise == 0.0 && !self.anneal_noise && self.n_steps > 0 {
            errs.push(FieldError::new(
                "mh_reject",
                "needs noise > 0: the proposal density is degenerate",
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.field_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Same chain with its length multiplied (generation uses 8x latent chains).
    pub fn lengthened(&self, factor: usize) -> Self {
        Self {
            n_steps: self.n_steps * factor,
            ..self.clone()
        }
    }
}

/// Standard deviation of the injected noise at `step`.
pub fn noise_scale(params: &ChainParams, step: usize) -> f64 {
    if params.anneal_noise {
        ANNEAL_BASE / (1.0 + step as f64)
    } else {
        params.noise
    }
}

/// Initial-state distributions `p_0(x)` and `q_0(z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDistribution {
    StandardNormal { dim: usize },
    /// Gaussian draw divided by its norm.
    UniformSphere { dim: usize },
    UniformBox { dim: usize, lo: f64, hi: f64 },
}

impl NoiseDistribution {
    /// `q_0` for a latent space: N(0, I) on R^d, uniform on the sphere.
    pub fn for_latent(latent: LatentSpace) -> Self {
        match latent {
            LatentSpace::Euclidean { dim } => NoiseDistribution::StandardNormal { dim },
            LatentSpace::Hypersphere { dim } => NoiseDistribution::UniformSphere { dim },
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            NoiseDistribution::StandardNormal { dim }
            | NoiseDistribution::UniformSphere { dim }
            | NoiseDistribution::UniformBox { dim, .. } => dim,
        }
    }

    /// Appends one draw to `out`.
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match *self {
            NoiseDistribution::StandardNormal { dim } => {
                out.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            }
            NoiseDistribution::UniformSphere { dim } => loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 1e-12 {
                    out.extend(v.iter().map(|a| a / n));
                    break;
                }
            },
            NoiseDistribution::UniformBox { dim, lo, hi } => {
                out.extend((0..dim).map(|_| rng.random_range(lo..hi)));
            }
        }
    }

    /// `n` independent draws as `[n, dim]`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let mut v = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            self.draw_into(rng, &mut v);
        }
        Tensor::new(vec![n, self.dim()], v).expect("sized")
    }
}

/// One draw as a `[dim]` vector.
pub fn sample_noise<R: Rng + ?Sized>(dist: &NoiseDistribution, rng: &mut R) -> Tensor {
    let mut v = Vec::with_capacity(dist.dim());
    dist.draw_into(rng, &mut v);
    Tensor::vector(v)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn clip(g: f64, params: &ChainParams) -> f64 {
    match params.clip_grad {
        Some(c) => g.clamp(-c, c),
        None => g,
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::ChainDiverged { step },
        other => other,
    }
}

fn energy_and_grad_at<E: Energy + ?Sized>(energy: &E, x: &Tensor, step: usize) -> Result<(Vec<f64>, Tensor)> {
    let (e, g) = energy.energy_and_grad(x).map_err(|err| diverged(step, err))?;
    if !g.is_finite() {
        return Err(Error::ChainDiverged { step });
    }
    Ok((e, g))
}

/// `x - (λ/T)·clip(g) + σ_eff·ε` given the gradient at `x`.
fn propose<R: Rng + ?Sized>(
    x: &Tensor,
    grad: &Tensor,
    params: &ChainParams,
    temperature: f64,
    step: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let coef = params.step_size / temperature;
    let sigma = noise_scale(params, step);
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xv, &gv)| {
            let noise = if sigma > 0.0 { sigma * gaussian(rng) } else { 0.0 };
            xv - coef * clip(gv, params) + noise
        })
        .collect();
    let next = Tensor::new(x.shape().to_vec(), data)?;
    if !next.is_finite() {
        return Err(Error::ChainDiverged { step });
    }
    Ok(next)
}

/// One unadjusted Langevin step on `x: [B, D]` (or `[D]`).
pub fn lmc_step_x<E: Energy + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    x: &Tensor,
    params: &ChainParams,
    step_index: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let (_, g) = energy_and_grad_at(energy, x, step_index)?;
    propose(x, &g, params, energy.temperature(), step_index, rng)
}

/// Projects every row onto the unit sphere.
pub fn project_rows(z: &mut Tensor) -> Result<()> {
    let d = z.last_dim();
    for row in z.data_mut().chunks_mut(d.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < crate::diff::graph::MIN_PROJECTION_NORM {
            return Err(Error::DegenerateProjection { norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// One Langevin step against `H(z) = E(f_d(z))` at `T_z = T`, followed by
/// projection when the latent space is a sphere.
pub fn lmc_step_z<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    z: &Tensor,
    params: &ChainParams,
    step_index: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let mut next = lmc_step_x(&OnManifold(model), z, params, step_index, rng)?;
    if model.latent().is_sphere() {
        project_rows(&mut next)?;
    }
    Ok(next)
}

/// Runs the latent chain for `params.n_steps` steps.
pub fn run_z_chain<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    z0: Tensor,
    params: &ChainParams,
    rng: &mut R,
) -> Result<Tensor> {
    let mut z = z0;
    for step in 0..params.n_steps {
        z = lmc_step_z(model, &z, params, step, rng)?;
    }
    Ok(z)
}

/// `log q(to | from)` up to a constant, for the Gaussian proposal with drift
/// `-(λ/T)·clip(∇E(from))` and standard deviation `sigma`.
fn log_proposal(to: &[f64], from: &[f64], grad_from: &[f64], coef: f64, sigma: f64, params: &ChainParams) -> f64 {
    let sq: f64 = to
        .iter()
        .zip(from)
        .zip(grad_from)
        .map(|((t, f), g)| {
            let r = t - (f - coef * clip(*g, params));
            r * r
        })
        .sum();
    -sq / (2.0 * sigma * sigma)
}

#[allow(clippy::too_many_arguments)]
fn mh_log_ratios(
    temperature: f64,
    x: &Tensor,
    e: &[f64],
    g: &Tensor,
    xp: &Tensor,
    ep: &[f64],
    gp: &Tensor,
    params: &ChainParams,
    step: usize,
) -> Result<Vec<f64>> {
    let sigma = noise_scale(params, step);
    if sigma <= 0.0 {
        return Err(Error::invalid(
            "Metropolis-Hastings needs a positive noise scale; the proposal density is degenerate",
        ));
    }
    let coef = params.step_size / temperature;
    let rows = x.rows();
    Ok((0..rows)
        .map(|i| {
            let fwd = log_proposal(xp.row(i), x.row(i), g.row(i), coef, sigma, params);
            let bwd = log_proposal(x.row(i), xp.row(i), gp.row(i), coef, sigma, params);
            -(ep[i] - e[i]) / temperature + bwd - fwd
        })
        .collect())
}

/// Per-row MALA log acceptance ratio `log[p(x')q(x|x') / (p(x)q(x'|x))]`.
pub fn mh_log_acceptance<E: Energy + ?Sized>(
    energy: &E,
    x: &Tensor,
    x_proposed: &Tensor,
    params: &ChainParams,
    step_index: usize,
) -> Result<Vec<f64>> {
    let dim = energy.input_dim();
    let x = crate::model::as_batch(x, dim)?;
    let xp = crate::model::as_batch(x_proposed, dim)?;
    let (e, g) = energy_and_grad_at(energy, &x, step_index)?;
    let (ep, gp) = energy_and_grad_at(energy, &xp, step_index)?;
    mh_log_ratios(energy.temperature(), &x, &e, &g, &xp, &ep, &gp, params, step_index)
}

/// Per-row accept/reject decisions: accept with probability `min(1, ratio)`.
pub fn mh_accept<E: Energy + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    x: &Tensor,
    x_proposed: &Tensor,
    params: &ChainParams,
    step_index: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let ratios = mh_log_acceptance(energy, x, x_proposed, params, step_index)?;
    Ok(ratios.iter().map(|&r| accept(r, rng)).collect())
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    log_ratio >= 0.0 || u < log_ratio.exp()
}

/// Result of a full input-space chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    pub x: Tensor,
    /// Fraction of accepted proposals (1 when MH is off).
    pub accept_rate: f64,
}

/// Runs `params.n_steps` input-space steps with optional per-step MH
/// correction, reusing the proposal's energy and gradient on acceptance.
pub fn run_x_chain<E: Energy + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    x0: Tensor,
    params: &ChainParams,
    rng: &mut R,
) -> Result<ChainOutput> {
    let t = energy.temperature();
    let mut x = crate::model::as_batch(&x0, energy.input_dim())?;
    if params.n_steps == 0 {
        return Ok(ChainOutput { x, accept_rate: 1.0 });
    }
    let rows = x.rows();
    let d = x.last_dim();
    let (mut e, mut g) = energy_and_grad_at(energy, &x, 0)?;
    let mut accepted = 0usize;
    for step in 0..params.n_steps {
        let xp = propose(&x, &g, params, t, step, rng)?;
        let (ep, gp) = energy_and_grad_at(energy, &xp, step)?;
        if !params.mh_reject {
            x = xp;
            e = ep;
            g = gp;
            accepted += rows;
            continue;
        }
        let ratios = mh_log_ratios(t, &x, &e, &g, &xp, &ep, &gp, params, step)?;
        for (i, r) in ratios.iter().enumerate() {
            if accept(*r, rng) {
                accepted += 1;
                x.row_mut(i).copy_from_slice(xp.row(i));
                g.row_mut(i).copy_from_slice(gp.row(i));
                e[i] = ep[i];
            }
        }
    }
    debug_assert_eq!(x.last_dim(), d);
    Ok(ChainOutput {
        x,
        accept_rate: accepted as f64 / (rows * params.n_steps) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::analytic::Quadratic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(step: f64, noise: f64) -> ChainParams {
        ChainParams {
            step_size: step,
            noise,
            n_steps: 1,
            clip_grad: None,
            anneal_noise: false,
            mh_reject: false,
        }
    }

    fn x_squared() -> Quadratic {
        Quadratic {
            dim: 1,
            scale: 1.0,
            temperature: 1.0,
        }
    }

    #[test]
    fn single_step_on_parabola() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = lmc_step_x(&x_squared(), &Tensor::vector(vec![1.0]), &params(0.005, 0.0), 0, &mut rng).unwrap();
        assert!((x.item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_and_noise_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = crate::model::analytic::Constant {
            dim: 2,
            value: 1.0,
            temperature: 1.0,
        };
        let x0 = Tensor::from_rows(&[[0.3, -0.4]]).unwrap();
        let x = lmc_step_x(&e, &x0, &params(0.1, 0.0), 0, &mut rng).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn clipping_precedes_scaling() {
        // E(x) = 5 x0 - 5 x1, so the gradient is (5, -5) everywhere.
        struct Linear;
        impl Energy for Linear {
            fn input_dim(&self) -> usize {
                2
            }
            fn temperature(&self) -> f64 {
                1.0
            }
            fn energy_node(&self, g: &mut crate::diff::Graph, x: crate::diff::NodeId) -> Result<crate::diff::NodeId> {
                let w = g.constant(Tensor::from_rows(&[[5.0], [-5.0]]).unwrap());
                let y = g.matmul(x, w)?;
                g.reshape(y, &[g.shape(y)[0]])
            }
            fn fingerprint(&self) -> u64 {
                0
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = params(1.0, 0.0);
        p.clip_grad = Some(0.01);
        let x = lmc_step_x(&Linear, &Tensor::vector(vec![0.0, 0.0]), &p, 0, &mut rng).unwrap();
        assert_eq!(x.data(), &[-0.01, 0.01]);
    }

    #[test]
    fn anneal_schedule_is_exact() {
        let mut p = params(0.1, 0.7);
        assert_eq!(noise_scale(&p, 3), 0.7);
        p.anneal_noise = true;
        for s in 0..50 {
            assert_eq!(noise_scale(&p, s), 0.05 / (1.0 + s as f64));
        }
    }

    #[test]
    fn identical_proposal_is_always_accepted() {
        let q = Quadratic::standard_normal(2);
        let x = Tensor::from_rows(&[[0.5, -1.0]]).unwrap();
        let mut p = params(0.1, 0.3);
        p.mh_reject = true;
        let r = mh_log_acceptance(&q, &x, &x, &p, 0).unwrap();
        assert_eq!(r, vec![0.0]);
    }

    #[test]
    fn huge_energy_proposal_is_rejected() {
        // Gradients vanish at both points, so only the energy gap matters.
        let dw = crate::model::analytic::DoubleWell {
            barrier: 1e6,
            temperature: 1.0,
        };
        let mut p = params(0.1, 0.3);
        p.mh_reject = true;
        let (x, xp) = (Tensor::vector(vec![1.0]), Tensor::vector(vec![0.0]));
        let r = mh_log_acceptance(&dw, &x, &xp, &p, 0).unwrap();
        assert!((r[0] + 1e6).abs() < 1e-6, "{r:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mh_accept(&dw, &x, &xp, &p, 0, &mut rng).unwrap(), vec![false]);
    }

    #[test]
    fn mh_without_noise_is_an_error() {
        let q = Quadratic::standard_normal(1);
        let mut p = params(0.1, 0.0);
        p.mh_reject = true;
        assert!(mh_log_acceptance(&q, &Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.1]), &p, 0).is_err());
        assert!(p.validate().is_err());
    }

    #[test]
    fn sphere_samples_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = NoiseDistribution::UniformSphere { dim: 3 }.sample(100, &mut rng);
        for r in s.iter_rows() {
            assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        let one = sample_noise(&NoiseDistribution::UniformSphere { dim: 3 }, &mut rng);
        assert!((one.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_name_the_field() {
        let mut p = params(-0.1, 0.1);
        p.n_steps = 3;
        match p.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs[0].field, "step_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn latent_step_with_identity_decoder_matches_input_step() {
        let m = AutoencoderModel::identity(2);
        let z = Tensor::from_rows(&[[0.2, 0.7]]).unwrap();
        let p = params(0.05, 0.1);
        let a = lmc_step_z(&m, &z, &p, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = lmc_step_x(&m, &z, &p, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chains_are_deterministic_per_seed() {
        let q = Quadratic::standard_normal(2);
        let mut p = params(0.05, 0.3);
        p.n_steps = 20;
        p.mh_reject = true;
        let x0 = Tensor::zeros(&[4, 2]);
        let a = run_x_chain(&q, x0.clone(), &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = run_x_chain(&q, x0, &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }
}
