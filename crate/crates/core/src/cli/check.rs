//! Fast diagnostic suites behind `nae check`. Each returns a named pass/fail
//! outcome; together they run in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::density::GridSpec;
use crate::diff::{finite_difference_check, LeafKind, Tensor};
use crate::error::Result;
use crate::eval::{auc, ScoredDataset};
use crate::model::analytic::Quadratic;
use crate::model::{Activation, ArchitectureSpec, AutoencoderModel, Energy, LatentSpace, LayerSpec, LinearModel, ModelSpec, Network};
use crate::sampler::{latent_starts, noise_scale, pcd_init, run_x_chain, ChainParams, NoiseDistribution, ReplayBuffer};
use crate::trainer::oracles::ml_gradient_pair;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    match f() {
        Ok((passed, detail)) => outcome(name, passed, detail),
        Err(e) => outcome(name, false, format!("error: {e}")),
    }
}

/// Runs every suite in order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        run("finite-difference", finite_differences),
        run("grid-gradient-identity", grid_identity),
        run("linear-precision-identity", linear_identity),
        run("sampler-moments", sampler_moments),
        run("auc-oracle", auc_oracle),
        run("stochastic-controls", stochastic_controls),
    ]
}

fn random_mlp(rng: &mut ChaCha8Rng) -> Result<(Network, usize)> {
    let d_in = rng.random_range(1..6);
    let depth = rng.random_range(1..4);
    let mut specs = Vec::new();
    let mut cur = d_in;
    for _ in 0..depth {
        let w = rng.random_range(2..17);
        specs.push(LayerSpec::Fc { input: cur, output: w });
        specs.push(match rng.random_range(0..3) {
            0 => LayerSpec::Sigmoid,
            1 => LayerSpec::LeakyRelu,
            _ => LayerSpec::Relu,
        });
        cur = w;
    }
    specs.push(LayerSpec::Fc { input: cur, output: 1 });
    Ok((Network::from_specs(&specs, d_in, 1, rng)?, d_in))
}

/// Max relative error of autodiff against central differences on random MLPs.
pub fn finite_differences() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (net, d_in) = random_mlp(&mut rng)?;
        for _ in 0..5 {
            let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.5..1.5)).collect();
            let f = |g: &mut crate::diff::Graph, x: crate::diff::NodeId| {
                let ids = net.bind(g, LeafKind::Constant);
                let y = net.forward(g, &ids, x)?;
                g.sum(y)
            };
            worst = worst.max(finite_difference_check(f, &Tensor::new(vec![1, d_in], x)?, 1e-5)?);
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} (limit 1e-4)")))
}

/// Two-term ML gradient estimator against autodiff of the grid log-likelihood.
pub fn grid_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let spec = ModelSpec {
        input_dim: 1,
        architecture: ArchitectureSpec::Mlp {
            hidden: vec![8],
            activation: Activation::Sigmoid,
        },
        latent: LatentSpace::Euclidean { dim: 1 },
        output_activation: None,
        temperature: 0.8,
        temperature_trainable: false,
        recon_scale: 1.0,
    };
    let model = AutoencoderModel::new(spec, &mut rng)?;
    let data = Tensor::new(vec![32, 1], (0..32).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())?;
    let pair = ml_gradient_pair(&model, &data, &GridSpec::square(1, -4.0, 4.0, 81))?;
    let worst = pair
        .estimator
        .iter()
        .zip(&pair.exact)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    Ok((worst < 1e-8, format!("max abs difference {worst:.2e} (limit 1e-8)")))
}

/// `E(x)/T` against `xᵀ P x / 2` for random linear models.
pub fn linear_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (dz, dx) = (rng.random_range(1..4), rng.random_range(2..5));
        let w: Vec<f64> = (0..dz * dx).map(|_| 0.4 * rng.sample::<f64, _>(StandardNormal)).collect();
        let t = rng.random_range(0.3..2.0);
        let lin = LinearModel::new(Tensor::new(vec![dz, dx], w)?, t)?;
        if !lin.is_valid() {
            continue;
        }
        let p = lin.linear_precision()?;
        let x: Vec<f64> = (0..dx).map(|_| rng.sample(StandardNormal)).collect();
        let e = lin.energies(&Tensor::vector(x.clone()))?[0] / t;
        let mut q = 0.0;
        for i in 0..dx {
            for j in 0..dx {
                q += x[i] * p.data()[i * dx + j] * x[j];
            }
        }
        worst = worst.max((e - q / 2.0).abs());
    }
    Ok((worst < 1e-10, format!("max abs difference {worst:.2e} (limit 1e-10)")))
}

/// MALA on the 2-D standard normal: sample mean and covariance.
pub fn sampler_moments() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let target = Quadratic::standard_normal(2);
    let params = ChainParams {
        step_size: 0.2,
        noise: 0.4f64.sqrt(),
        n_steps: 1,
        clip_grad: None,
        anneal_noise: false,
        mh_reject: true,
    };
    let chains = 100;
    let mut x = NoiseDistribution::StandardNormal { dim: 2 }.sample(chains, &mut rng);
    let (mut s, mut ss) = ([0.0; 2], [[0.0; 2]; 2]);
    let mut count = 0.0;
    for step in 0..600 {
        x = run_x_chain(&target, x, &params, &mut rng)?.x;
        if step < 100 {
            continue;
        }
        for row in x.iter_rows() {
            for i in 0..2 {
                s[i] += row[i];
                for j in 0..2 {
                    ss[i][j] += row[i] * row[j];
                }
            }
            count += 1.0;
        }
    }
    let mean = s.map(|v| v / count);
    let mut worst_cov = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            let c = ss[i][j] / count - mean[i] * mean[j];
            worst_cov = worst_cov.max((c - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let worst_mean = mean[0].abs().max(mean[1].abs());
    Ok((
        worst_mean < 0.05 && worst_cov < 0.1,
        format!("max |mean| {worst_mean:.3}, max |cov - I| {worst_cov:.3}"),
    ))
}

/// Rank-based AUC against the exhaustive pairwise count, with ties.
pub fn auc_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..51);
        let m = rng.random_range(1..51);
        let draw = |rng: &mut ChaCha8Rng| (rng.random_range(0..20) as f64) / 4.0;
        let inl: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let out: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
        let mut wins = 0.0;
        for &o in &out {
            for &i in &inl {
                wins += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
            }
        }
        let oracle = wins / (n * m) as f64;
        worst = worst.max((auc(&ScoredDataset::from_groups(&inl, &out)?)? - oracle).abs());
    }
    Ok((worst < 1e-12, format!("max difference {worst:.2e}")))
}

/// Replay fallback rate, PCD restart rate and the annealing schedule.
pub fn stochastic_controls() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut buffer = ReplayBuffer::new(2, 100, 0.95)?;
    buffer.push(&[0.0, 0.0])?;
    let q0 = NoiseDistribution::StandardNormal { dim: 2 };
    let (_, from_noise) = latent_starts(&buffer, &q0, 100_000, &mut rng);
    let fallback = from_noise as f64 / 100_000.0;

    let p0 = NoiseDistribution::UniformBox { dim: 2, lo: -4.0, hi: 4.0 };
    let mut store = None;
    let mut restarts = 0;
    for _ in 0..100 {
        restarts += pcd_init(&mut store, 1000, 0.05, &p0, &mut rng)?.1;
    }
    let restart = restarts as f64 / 100_000.0;

    let annealed = ChainParams {
        step_size: 1.0,
        noise: 0.0,
        n_steps: 50,
        clip_grad: None,
        anneal_noise: true,
        mh_reject: false,
    };
    let schedule_ok = (0..50).all(|s| noise_scale(&annealed, s) == 0.05 / (1.0 + s as f64));
    let ok = (fallback - 0.05).abs() <= 0.005 && (restart - 0.05).abs() <= 0.005 && schedule_ok;
    Ok((
        ok,
        format!("fallback {fallback:.4}, restart {restart:.4}, schedule exact: {schedule_ok}"),
    ))
}
