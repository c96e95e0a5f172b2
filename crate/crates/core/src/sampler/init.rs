use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{project_rows, run_x_chain, run_z_chain, ChainParams, NoiseDistribution};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::AutoencoderModel;

/// FIFO store of latent chain endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    replay_prob: f64,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 10_000;
    pub const DEFAULT_REPLAY_PROB: f64 = 0.95;

    pub fn new(dim: usize, capacity: usize, replay_prob: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be >= 1"));
        }
        if !(0.0..=1.0).contains(&replay_prob) {
            return Err(Error::invalid(format!("replay_prob must be in [0, 1], got {replay_prob}")));
        }
        Ok(Self {
            capacity,
            replay_prob,
            dim,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn replay_prob(&self) -> f64 {
        self.replay_prob
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends one latent vector, evicting the oldest entry when full.
    pub fn push(&mut self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Shape {
                op: "replay_buffer",
                lhs: vec![self.dim],
                rhs: vec![z.len()],
            });
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(z.to_vec());
        Ok(())
    }

    /// Uniformly random stored entry.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&[f64]> {
        if self.entries.is_empty() {
            return None;
        }
        let i = rng.random_range(0..self.entries.len());
        Some(&self.entries[i])
    }
}

/// How input-space chains are started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Start at the positive batch.
    Cd,
    /// Start at the previous iteration's negatives, each restarted from
    /// `p_0` with probability `restart_prob`.
    Pcd {
        restart_prob: f64,
        #[serde(default)]
        store: Option<Tensor>,
    },
    /// On-manifold initialization: latent chain from a replay buffer, decode.
    Omi { latent: ChainParams, buffer: ReplayBuffer },
}

impl InitStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            InitStrategy::Cd => "cd",
            InitStrategy::Pcd { .. } => "pcd",
            InitStrategy::Omi { .. } => "omi",
        }
    }
}

/// Chain starts for CD: the batch itself.
pub fn cd_init(batch: &Tensor) -> Result<Tensor> {
    if batch.rows() == 0 {
        return Err(Error::invalid("CD needs a non-empty batch"));
    }
    Ok(batch.clone())
}

/// Chain starts for PCD. Seeds `store` from `p0` on first use and returns
/// the starts together with the number of restarted chains.
pub fn pcd_init<R: Rng + ?Sized>(
    store: &mut Option<Tensor>,
    batch_size: usize,
    restart_prob: f64,
    p0: &NoiseDistribution,
    rng: &mut R,
) -> Result<(Tensor, usize)> {
    if !(0.0..=1.0).contains(&restart_prob) {
        return Err(Error::invalid(format!("restart_prob must be in [0, 1], got {restart_prob}")));
    }
    let stored = match store.take() {
        Some(s) if s.rows() == batch_size && s.last_dim() == p0.dim() => s,
        Some(s) => {
            return Err(Error::Shape {
                op: "pcd_store",
                lhs: vec![batch_size, p0.dim()],
                rhs: s.shape().to_vec(),
            })
        }
        None => p0.sample(batch_size, rng),
    };
    let mut starts = Vec::with_capacity(stored.len());
    let mut restarts = 0;
    for row in stored.iter_rows() {
        let u: f64 = rng.random();
        if u < restart_prob {
            restarts += 1;
            p0.draw_into(rng, &mut starts);
        } else {
            starts.extend_from_slice(row);
        }
    }
    Ok((Tensor::new(stored.shape().to_vec(), starts)?, restarts))
}

/// Result of one OMI negative-sampling call.
#[derive(Clone, Debug, PartialEq)]
pub struct OmiOutput {
    pub x: Tensor,
    /// Final latent states, as appended to the buffer.
    pub z: Tensor,
    /// Chains whose latent start came from `q_0` rather than the buffer.
    pub from_noise: usize,
    pub accept_rate: f64,
}

/// Draws `n` latent starts: from the buffer with probability `replay_prob`
/// (when non-empty), else from `q_0`.
pub fn latent_starts<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    q0: &NoiseDistribution,
    n: usize,
    rng: &mut R,
) -> (Tensor, usize) {
    let mut z = Vec::with_capacity(n * q0.dim());
    let mut from_noise = 0;
    for _ in 0..n {
        let u: f64 = rng.random();
        match buffer.draw(rng).filter(|_| u < buffer.replay_prob) {
            Some(entry) => z.extend_from_slice(entry),
            None => {
                from_noise += 1;
                q0.draw_into(rng, &mut z);
            }
        }
    }
    (Tensor::new(vec![n, q0.dim()], z).expect("sized"), from_noise)
}

/// Negative-sample generation with on-manifold initialization for `n` chains.
pub fn omi_negative_sample<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    latent: &ChainParams,
    buffer: &mut ReplayBuffer,
    main: &ChainParams,
    n: usize,
    rng: &mut R,
) -> Result<OmiOutput> {
    let q0 = NoiseDistribution::for_latent(model.latent());
    let (z0, from_noise) = latent_starts(buffer, &q0, n, rng);
    let z = run_z_chain(model, z0, latent, rng)?;
    for row in z.iter_rows() {
        buffer.push(row)?;
    }
    let x0 = model.decode(&z)?;
    let out = run_x_chain(model, x0, main, rng)?;
    Ok(OmiOutput {
        x: out.x,
        z,
        from_noise,
        accept_rate: out.accept_rate,
    })
}

/// The three stages of sample generation: decoded `q_0` draws, decodes after
/// the latent chain, and the final input-space samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedStages {
    pub z0_decoded: Tensor,
    pub omi: Tensor,
    pub samples: Tensor,
}

/// Generation without a buffer: the latent chain runs 8x its training length.
pub fn omi_generate<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    latent: &ChainParams,
    main: &ChainParams,
    n: usize,
    rng: &mut R,
) -> Result<GeneratedStages> {
    let q0 = NoiseDistribution::for_latent(model.latent());
    let mut z0 = q0.sample(n, rng);
    if model.latent().is_sphere() {
        project_rows(&mut z0)?;
    }
    let z0_decoded = model.decode(&z0)?;
    let z = run_z_chain(model, z0, &latent.lengthened(8), rng)?;
    let omi = model.decode(&z)?;
    let samples = run_x_chain(model, omi.clone(), main, rng)?.x;
    Ok(GeneratedStages {
        z0_decoded,
        omi,
        samples,
    })
}

/// Diagnostics from one negative-sampling call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub from_noise: usize,
    pub restarts: usize,
    pub accept_rate: f64,
}

/// Stateful negative sampler: strategy state, main-chain parameters and the
/// PCD noise distribution `p_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeSampler {
    pub strategy: InitStrategy,
    pub chain: ChainParams,
    pub p0: NoiseDistribution,
}

impl NegativeSampler {
    /// Negatives for one training step, one per positive.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        model: &AutoencoderModel,
        positives: &Tensor,
        rng: &mut R,
    ) -> Result<(Tensor, SampleStats)> {
        let n = positives.rows();
        match &mut self.strategy {
            InitStrategy::Cd => {
                let out = run_x_chain(model, cd_init(positives)?, &self.chain, rng)?;
                Ok((
                    out.x,
                    SampleStats {
                        accept_rate: out.accept_rate,
                        ..Default::default()
                    },
                ))
            }
            InitStrategy::Pcd { restart_prob, store } => {
                let (x0, restarts) = pcd_init(store, n, *restart_prob, &self.p0, rng)?;
                let out = run_x_chain(model, x0, &self.chain, rng)?;
                *store = Some(out.x.clone());
                Ok((
                    out.x,
                    SampleStats {
                        restarts,
                        accept_rate: out.accept_rate,
                        ..Default::default()
                    },
                ))
            }
            InitStrategy::Omi { latent, buffer } => {
                let out = omi_negative_sample(model, latent, buffer, &self.chain, n, rng)?;
                Ok((
                    out.x,
                    SampleStats {
                        from_noise: out.from_noise,
                        accept_rate: out.accept_rate,
                        ..Default::default()
                    },
                ))
            }
        }
    }
}
