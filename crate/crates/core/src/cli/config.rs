//! The TOML experiment file: `[data]`, `[model]`, `[sampler]`, `[train]`,
//! `[output]`. Every key is optional; omitted keys take the 2D mixture
//! settings.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::MixtureOfGaussians;
use crate::diff::Tensor;
use crate::error::{Error, FieldError, Result};
use crate::eval::{holdout_split, load_idx, load_idx_labels, LabeledImages};
use crate::model::{Activation, ArchitectureSpec, LatentSpace, ModelSpec};
use crate::sampler::{ChainParams, InitStrategy, NegativeSampler, NoiseDistribution, ReplayBuffer};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Mixture8,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: Dataset,
    /// Mixture draws for training, or a cap on IDX training images (0 = all).
    pub n_train: usize,
    /// Held-out mixture draws used by the density metrics.
    pub n_heldout: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_class: Option<u8>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: Dataset::Mixture8,
            n_train: 10_000,
            n_heldout: 2_000,
            seed: 0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            holdout_class: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Euclidean,
    Sphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: ArchitectureSpec,
    pub latent: LatentKind,
    pub latent_dim: usize,
    /// Defaults to `1 / D_x`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_scale: Option<f64>,
    pub temperature: f64,
    pub temperature_trainable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_activation: Option<Activation>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: ArchitectureSpec::Fcres {
                width: 64,
                hidden: 128,
                blocks: 2,
            },
            latent: LatentKind::Euclidean,
            latent_dim: 3,
            recon_scale: None,
            temperature: 0.5,
            temperature_trainable: true,
            output_activation: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Omi,
    Cd,
    Pcd,
}

fn latent_chain_2d() -> ChainParams {
    ChainParams {
        step_size: 0.005,
        noise: 0.1,
        n_steps: 10,
        clip_grad: None,
        anneal_noise: false,
        mh_reject: false,
    }
}

/// Main-chain parameters sit directly in `[sampler]`; the latent chain in
/// `[sampler.latent]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub strategy: Strategy,
    pub step_size: f64,
    pub noise: f64,
    pub n_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad: Option<f64>,
    pub anneal_noise: bool,
    pub mh_reject: bool,
    pub latent: ChainParams,
    /// Replay buffer for latent chain starts; on by default for `omi` and
    /// meaningless for the other strategies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer: Option<bool>,
    pub buffer_capacity: usize,
    pub replay_prob: f64,
    /// PCD restart probability.
    pub restart_prob: f64,
    /// Box of the PCD restart distribution; defaults to `[-4, 4]` for the
    /// mixture and `[0, 1]` for images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p0_box: Option<(f64, f64)>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Omi,
            step_size: 0.005,
            noise: 0.1,
            n_steps: 30,
            clip_grad: None,
            anneal_noise: false,
            mh_reject: true,
            latent: latent_chain_2d(),
            buffer: None,
            buffer_capacity: ReplayBuffer::DEFAULT_CAPACITY,
            replay_prob: ReplayBuffer::DEFAULT_REPLAY_PROB,
            restart_prob: 0.05,
            p0_box: None,
        }
    }
}

impl SamplerSection {
    pub fn main_chain(&self) -> ChainParams {
        ChainParams {
            step_size: self.step_size,
            noise: self.noise,
            n_steps: self.n_steps,
            clip_grad: self.clip_grad,
            anneal_noise: self.anneal_noise,
            mh_reject: self.mh_reject,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub grid_resolution: usize,
    /// Adds `wall_time_s` to trace records, which makes traces differ run to run.
    pub record_wall_time: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/mixture8"),
            checkpoint_every: 10,
            grid_resolution: 256,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub train: TrainConfig,
    pub output: OutputSection,
}

fn prefixed(prefix: &str, errs: Vec<FieldError>) -> impl Iterator<Item = FieldError> + '_ {
    errs.into_iter()
        .map(move |e| FieldError::new(format!("{prefix}.{}", e.field), e.message))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Overrides both the data and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let d = &self.data;
        if d.dataset == Dataset::Mixture8 {
            if d.n_train == 0 {
                errs.push(FieldError::new("data.n_train", "must be >= 1"));
            }
            if d.n_heldout == 0 {
                errs.push(FieldError::new("data.n_heldout", "must be >= 1"));
            }
        } else {
            if d.train_images.is_none() {
                errs.push(FieldError::new("data.train_images", "required for dataset = \"idx\""));
            }
            if d.holdout_class.is_some() && d.train_labels.is_none() {
                errs.push(FieldError::new("data.train_labels", "required with holdout_class"));
            }
            if d.test_images.is_some() != d.test_labels.is_some() {
                errs.push(FieldError::new("data.test_labels", "test images and labels go together"));
            }
        }
        if let Some(c) = d.holdout_class {
            if c > 9 {
                errs.push(FieldError::new("data.holdout_class", format!("must be 0-9, got {c}")));
            }
        }

        let m = &self.model;
        if m.latent_dim == 0 || (m.latent == LatentKind::Sphere && m.latent_dim < 2) {
            errs.push(FieldError::new("model.latent_dim", format!("too small: {}", m.latent_dim)));
        }
        if let Some(s) = m.recon_scale {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(FieldError::new("model.recon_scale", format!("must be > 0, got {s}")));
            }
        }
        if !(m.temperature > 0.0 && m.temperature.is_finite()) {
            errs.push(FieldError::new("model.temperature", format!("must be > 0, got {}", m.temperature)));
        }

        let s = &self.sampler;
        errs.extend(prefixed("sampler", s.main_chain().field_errors()));
        if s.strategy == Strategy::Omi {
            errs.extend(prefixed("sampler.latent", s.latent.field_errors()));
        }
        if s.buffer == Some(true) && s.strategy != Strategy::Omi {
            errs.push(FieldError::new("sampler.buffer", "the replay buffer only applies to strategy = \"omi\""));
        }
        if s.buffer_capacity == 0 {
            errs.push(FieldError::new("sampler.buffer_capacity", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&s.replay_prob) {
            errs.push(FieldError::new("sampler.replay_prob", format!("must be in [0, 1], got {}", s.replay_prob)));
        }
        if !(0.0..=1.0).contains(&s.restart_prob) {
            errs.push(FieldError::new("sampler.restart_prob", format!("must be in [0, 1], got {}", s.restart_prob)));
        }
        if let Some((lo, hi)) = s.p0_box {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                errs.push(FieldError::new("sampler.p0_box", format!("need lo < hi, got ({lo}, {hi})")));
            }
        }

        errs.extend(prefixed("train", self.train.field_errors()));
        if self.output.grid_resolution < 2 {
            errs.push(FieldError::new("output.grid_resolution", "must be >= 2"));
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

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            input_dim,
            architecture: m.architecture.clone(),
            latent: match m.latent {
                LatentKind::Euclidean => LatentSpace::Euclidean { dim: m.latent_dim },
                LatentKind::Sphere => LatentSpace::Hypersphere { dim: m.latent_dim },
            },
            output_activation: m.output_activation,
            temperature: m.temperature,
            temperature_trainable: m.temperature_trainable,
            recon_scale: m.recon_scale.unwrap_or(1.0 / input_dim as f64),
        }
    }

    pub fn sampler(&self, input_dim: usize) -> Result<NegativeSampler> {
        let s = &self.sampler;
        let strategy = match s.strategy {
            Strategy::Cd => InitStrategy::Cd,
            Strategy::Pcd => InitStrategy::Pcd {
                restart_prob: s.restart_prob,
                store: None,
            },
            Strategy::Omi => {
                // Without the buffer every chain starts from q_0.
                let replay = if s.buffer.unwrap_or(true) { s.replay_prob } else { 0.0 };
                InitStrategy::Omi {
                    latent: s.latent.clone(),
                    buffer: ReplayBuffer::new(self.model.latent_dim, s.buffer_capacity, replay)?,
                }
            }
        };
        let (lo, hi) = s.p0_box.unwrap_or(match self.data.dataset {
            Dataset::Mixture8 => (-4.0, 4.0),
            Dataset::Idx => (0.0, 1.0),
        });
        Ok(NegativeSampler {
            strategy,
            chain: s.main_chain(),
            p0: NoiseDistribution::UniformBox { dim: input_dim, lo, hi },
        })
    }

    /// Training and evaluation data. Deterministic in `data.seed`.
    pub fn load_data(&self) -> Result<ExperimentData> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data.seed);
        rng.set_stream(2);
        match self.data.dataset {
            Dataset::Mixture8 => {
                let mix = MixtureOfGaussians::mixture8();
                let train = mix.sample(self.data.n_train, &mut rng);
                let heldout = mix.sample(self.data.n_heldout, &mut rng);
                Ok(ExperimentData {
                    train,
                    test_inliers: heldout,
                    test_outliers: None,
                    image_shape: None,
                })
            }
            Dataset::Idx => self.load_idx_data(&mut rng),
        }
    }

    fn load_idx_data(&self, rng: &mut ChaCha8Rng) -> Result<ExperimentData> {
        let d = &self.data;
        let path = d.train_images.as_ref().expect("validated");
        let (images, shape) = load_idx(path, rng)?;
        let labels = match &d.train_labels {
            Some(p) => load_idx_labels(p)?,
            None => vec![0; images.rows()],
        };
        let train = LabeledImages::new(images, labels)?;
        let test = match (&d.test_images, &d.test_labels) {
            (Some(ti), Some(tl)) => Some(LabeledImages::new(load_idx(ti, rng)?.0, load_idx_labels(tl)?)?),
            _ => None,
        };
        let cap = |t: Tensor| -> Tensor {
            if d.n_train > 0 && t.rows() > d.n_train {
                t.select_rows(&(0..d.n_train).collect::<Vec<_>>())
            } else {
                t
            }
        };
        let empty = || LabeledImages {
            images: Tensor::zeros(&[0, shape.0 * shape.1]),
            labels: Vec::new(),
        };
        Ok(match d.holdout_class {
            Some(c) => {
                let test = test.unwrap_or_else(empty);
                let split = holdout_split(&train, &test, c)?;
                ExperimentData {
                    train: cap(split.train.images),
                    test_inliers: split.test_inliers.images,
                    test_outliers: Some(split.test_outliers.images),
                    image_shape: Some(shape),
                }
            }
            None => ExperimentData {
                train: cap(train.images),
                test_inliers: test.map(|t| t.images).unwrap_or_else(|| empty().images),
                test_outliers: None,
                image_shape: Some(shape),
            },
        })
    }
}

/// Data an experiment trains and evaluates on.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Tensor,
    pub test_inliers: Tensor,
    pub test_outliers: Option<Tensor>,
    /// `(rows, cols)` for image data.
    pub image_shape: Option<(usize, usize)>,
}
