//! Autoencoder pre-training, the maximum-likelihood NAE update with its
//! regularizers, the learnable temperature, and the training loop.

mod adam;
pub mod oracles;

pub use adam::{adam_update, AdamState};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, LeafKind, NodeId, Tensor};
use crate::error::{Error, FieldError, Result};
use crate::model::{AutoencoderModel, Energy, ModelState};
use crate::sampler::NegativeSampler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub pretrain_learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub nae_epochs: usize,
    /// Weight of the mean squared negative energy.
    pub alpha: f64,
    /// Weight of the mean squared latent norm (Euclidean latents only).
    pub latent_norm_coef: f64,
    pub temperature_lr_multiplier: f64,
    /// L2 penalty on encoder weight matrices.
    pub encoder_l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            pretrain_learning_rate: 1e-4,
            batch_size: 128,
            pretrain_epochs: 0,
            nae_epochs: 50,
            alpha: 1.0,
            latent_norm_coef: 1e-4,
            temperature_lr_multiplier: 100.0,
            encoder_l2: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Problems keyed by bare field name.
    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !positive(self.learning_rate) {
            errs.push(FieldError::new("learning_rate", "must be > 0"));
        }
        if !positive(self.pretrain_learning_rate) {
            errs.push(FieldError::new("pretrain_learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            errs.push(FieldError::new("batch_size", "must be >= 1"));
        }
        if !nonneg(self.alpha) {
            errs.push(FieldError::new("alpha", "must be >= 0"));
        }
        if !nonneg(self.latent_norm_coef) {
            errs.push(FieldError::new("latent_norm_coef", "must be >= 0"));
        }
        if !positive(self.temperature_lr_multiplier) {
            errs.push(FieldError::new("temperature_lr_multiplier", "must be > 0"));
        }
        if !nonneg(self.encoder_l2) {
            errs.push(FieldError::new("encoder_l2", "must be >= 0"));
        }
        errs
    }
}

/// Diagnostic surface of one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub positive_energy_mean: f64,
    pub negative_energy_mean: f64,
    pub regularizer_value: f64,
    pub surrogate_loss: f64,
    pub temperature: f64,
}

/// Surrogate value, its parameter gradients (canonical order) and `dL/dT`.
#[derive(Clone, Debug)]
pub struct SurrogateEval {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
    pub temperature_grad: f64,
}

/// `d/dT [(Ē⁺ - Ē⁻)/T] = -(Ē⁺ - Ē⁻)/T²`.
pub fn temperature_gradient(positive_mean: f64, negative_mean: f64, temperature: f64) -> f64 {
    -(positive_mean - negative_mean) / (temperature * temperature)
}

fn collect_grads(g: &Graph, loss: NodeId, ids: impl Iterator<Item = NodeId>) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    Ok(ids.map(|id| grads.take(id).expect("parameter leaf")).collect())
}

fn encoder_l2_node(g: &mut Graph, model: &AutoencoderModel, enc: &[NodeId], coef: f64) -> Result<Option<NodeId>> {
    if coef == 0.0 {
        return Ok(None);
    }
    // Canonical order is (weight, bias) per dense layer: take the weights.
    let mut total: Option<NodeId> = None;
    for &w in enc.iter().step_by(2) {
        let sq = g.square(w)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    debug_assert_eq!(enc.len(), model.encoder().params().len());
    total.map(|t| g.scale(t, coef)).transpose()
}

/// Evaluates `L = Ē⁺/T - Ē⁻/T + α·mean(E⁻²) + c·mean||f_e(x⁺)||²` (+ optional
/// encoder L2) and its gradient. Negatives are constants: nothing flows
/// back into the sampler.
pub fn surrogate(model: &AutoencoderModel, positives: &Tensor, negatives: &Tensor, cfg: &TrainConfig) -> Result<SurrogateEval> {
    if positives.rows() == 0 || negatives.rows() == 0 {
        return Err(Error::invalid("positive and negative batches must be non-empty"));
    }
    let t = model.temperature();
    let mut g = Graph::new();
    let b = model.bind(&mut g, LeafKind::Param);
    let xp = g.constant(positives.clone());
    let xn = g.constant(negatives.clone());
    let (ep, zp) = model.energy_nodes(&mut g, &b, xp)?;
    let (en, _) = model.energy_nodes(&mut g, &b, xn)?;
    let ep_mean = g.mean(ep)?;
    let en_mean = g.mean(en)?;
    let diff = g.sub(ep_mean, en_mean)?;
    let ml = g.scale(diff, 1.0 / t)?;

    let mut reg_terms = Vec::new();
    if cfg.alpha != 0.0 {
        let sq = g.square(en)?;
        let m = g.mean(sq)?;
        reg_terms.push(g.scale(m, cfg.alpha)?);
    }
    if cfg.latent_norm_coef != 0.0 && !model.latent().is_sphere() {
        let sq = g.square(zp)?;
        let norms = g.row_sum(sq)?;
        let m = g.mean(norms)?;
        reg_terms.push(g.scale(m, cfg.latent_norm_coef)?);
    }
    if let Some(l2) = encoder_l2_node(&mut g, model, &b.encoder, cfg.encoder_l2)? {
        reg_terms.push(l2);
    }
    let mut loss = ml;
    let mut reg_value = 0.0;
    for r in reg_terms {
        reg_value += g.value(r).item();
        loss = g.add(loss, r)?;
    }
    let report = LossReport {
        positive_energy_mean: g.value(ep_mean).item(),
        negative_energy_mean: g.value(en_mean).item(),
        regularizer_value: reg_value,
        surrogate_loss: g.value(loss).item(),
        temperature: t,
    };
    let grads = collect_grads(&g, loss, b.all())?;
    Ok(SurrogateEval {
        temperature_grad: temperature_gradient(report.positive_energy_mean, report.negative_energy_mean, t),
        report,
        grads,
    })
}

/// Mean reconstruction error of a batch and its gradient.
pub fn pretrain_loss(model: &AutoencoderModel, batch: &Tensor) -> Result<SurrogateEval> {
    if batch.rows() == 0 {
        return Err(Error::invalid("pretraining batch must be non-empty"));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, LeafKind::Param);
    let x = g.constant(batch.clone());
    let (e, _) = model.energy_nodes(&mut g, &b, x)?;
    let loss = g.mean(e)?;
    let value = g.value(loss).item();
    let grads = collect_grads(&g, loss, b.all())?;
    Ok(SurrogateEval {
        report: LossReport {
            positive_energy_mean: value,
            negative_energy_mean: 0.0,
            regularizer_value: 0.0,
            surrogate_loss: value,
            temperature: model.temperature(),
        },
        grads,
        temperature_grad: 0.0,
    })
}

fn apply(model: &mut AutoencoderModel, grads: &[Tensor], adam: &mut AdamState, lr: f64) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "parameter gradient".into() });
    }
    let mut params = model.params_mut();
    adam.update(&mut params, grads, lr)
}

/// One Adam step on the mean reconstruction error.
pub fn pretrain_step(model: &mut AutoencoderModel, batch: &Tensor, adam: &mut AdamState, lr: f64) -> Result<LossReport> {
    let eval = pretrain_loss(model, batch)?;
    apply(model, &eval.grads, adam, lr)?;
    Ok(eval.report)
}

/// Adam step on `u = log T` with gradient `dL/dT · T`, at
/// `learning_rate · temperature_lr_multiplier`. Returns the new T.
pub fn temperature_update(
    model: &mut AutoencoderModel,
    temperature_grad: f64,
    cfg: &TrainConfig,
    adam: &mut AdamState,
) -> Result<f64> {
    let t = model.temperature();
    let mut u = Tensor::scalar(model.log_temperature());
    let du = Tensor::scalar(temperature_grad * t);
    adam.update(&mut [&mut u], &[du], cfg.learning_rate * cfg.temperature_lr_multiplier)?;
    model.set_log_temperature(u.item())?;
    let next = model.temperature();
    if !(next > 0.0 && next.is_finite()) {
        return Err(Error::NonFinite { op: "temperature update".into() });
    }
    Ok(next)
}

/// One NAE update: Adam on θ with the surrogate gradient, then (when the
/// model's temperature is trainable) one step on `log T`.
pub fn nae_step(
    model: &mut AutoencoderModel,
    positives: &Tensor,
    negatives: &Tensor,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    temperature_adam: &mut AdamState,
) -> Result<LossReport> {
    let eval = surrogate(model, positives, negatives, cfg)?;
    if !eval.report.surrogate_loss.is_finite() {
        return Err(Error::NonFinite { op: "surrogate loss".into() });
    }
    apply(model, &eval.grads, adam, cfg.learning_rate)?;
    if model.temperature_trainable() {
        temperature_update(model, eval.temperature_grad, cfg, temperature_adam)?;
    }
    Ok(eval.report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Nae,
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub phase: Phase,
    pub epoch: usize,
    #[serde(flatten)]
    pub report: LossReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept_rate: Option<f64>,
    /// Seconds since the run started; only when explicitly requested, since
    /// it breaks byte-identical traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

pub trait TraceSink {
    fn record(&mut self, rec: &TraceRecord) -> Result<()>;
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, rec: &TraceRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Everything required to resume training bit-exactly at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub sampler: NegativeSampler,
    pub model: ModelState,
    pub adam: AdamState,
    pub pretrain_adam: AdamState,
    pub temperature_adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub sampler: NegativeSampler,
    pub model: AutoencoderModel,
    adam: AdamState,
    pretrain_adam: AdamState,
    temperature_adam: AdamState,
    rng: ChaCha8Rng,
    epochs_done: usize,
    step: u64,
    record_wall_time: bool,
    started: Instant,
}

/// Mean of the step reports of one epoch.
fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.positive_energy_mean += r.positive_energy_mean / n;
        m.negative_energy_mean += r.negative_energy_mean / n;
        m.regularizer_value += r.regularizer_value / n;
        m.surrogate_loss += r.surrogate_loss / n;
        m.temperature += r.temperature / n;
    }
    m
}

fn as_divergence(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::ChainDiverged { .. } => Error::Diverged {
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

impl Trainer {
    pub fn new(model: AutoencoderModel, sampler: NegativeSampler, config: TrainConfig) -> Result<Self> {
        let errs = config.field_errors();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        sampler.chain.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Stream 0 of the same seed is left for model initialization.
        rng.set_stream(1);
        let adam = AdamState::new(model.params());
        Ok(Self {
            pretrain_adam: adam.clone(),
            adam,
            temperature_adam: AdamState::scalar(),
            config,
            sampler,
            model,
            rng,
            epochs_done: 0,
            step: 0,
            record_wall_time: false,
            started: Instant::now(),
        })
    }

    pub fn from_state(state: TrainerState) -> Result<Self> {
        let model = AutoencoderModel::from_state(state.model)?;
        Ok(Self {
            config: state.config,
            sampler: state.sampler,
            model,
            adam: state.adam,
            pretrain_adam: state.pretrain_adam,
            temperature_adam: state.temperature_adam,
            rng: state.rng,
            epochs_done: state.epochs_done,
            step: state.step,
            record_wall_time: false,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config: self.config.clone(),
            sampler: self.sampler.clone(),
            model: self.model.state(),
            adam: self.adam.clone(),
            pretrain_adam: self.pretrain_adam.clone(),
            temperature_adam: self.temperature_adam.clone(),
            rng: self.rng.clone(),
            epochs_done: self.epochs_done,
            step: self.step,
        }
    }

    pub fn set_record_wall_time(&mut self, on: bool) {
        self.record_wall_time = on;
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn total_epochs(&self) -> usize {
        self.config.pretrain_epochs + self.config.nae_epochs
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.total_epochs()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        let bs = self.config.batch_size;
        if n <= bs {
            return vec![idx];
        }
        idx.chunks_exact(bs).map(<[usize]>::to_vec).collect()
    }

    /// Runs the next epoch (pre-training first, then NAE) and returns its
    /// mean report.
    pub fn run_epoch(&mut self, data: &Tensor, sink: &mut dyn TraceSink) -> Result<LossReport> {
        if data.rank() != 2 || data.rows() == 0 {
            return Err(Error::invalid("training data must be a non-empty [N, D] matrix"));
        }
        if data.last_dim() != self.model.input_dim() {
            return Err(Error::Shape {
                op: "train",
                lhs: data.shape().to_vec(),
                rhs: vec![self.model.input_dim()],
            });
        }
        let phase = if self.epochs_done < self.config.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Nae
        };
        let epoch = self.epochs_done;
        let mut reports = Vec::new();
        for idx in self.batches(data.rows()) {
            let batch = data.select_rows(&idx);
            let step = self.step;
            let (report, accept_rate) = self.step_once(phase, &batch).map_err(|e| as_divergence(step, e))?;
            let rec = TraceRecord {
                step,
                phase,
                epoch,
                report: report.clone(),
                accept_rate,
                wall_time_s: self.record_wall_time.then(|| self.started.elapsed().as_secs_f64()),
            };
            sink.record(&rec)?;
            reports.push(report);
            self.step += 1;
        }
        self.epochs_done += 1;
        Ok(mean_report(&reports))
    }

    fn step_once(&mut self, phase: Phase, batch: &Tensor) -> Result<(LossReport, Option<f64>)> {
        match phase {
            Phase::Pretrain => {
                let r = pretrain_step(&mut self.model, batch, &mut self.pretrain_adam, self.config.pretrain_learning_rate)?;
                Ok((r, None))
            }
            Phase::Nae => {
                let (neg, stats) = self.sampler.sample(&self.model, batch, &mut self.rng)?;
                let r = nae_step(
                    &mut self.model,
                    batch,
                    &neg,
                    &self.config,
                    &mut self.adam,
                    &mut self.temperature_adam,
                )?;
                Ok((r, Some(stats.accept_rate)))
            }
        }
    }

    /// Runs all remaining epochs. `on_epoch_end` is called after every epoch
    /// (checkpointing hook); returns the per-epoch mean reports.
    pub fn train(
        &mut self,
        data: &Tensor,
        sink: &mut dyn TraceSink,
        mut on_epoch_end: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut epochs = Vec::new();
        while !self.is_finished() {
            epochs.push(self.run_epoch(data, sink)?);
            on_epoch_end(self)?;
        }
        Ok(epochs)
    }
}

/// Convenience wrapper: trains to completion and returns the model, the
/// per-epoch reports and the per-step trace.
pub fn train(
    model: AutoencoderModel,
    data: &Tensor,
    config: TrainConfig,
    sampler: NegativeSampler,
) -> Result<(AutoencoderModel, Vec<LossReport>, Vec<TraceRecord>)> {
    let mut trainer = Trainer::new(model, sampler, config)?;
    let mut trace = Vec::new();
    let epochs = trainer.train(data, &mut trace, |_| Ok(()))?;
    Ok((trainer.model, epochs, trace))
}
