//! Seeded SGD training: pretraining from scratch, fine-tuning a copy of a
//! base model, and the memorization-score defense that drops over-memorized
//! examples from each mini-batch.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Sample;
use crate::denoiser::{denoising_loss_with_draws, draw_noise, Architecture, DenoiserModel, Example, NoiseDraw};
use crate::sampler::StepGrid;
use crate::schedule::NoiseSchedule;
use crate::vecmath::{all_finite, norm};
use crate::{stream_rng, Error, Result, SeededRng};

pub const DEFAULT_P_UNCOND: f64 = 0.1;
pub const DEFAULT_SS_THRESHOLD: f64 = 4.0;
pub const DEFAULT_SS_TIMESTEPS: usize = 10;

// Independent ChaCha streams derived from one config seed.
const TRAIN_STREAM: u64 = 1;
const DEFENSE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DefenseConfig {
    /// Examples whose memorization score exceeds this are skipped.
    pub ss_threshold: f64,
    /// Uniformly spaced timesteps averaged per score.
    pub num_t_samples: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self { ss_threshold: DEFAULT_SS_THRESHOLD, num_t_samples: DEFAULT_SS_TIMESTEPS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of replacing an example's condition by the null condition.
    pub p_uncond: f64,
    pub defense: Option<DefenseConfig>,
}

impl TrainConfig {
    fn validate(&self, dataset_len: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.batch_size > dataset_len {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds dataset size {dataset_len}",
                self.batch_size
            )));
        }
        // Zero is accepted so a run can be checked to leave weights untouched.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad("p_uncond must lie in [0, 1]");
        }
        if let Some(d) = &self.defense {
            if d.num_t_samples == 0 {
                return bad("defense num_t_samples must be positive");
            }
            if d.ss_threshold.is_nan() || d.ss_threshold < 0.0 {
                return bad("defense ss_threshold must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    /// One-based epoch number.
    pub epoch: usize,
    /// Mean per-example training loss over the epoch; NaN when every example was skipped.
    pub loss: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub history: Vec<EpochStats>,
}

/// Epoch-at-a-time SGD driver; owns the model being trained.
pub struct Trainer<'a> {
    model: DenoiserModel,
    data: &'a [Sample],
    schedule: &'a NoiseSchedule,
    cfg: TrainConfig,
    order: Vec<usize>,
    rng: SeededRng,
    defense_rng: SeededRng,
    epoch: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: DenoiserModel,
        data: &'a [Sample],
        schedule: &'a NoiseSchedule,
        cfg: TrainConfig,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        cfg.validate(data.len())?;
        let arch = model.architecture();
        if arch.num_timesteps != schedule.len() {
            return Err(Error::InvalidConfig(format!(
                "model expects {} timesteps, schedule has {}",
                arch.num_timesteps,
                schedule.len()
            )));
        }
        for s in data {
            if s.x0.len() != arch.data_dim {
                return Err(Error::DimensionMismatch { expected: arch.data_dim, found: s.x0.len() });
            }
            if s.cond >= arch.num_conditions {
                return Err(Error::UnknownCondition { cond: s.cond, num_conditions: arch.num_conditions });
            }
        }
        Ok(Self {
            model,
            data,
            schedule,
            order: (0..data.len()).collect(),
            rng: stream_rng(cfg.seed, TRAIN_STREAM),
            defense_rng: stream_rng(cfg.seed, DEFENSE_STREAM),
            cfg,
            epoch: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        self.order.shuffle(&mut self.rng);
        let arch = *self.model.architecture();
        let mut loss_sum = 0.0;
        let mut trained = 0usize;
        let mut skipped = 0usize;
        let order = core::mem::take(&mut self.order);
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut batch: Vec<Example<'_>> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &self.data[i];
                if let Some(d) = self.cfg.defense {
                    let score = memorization_score(
                        &self.model,
                        &sample.x0,
                        sample.cond,
                        self.schedule,
                        d.num_t_samples,
                        &mut self.defense_rng,
                    )?;
                    if score > d.ss_threshold {
                        skipped += 1;
                        continue;
                    }
                }
                batch.push(sample.example());
            }
            if batch.is_empty() {
                continue;
            }
            let draws: Vec<NoiseDraw> = batch
                .iter()
                .map(|_| draw_noise(&mut self.rng, arch.data_dim, arch.num_timesteps, self.cfg.p_uncond))
                .collect();
            let (loss, grads) = denoising_loss_with_draws(&self.model, self.schedule, &batch, &draws)?;
            self.step += 1;
            if !loss.is_finite() || !all_finite(&grads) {
                self.order = order;
                return Err(Error::Diverged { step: self.step });
            }
            let lr = self.cfg.learning_rate;
            for (w, g) in self.model.weights_mut().iter_mut().zip(&grads) {
                *w -= lr * g;
            }
            if !all_finite(self.model.weights()) {
                self.order = order;
                return Err(Error::Diverged { step: self.step });
            }
            loss_sum += loss * batch.len() as f64;
            trained += batch.len();
        }
        self.order = order;
        self.epoch += 1;
        let loss = if trained == 0 { f64::NAN } else { loss_sum / trained as f64 };
        Ok(EpochStats { epoch: self.epoch, loss, skipped })
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        let history = (0..self.cfg.epochs).map(|_| self.run_epoch()).collect::<Result<Vec<_>>>()?;
        Ok(TrainOutcome { model: self.model, history })
    }
}

/// Trains a freshly initialized model (initialized from `cfg.seed`).
pub fn pretrain(arch: Architecture, data: &[Sample], s: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = DenoiserModel::init(arch, cfg.seed)?;
    Trainer::new(model, data, s, *cfg)?.run()
}

/// Fine-tunes a copy of `base` on the member set; `base` is left untouched.
/// Any defense in `cfg` is ignored; see [`finetune_with_defense`].
pub fn finetune(
    base: &DenoiserModel,
    members: &[Sample],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig { defense: None, ..*cfg };
    Trainer::new(base.clone(), members, s, cfg)?.run()
}

/// Fine-tuning that skips examples whose memorization score exceeds the
/// configured threshold at batch-assembly time.
pub fn finetune_with_defense(
    base: &DenoiserModel,
    members: &[Sample],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.defense.is_none() {
        return Err(Error::InvalidConfig("finetune_with_defense needs a defense config".into()));
    }
    Trainer::new(base.clone(), members, s, *cfg)?.run()
}

/// Mean over uniformly spaced timesteps of the norm of the gradient, with
/// respect to the condition embedding, of the conditional/unconditional
/// prediction gap `||eps(x_t, c, t) - eps(x_t, null, t)||_2`. One noise
/// vector is drawn per timestep.
pub fn memorization_score<R: Rng + ?Sized>(
    m: &DenoiserModel,
    x0: &[f64],
    cond: usize,
    s: &NoiseSchedule,
    num_t_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let arch = m.architecture();
    if cond >= arch.num_conditions {
        return Err(Error::UnknownCondition { cond, num_conditions: arch.num_conditions });
    }
    let grid = StepGrid::uniform(s.len(), num_t_samples)?;
    let mut total = 0.0;
    for &t in grid.indices() {
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = s.forward_diffuse(x0, t, &eps)?;
        let (_, grad) = m.guidance_gap_and_grad(&x_t, t, cond)?;
        total += norm(&grad);
    }
    Ok(total / grid.len() as f64)
}

/// Mean denoising loss of `m` over `data` with `draws_per_sample` fixed,
/// seeded noise draws per example and no guidance dropout. No update is made.
pub fn evaluate_denoising_loss(
    m: &DenoiserModel,
    data: &[Sample],
    s: &NoiseSchedule,
    draws_per_sample: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let mut rng = crate::seeded_rng(seed);
    let arch = m.architecture();
    let mut total = 0.0;
    let mut n = 0usize;
    for sample in data {
        for _ in 0..draws_per_sample {
            let draw = draw_noise(&mut rng, arch.data_dim, arch.num_timesteps, 0.0);
            let (loss, _) = denoising_loss_with_draws(m, s, &[sample.example()], &[draw])?;
            total += loss;
            n += 1;
        }
    }
    Ok(total / n as f64)
}
