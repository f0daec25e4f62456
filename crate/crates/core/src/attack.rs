//! The two-step initial-noise membership attack and its baselines.
//!
//! The adversary inverts the query sample with the *pretrained* model to
//! obtain a semantic initial noise, hands that noise and the condition to the
//! *target* model's end-to-end generator, and scores the distance between the
//! query and the generation. The target is only reachable through
//! [`EndToEndGenerator`], which exposes generation and nothing else.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Partition;
use crate::denoiser::{Condition, DenoiserModel, GuidanceScale, NoisePredictor};
use crate::sampler::{generate, invert, StepGrid};
use crate::schedule::NoiseSchedule;
use crate::vecmath::{check_dim, cosine};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Metric {
    /// `||a - b||_2 / sqrt(dim)`.
    NormalizedL2,
    /// Mean absolute difference.
    L1,
    /// `1 - cos(a, b)`.
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::NormalizedL2 => "normalized_l2",
            Metric::L1 => "l1",
            Metric::Cosine => "cosine",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized_l2" | "l2" => Ok(Metric::NormalizedL2),
            "l1" => Ok(Metric::L1),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::InvalidConfig(alloc::format!("unknown metric `{other}`"))),
        }
    }
}

/// Distance under `metric`; lower always means more similar.
pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("vector"));
    }
    let n = a.len() as f64;
    Ok(match metric {
        Metric::NormalizedL2 => {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            libm::sqrt(sq) / libm::sqrt(n)
        }
        Metric::L1 => a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum::<f64>() / n,
        Metric::Cosine => 1.0 - cosine(a, b)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Inversion,
    Naive,
    /// Needs white-box access to the denoiser; a reference point only.
    LossBaseline,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Inversion, Method::Naive, Method::LossBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Method::Inversion => "inversion",
            Method::Naive => "naive",
            Method::LossBaseline => "loss_baseline",
        }
    }

    pub fn requires_white_box(self) -> bool {
        matches!(self, Method::LossBaseline)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inversion" => Ok(Method::Inversion),
            "naive" => Ok(Method::Naive),
            "loss_baseline" | "loss" => Ok(Method::LossBaseline),
            other => Err(Error::InvalidConfig(alloc::format!("unknown attack method `{other}`"))),
        }
    }
}

/// Ground-truth membership of a scored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Membership {
    Member,
    Nonmember,
}

impl Membership {
    pub fn name(self) -> &'static str {
        match self {
            Membership::Member => "member",
            Membership::Nonmember => "nonmember",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Membership::Member => Membership::Nonmember,
            Membership::Nonmember => Membership::Member,
        }
    }
}

impl TryFrom<Partition> for Membership {
    type Error = Error;

    fn try_from(p: Partition) -> Result<Self> {
        match p {
            Partition::Member => Ok(Membership::Member),
            Partition::Nonmember => Ok(Membership::Nonmember),
            Partition::Pretrain => Err(Error::InvalidDataset("pretraining samples have no membership label".into())),
        }
    }
}

impl FromStr for Membership {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "member" => Ok(Membership::Member),
            "nonmember" => Ok(Membership::Nonmember),
            other => Err(Error::InvalidDataset(alloc::format!("unknown membership label `{other}`"))),
        }
    }
}

/// One sample's membership score. Lower scores are more member-like.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub method: Method,
    pub label: Membership,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackConfig {
    /// Guidance during generation by the target.
    pub gamma1: GuidanceScale,
    /// Guidance during inversion by the pretrained model.
    pub gamma2: GuidanceScale,
    pub i_step: usize,
    pub inference_steps: usize,
    pub metric: Metric,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            gamma1: GuidanceScale::new(3.5).expect("finite"),
            gamma2: GuidanceScale::new(1.0).expect("finite"),
            i_step: 100,
            inference_steps: 50,
            metric: Metric::NormalizedL2,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.i_step == 0 || self.inference_steps == 0 {
            return Err(Error::InvalidConfig("i_step and inference_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Black-box view of a deployed text-to-sample pipeline: initial noise and a
/// condition in, finished sample out.
pub trait EndToEndGenerator {
    fn data_dim(&self) -> usize;

    fn generate(
        &self,
        initial_noise: &[f64],
        cond: usize,
        gamma: GuidanceScale,
        inference_steps: usize,
    ) -> Result<Vec<f64>>;
}

/// A DDIM pipeline around a denoiser. The denoiser itself is private, so
/// attack code holding this can only request generations.
pub struct DdimPipeline<'a, M: NoisePredictor> {
    model: &'a M,
    schedule: &'a NoiseSchedule,
}

impl<'a, M: NoisePredictor> DdimPipeline<'a, M> {
    pub fn new(model: &'a M, schedule: &'a NoiseSchedule) -> Self {
        Self { model, schedule }
    }
}

impl<M: NoisePredictor> EndToEndGenerator for DdimPipeline<'_, M> {
    fn data_dim(&self) -> usize {
        self.model.data_dim()
    }

    fn generate(
        &self,
        initial_noise: &[f64],
        cond: usize,
        gamma: GuidanceScale,
        inference_steps: usize,
    ) -> Result<Vec<f64>> {
        let grid = StepGrid::uniform(self.schedule.len(), inference_steps)?;
        generate(self.model, self.schedule, initial_noise, Condition::Class(cond), gamma, &grid)
    }
}

/// A labeled query for the attack.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub sample_id: usize,
    pub x0: &'a [f64],
    pub cond: usize,
    pub label: Membership,
}

/// Step 1 of the attack: semantic initial noise from the pretrained model.
pub fn semantic_noise<P: NoisePredictor + ?Sized>(
    pretrained: &P,
    s: &NoiseSchedule,
    x0: &[f64],
    cond: usize,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let grid = StepGrid::uniform(s.len(), cfg.i_step)?;
    invert(pretrained, s, x0, Condition::Class(cond), cfg.gamma2, &grid)
}

/// Step 2: have the target generate from `initial_noise` and score the
/// distance to the query sample.
pub fn score_from_noise<G: EndToEndGenerator + ?Sized>(
    target: &G,
    initial_noise: &[f64],
    query: Query<'_>,
    method: Method,
    cfg: &AttackConfig,
) -> Result<ScoreRecord> {
    cfg.validate()?;
    check_dim(target.data_dim(), query.x0.len())?;
    let generated = target.generate(initial_noise, query.cond, cfg.gamma1, cfg.inference_steps)?;
    Ok(ScoreRecord {
        sample_id: query.sample_id,
        method,
        label: query.label,
        score: distance(query.x0, &generated, cfg.metric)?,
    })
}

/// Both steps: invert with the pretrained model, regenerate with the target
/// and score the reconstruction distance.
pub fn inversion_attack_score<G: EndToEndGenerator + ?Sized, P: NoisePredictor + ?Sized>(
    target: &G,
    pretrained: &P,
    s: &NoiseSchedule,
    query: Query<'_>,
    cfg: &AttackConfig,
) -> Result<ScoreRecord> {
    cfg.validate()?;
    check_dim(target.data_dim(), pretrained.data_dim())?;
    let noise = semantic_noise(pretrained, s, query.x0, query.cond, cfg)?;
    score_from_noise(target, &noise, query, Method::Inversion, cfg)
}

/// Ablation: generate from random Gaussian noise instead of semantic noise.
pub fn naive_attack_score<G: EndToEndGenerator + ?Sized, R: Rng + ?Sized>(
    target: &G,
    query: Query<'_>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<ScoreRecord> {
    let noise: Vec<f64> = (0..query.x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    score_from_noise(target, &noise, query, Method::Naive, cfg)
}

/// White-box reference: denoising loss of the target at `t_probe`, averaged
/// over `num_draws` noise draws.
pub fn loss_baseline_score<R: Rng + ?Sized>(
    target: &DenoiserModel,
    s: &NoiseSchedule,
    query: Query<'_>,
    t_probe: usize,
    num_draws: usize,
    rng: &mut R,
) -> Result<ScoreRecord> {
    if num_draws == 0 {
        return Err(Error::Empty("loss baseline draws"));
    }
    s.check_timestep(t_probe)?;
    let mut total = 0.0;
    for _ in 0..num_draws {
        let eps: Vec<f64> = (0..query.x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = s.forward_diffuse(query.x0, t_probe, &eps)?;
        let pred = target.predict_noise(&x_t, t_probe, Condition::Class(query.cond))?;
        total += eps.iter().zip(&pred).map(|(e, p)| (e - p) * (e - p)).sum::<f64>();
    }
    Ok(ScoreRecord {
        sample_id: query.sample_id,
        method: Method::LossBaseline,
        label: query.label,
        score: total / num_draws as f64,
    })
}
