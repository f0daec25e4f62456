//! Deterministic DDIM generation and DDIM inversion with classifier-free
//! guidance on a subsampled timestep grid.
//!
//! Both directions share one update: estimate the clean sample from the
//! current state and the guided noise prediction, then re-noise it to the
//! target level. `Boundary` is the clean end of the chain where
//! `alpha_bar = 1`.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::denoiser::{Condition, GuidanceScale, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::vecmath::{all_finite, check_dim, cosine};
use crate::{Error, Result};

/// A position on the diffusion chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// Clean data, `alpha_bar = 1`.
    Boundary,
    Step(usize),
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Boundary => f.write_str("boundary"),
            Level::Step(t) => write!(f, "t={t}"),
        }
    }
}

impl Level {
    fn rank(self) -> Option<usize> {
        match self {
            Level::Boundary => None,
            Level::Step(t) => Some(t),
        }
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))`, exactly `(1, 0)` at the boundary.
    fn coefficients(self, s: &NoiseSchedule) -> Result<(f64, f64)> {
        match self {
            Level::Boundary => Ok((1.0, 0.0)),
            Level::Step(t) => {
                let ab = s.alpha_bar_at(t)?;
                Ok((libm::sqrt(ab), libm::sqrt(1.0 - ab)))
            }
        }
    }
}

/// Strictly increasing timestep indices used by a sampler run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepGrid {
    indices: Vec<usize>,
}

impl StepGrid {
    /// `count` indices spread uniformly over `[0, T-1]`, always including `T-1`.
    pub fn uniform(num_timesteps: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Empty("step grid"));
        }
        if num_timesteps == 0 || count > num_timesteps {
            return Err(Error::InvalidConfig(format!(
                "cannot place {count} steps on a schedule of {num_timesteps} timesteps"
            )));
        }
        let top = num_timesteps - 1;
        let indices = if count == 1 {
            alloc::vec![top]
        } else {
            let span = count - 1;
            (0..count).map(|k| (k * top + span / 2) / span).collect()
        };
        Ok(Self { indices })
    }

    pub fn from_indices(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("step grid"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("grid indices must be strictly increasing".into()));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn top(&self) -> usize {
        *self.indices.last().expect("grid is non-empty")
    }
}

fn checked(v: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    if all_finite(&v) {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Re-noises the clean estimate implied by `(x, eps)` at `from` to level `to`.
fn reproject(s: &NoiseSchedule, x: &[f64], eps: &[f64], from: Level, to: Level) -> Result<Vec<f64>> {
    let (src_signal, src_noise) = from.coefficients(s)?;
    let (dst_signal, dst_noise) = to.coefficients(s)?;
    let eps = checked(eps.to_vec(), "noise prediction")?;
    let out = x
        .iter()
        .zip(&eps)
        .map(|(x, e)| {
            let clean = (x - src_noise * e) / src_signal;
            dst_signal * clean + dst_noise * e
        })
        .collect();
    checked(out, "sampler state")
}

/// One DDIM denoising step from timestep `t` down to `t_prev`.
pub fn ddim_denoise_step<M: NoisePredictor + ?Sized>(
    m: &M,
    s: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    t_prev: Level,
    cond: Condition,
    gamma1: GuidanceScale,
) -> Result<Vec<f64>> {
    s.check_timestep(t)?;
    if let Some(p) = t_prev.rank() {
        if p >= t {
            return Err(Error::StepOrder { from: format!("{}", Level::Step(t)), to: format!("{t_prev}") });
        }
    }
    check_dim(m.data_dim(), x_t.len())?;
    let eps = m.cfg_predict(x_t, t, cond, gamma1)?;
    reproject(s, x_t, &eps, Level::Step(t), t_prev)
}

/// One DDIM inversion step from `t_prev` (or the clean boundary) up to `t`.
///
/// At the boundary the guided prediction is evaluated at timestep 0, the
/// closest trained noise level to clean data.
pub fn invert_step<M: NoisePredictor + ?Sized>(
    m: &M,
    s: &NoiseSchedule,
    x_prev: &[f64],
    t_prev: Level,
    t: usize,
    cond: Condition,
    gamma2: GuidanceScale,
) -> Result<Vec<f64>> {
    s.check_timestep(t)?;
    if let Some(p) = t_prev.rank() {
        if p >= t {
            return Err(Error::StepOrder { from: format!("{t_prev}"), to: format!("{}", Level::Step(t)) });
        }
    }
    check_dim(m.data_dim(), x_prev.len())?;
    let eps = m.cfg_predict(x_prev, t_prev.rank().unwrap_or(0), cond, gamma2)?;
    reproject(s, x_prev, &eps, t_prev, Level::Step(t))
}

/// Runs DDIM from the grid's top index down to clean data.
pub fn generate<M: NoisePredictor + ?Sized>(
    m: &M,
    s: &NoiseSchedule,
    x_start: &[f64],
    cond: Condition,
    gamma1: GuidanceScale,
    grid: &StepGrid,
) -> Result<Vec<f64>> {
    check_dim(m.data_dim(), x_start.len())?;
    let idx = grid.indices();
    let mut x = x_start.to_vec();
    for i in (0..idx.len()).rev() {
        let prev = if i == 0 { Level::Boundary } else { Level::Step(idx[i - 1]) };
        x = ddim_denoise_step(m, s, &x, idx[i], prev, cond, gamma1)?;
    }
    Ok(x)
}

/// DDIM inversion: chains [`invert_step`] from clean data up to the grid's
/// top index and returns the resulting semantic initial noise.
pub fn invert<M: NoisePredictor + ?Sized>(
    m: &M,
    s: &NoiseSchedule,
    x0: &[f64],
    cond: Condition,
    gamma2: GuidanceScale,
    grid: &StepGrid,
) -> Result<Vec<f64>> {
    check_dim(m.data_dim(), x0.len())?;
    let mut x = x0.to_vec();
    let mut prev = Level::Boundary;
    for &t in grid.indices() {
        x = invert_step(m, s, &x, prev, t, cond, gamma2)?;
        prev = Level::Step(t);
    }
    Ok(x)
}

/// Cosine similarity of two inverted noise states.
pub fn inversion_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b)
}
