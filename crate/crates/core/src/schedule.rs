//! Diffusion noise schedules and signal-to-noise analytics.
//!
//! Timesteps are zero-based: index `t` holds `beta[t]`, `alpha[t] = 1 - beta[t]`
//! and `alpha_bar[t] = alpha[0] * ... * alpha[t]`. The last noising step is
//! index `len() - 1`.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;
use core::fmt;
use core::str::FromStr;

use crate::vecmath::check_dim;
use crate::{Error, Result};

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;
const SCALED_LINEAR_BETA_START: f64 = 0.00085;
const SCALED_LINEAR_BETA_END: f64 = 0.012;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// The sqrt-linear ramp used by Stable Diffusion.
    ScaledLinear,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::ScaledLinear];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::ScaledLinear => "scaled_linear",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "scaled_linear" | "scaled-linear" => Ok(ScheduleKind::ScaledLinear),
            other => Err(Error::InvalidConfig(alloc::format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Per-timestep noise tables for one schedule family. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

fn linspace(start: f64, end: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(move |i| if i == n - 1 { end } else { start + step * i as f64 })
}

fn cosine_f(t: f64, steps: f64) -> f64 {
    let c = libm::cos((t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2);
    c * c
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, num_timesteps: usize) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::TooFewTimesteps(num_timesteps));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => linspace(LINEAR_BETA_START, LINEAR_BETA_END, num_timesteps).collect(),
            ScheduleKind::ScaledLinear => {
                linspace(libm::sqrt(SCALED_LINEAR_BETA_START), libm::sqrt(SCALED_LINEAR_BETA_END), num_timesteps)
                    .map(|b| b * b)
                    .collect()
            }
            ScheduleKind::Cosine => {
                let steps = num_timesteps as f64;
                (0..num_timesteps)
                    .map(|i| {
                        let ratio = cosine_f((i + 1) as f64, steps) / cosine_f(i as f64, steps);
                        (1.0 - ratio).min(COSINE_MAX_BETA)
                    })
                    .collect()
            }
        };
        Self::from_betas(kind, beta)
    }

    /// Builds a schedule from explicit betas, validating that each lies in (0, 1).
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::TooFewTimesteps(beta.len()));
        }
        if let Some((index, &b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::BetaOutOfRange { index, beta: b });
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { kind, beta, alpha, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion timesteps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn last_index(&self) -> usize {
        self.len() - 1
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t < self.len() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange { t, len: self.len() })
        }
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bar[t])
    }

    /// `alpha_bar[t] / (1 - alpha_bar[t])`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar_at(t)?;
        Ok(snr_from_alpha_bar(ab))
    }

    /// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), eps.len())?;
        let ab = self.alpha_bar_at(t)?;
        let (signal, noise) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        Ok(x0.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect())
    }
}

pub fn snr_from_alpha_bar(alpha_bar: f64) -> f64 {
    alpha_bar / (1.0 - alpha_bar)
}

/// One row of the final-step residual-signal table.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleRow {
    pub kind: ScheduleKind,
    pub snr_last: f64,
    pub sqrt_alpha_bar_last: f64,
}

/// SNR and surviving signal amplitude at the last timestep for each kind.
pub fn schedule_report(kinds: &[ScheduleKind], num_timesteps: usize) -> Result<Vec<ScheduleRow>> {
    if kinds.is_empty() {
        return Err(Error::Empty("schedule kinds"));
    }
    kinds
        .iter()
        .map(|&kind| {
            let s = NoiseSchedule::new(kind, num_timesteps)?;
            let last = s.last_index();
            Ok(ScheduleRow { kind, snr_last: s.snr(last)?, sqrt_alpha_bar_last: libm::sqrt(s.alpha_bar[last]) })
        })
        .collect()
}
