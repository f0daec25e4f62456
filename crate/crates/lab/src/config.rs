//! Experiment configuration: a TOML document with every tunable, flag
//! overrides, and the digest that tags every artifact.

use std::fmt::Write as _;
use std::path::Path;

use noisemia_core::attack::{AttackConfig, Method, Metric};
use noisemia_core::denoiser::{Architecture, GuidanceScale};
use noisemia_core::schedule::ScheduleKind;
use noisemia_core::trainer::{
    DefenseConfig, TrainConfig, DEFAULT_P_UNCOND, DEFAULT_SS_THRESHOLD, DEFAULT_SS_TIMESTEPS,
};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::container::Digest;
use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub defense: DefenseSection,
    pub attack: AttackSection,
    pub evaluate: EvaluateSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub num_timesteps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub data_dim: usize,
    pub num_conditions: usize,
    pub n_pretrain: usize,
    pub n_member: usize,
    pub n_nonmember: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub hidden_dim: usize,
}

/// SGD settings of one training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_uncond: f64,
}

macro_rules! train_section {
    ($name:ident, $epochs:expr) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub epochs: usize,
            pub batch_size: usize,
            pub learning_rate: f64,
            pub p_uncond: f64,
        }

        impl Default for $name {
            fn default() -> Self {
                Self { epochs: $epochs, batch_size: 32, learning_rate: 1e-3, p_uncond: DEFAULT_P_UNCOND }
            }
        }

        impl $name {
            pub fn params(&self) -> TrainParams {
                TrainParams {
                    epochs: self.epochs,
                    batch_size: self.batch_size,
                    learning_rate: self.learning_rate,
                    p_uncond: self.p_uncond,
                }
            }
        }
    };
}

train_section!(PretrainSection, 200);
train_section!(FinetuneSection, 300);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub enabled: bool,
    pub ss_threshold: f64,
    pub num_t_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub methods: Vec<Method>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub i_step: usize,
    pub inference_steps: usize,
    pub metric: Metric,
    /// Timestep probed by the loss baseline; defaults to the middle of the schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_t_probe: Option<usize>,
    pub loss_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub fpr_levels: Vec<f64>,
    pub percentile_k: f64,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub i_steps: Vec<usize>,
    pub gamma2s: Vec<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { kind: ScheduleKind::ScaledLinear, num_timesteps: 1000 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { data_dim: 16, num_conditions: 8, n_pretrain: 4096, n_member: 256, n_nonmember: 256 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { time_embed_dim: 16, cond_embed_dim: 8, hidden_dim: 64 }
    }
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self { enabled: false, ss_threshold: DEFAULT_SS_THRESHOLD, num_t_samples: DEFAULT_SS_TIMESTEPS }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::default();
        Self {
            methods: Method::ALL.to_vec(),
            gamma1: d.gamma1.value(),
            gamma2: d.gamma2.value(),
            i_step: d.i_step,
            inference_steps: d.inference_steps,
            metric: d.metric,
            loss_t_probe: None,
            loss_draws: 4,
        }
    }
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            fpr_levels: noisemia_core::evaluation::DEFAULT_FPR_LEVELS.to_vec(),
            percentile_k: noisemia_core::evaluation::DEFAULT_PERCENTILE,
            bins: 20,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { i_steps: vec![25, 50, 100, 200], gamma2s: vec![0.0, 1.0, 3.5] }
    }
}

/// Seed streams handed to each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 1,
    Pretrain = 2,
    Finetune = 3,
    Attack = 4,
}

impl ExperimentConfig {
    /// Reads an optional TOML file, applies `key.path=value` overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("reading config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e| UsageError(format!("config: {}", e.to_string().trim_end())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError(m));
        let t = self.schedule.num_timesteps;
        if t < 2 {
            return bad("schedule.num_timesteps must be at least 2".into());
        }
        self.architecture().validate().map_err(|e| UsageError(format!("model: {e}")))?;
        let stages = [("pretrain", self.pretrain.params()), ("finetune", self.finetune.params())];
        for (name, s) in stages {
            if s.batch_size == 0 || !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return bad(format!("{name}: batch_size and learning_rate must be positive"));
            }
            if !(0.0..=1.0).contains(&s.p_uncond) {
                return bad(format!("{name}.p_uncond must lie in [0, 1]"));
            }
        }
        if self.defense.ss_threshold.is_nan() || self.defense.ss_threshold <= 0.0 || self.defense.num_t_samples == 0 {
            return bad("defense: ss_threshold and num_t_samples must be positive".into());
        }
        let a = &self.attack;
        self.attack_config(a.i_step, a.gamma2)?;
        if a.methods.is_empty() {
            return bad("attack.methods must not be empty".into());
        }
        if a.loss_draws == 0 || self.loss_t_probe() >= t {
            return bad("attack: loss_draws must be positive and loss_t_probe below num_timesteps".into());
        }
        let e = &self.evaluate;
        if e.bins == 0
            || !(0.0..=100.0).contains(&e.percentile_k)
            || e.fpr_levels.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            return bad("evaluate: bins positive, percentile_k in [0, 100], fpr_levels in [0, 1]".into());
        }
        if self.sweep.i_steps.contains(&0) {
            return bad("sweep.i_steps must be positive".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.data.data_dim,
            num_conditions: self.data.num_conditions,
            time_embed_dim: self.model.time_embed_dim,
            cond_embed_dim: self.model.cond_embed_dim,
            hidden_dim: self.model.hidden_dim,
            num_timesteps: self.schedule.num_timesteps,
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        noisemia_core::stream_rng(self.seed, stage as u64).next_u64()
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let s = if stage == Stage::Pretrain { self.pretrain.params() } else { self.finetune.params() };
        let defense = (stage == Stage::Finetune && self.defense.enabled).then_some(DefenseConfig {
            ss_threshold: self.defense.ss_threshold,
            num_t_samples: self.defense.num_t_samples,
        });
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            seed: self.stage_seed(stage),
            p_uncond: s.p_uncond,
            defense,
        }
    }

    pub fn attack_config(&self, i_step: usize, gamma2: f64) -> Result<AttackConfig, UsageError> {
        let g = |v: f64, name: &str| GuidanceScale::new(v).map_err(|e| UsageError(format!("attack.{name}: {e}")));
        let cfg = AttackConfig {
            gamma1: g(self.attack.gamma1, "gamma1")?,
            gamma2: g(gamma2, "gamma2")?,
            i_step,
            inference_steps: self.attack.inference_steps,
            metric: self.attack.metric,
        };
        cfg.validate().map_err(|e| UsageError(format!("attack: {e}")))?;
        Ok(cfg)
    }

    pub fn loss_t_probe(&self) -> usize {
        self.attack.loss_t_probe.unwrap_or(self.schedule.num_timesteps / 2)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding (fields in declaration order).
    pub fn digest(&self) -> Digest {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn digest_hex(&self) -> String {
        digest_hex(&self.digest())
    }
}

pub fn digest_hex(d: &Digest) -> String {
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Applies `a.b.c=value`; the value is read as TOML and falls back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), UsageError> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(UsageError(format!("override `{spec}` is not key=value")));
    };
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| UsageError(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
