use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    TooFewTimesteps(usize),
    BetaOutOfRange {
        index: usize,
        beta: f64,
    },
    TimestepOutOfRange {
        t: usize,
        len: usize,
    },
    DimensionMismatch {
        expected: usize,
        found: usize,
    },
    UnknownCondition {
        cond: usize,
        num_conditions: usize,
    },
    /// An operation that needs at least one element got none.
    Empty(&'static str),
    ArchitectureMismatch,
    ZeroVector,
    /// A sampler step was asked to move in the wrong direction.
    StepOrder {
        from: String,
        to: String,
    },
    NonFinite(&'static str),
    Diverged {
        step: usize,
    },
    InvalidConfig(String),
    /// Metric needs both members and non-members.
    SingleClass,
    InvalidDataset(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::TooFewTimesteps(t) => write!(f, "schedule needs at least 2 timesteps, got {t}"),
            Error::BetaOutOfRange { index, beta } => {
                write!(f, "beta[{index}] = {beta} is outside (0, 1)")
            }
            Error::TimestepOutOfRange { t, len } => {
                write!(f, "timestep {t} out of range for schedule of length {len}")
            }
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::UnknownCondition { cond, num_conditions } => {
                write!(f, "condition {cond} unknown (model has {num_conditions} conditions)")
            }
            Error::Empty(what) => write!(f, "{what} must not be empty"),
            Error::ArchitectureMismatch => f.write_str("model architectures differ"),
            Error::ZeroVector => f.write_str("zero vector has no direction"),
            Error::StepOrder { from, to } => write!(f, "invalid step order: {from} -> {to}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Diverged { step } => write!(f, "training diverged (non-finite loss) at step {step}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::SingleClass => f.write_str("records must contain both members and non-members"),
            Error::InvalidDataset(msg) => write!(f, "invalid dataset: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
