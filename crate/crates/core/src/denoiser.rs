//! Conditional noise-prediction network `eps_theta(x_t, c, t)`.
//!
//! The network is a three-layer perceptron over the concatenation of the noisy
//! state, a fixed sinusoidal embedding of the timestep and a learned condition
//! embedding. The condition table carries one extra row, the null condition,
//! used for unconditional prediction and classifier-free guidance. Gradients
//! are computed by a hand-written reverse pass over a recorded forward trace.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::schedule::NoiseSchedule;
use crate::vecmath::{all_finite, check_dim, cosine, norm};
use crate::{seeded_rng, Error, Result};

const EMBED_INIT_STD: f64 = 0.02;
const MAX_FREQUENCY: f64 = 1000.0;

/// Either a class id or the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Class(usize),
    Null,
}

/// Classifier-free guidance weight `gamma`. Predictions are combined as
/// `(1 + gamma) * cond - gamma * uncond`, so `gamma = 0` is plain conditional
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "f64", into = "f64"))]
pub struct GuidanceScale(f64);

impl GuidanceScale {
    pub const ZERO: GuidanceScale = GuidanceScale(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::NonFinite("guidance scale"))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GuidanceScale {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<GuidanceScale> for f64 {
    fn from(g: GuidanceScale) -> f64 {
        g.0
    }
}

/// Anything that predicts the noise component of a diffused state.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;

    fn predict_noise(&self, x_t: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>>;

    fn cfg_predict(&self, x_t: &[f64], t: usize, cond: Condition, gamma: GuidanceScale) -> Result<Vec<f64>> {
        let g = gamma.value();
        // The endpoints select one branch outright so they are bit-exact.
        if g == 0.0 || cond == Condition::Null {
            return self.predict_noise(x_t, t, cond);
        }
        if g == -1.0 {
            return self.predict_noise(x_t, t, Condition::Null);
        }
        let c = self.predict_noise(x_t, t, cond)?;
        let u = self.predict_noise(x_t, t, Condition::Null)?;
        Ok(c.iter().zip(&u).map(|(c, u)| (1.0 + g) * c - g * u).collect())
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn predict_noise(&self, x_t: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        (**self).predict_noise(x_t, t, cond)
    }

    fn cfg_predict(&self, x_t: &[f64], t: usize, cond: Condition, gamma: GuidanceScale) -> Result<Vec<f64>> {
        (**self).cfg_predict(x_t, t, cond, gamma)
    }
}

/// Architecture hyperparameters. Two models are compatible when these match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub data_dim: usize,
    pub num_conditions: usize,
    /// Even; half sine and half cosine features.
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub hidden_dim: usize,
    /// Length of the schedule the model is trained against.
    pub num_timesteps: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    cond: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    w3: Range<usize>,
    b3: Range<usize>,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data_dim", self.data_dim),
            ("num_conditions", self.num_conditions),
            ("time_embed_dim", self.time_embed_dim),
            ("cond_embed_dim", self.cond_embed_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(alloc::format!("{name} must be positive")));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time_embed_dim must be even".into()));
        }
        if self.num_timesteps < 2 {
            return Err(Error::TooFewTimesteps(self.num_timesteps));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.cond_embed_dim
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, h) = (self.data_dim, self.hidden_dim);
        Layout {
            cond: take((self.num_conditions + 1) * self.cond_embed_dim),
            w1: take(h * self.input_dim()),
            b1: take(h),
            w2: take(h * h),
            b2: take(h),
            w3: take(d * h),
            b3: take(d),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().b3.end
    }

    /// Offset of condition row `row` (row `num_conditions` is null) in the flat weights.
    pub fn cond_row_range(&self, row: usize) -> Range<usize> {
        let start = row * self.cond_embed_dim;
        start..start + self.cond_embed_dim
    }

    fn cond_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.num_conditions),
            Condition::Class(c) if c < self.num_conditions => Ok(c),
            Condition::Class(c) => Err(Error::UnknownCondition { cond: c, num_conditions: self.num_conditions }),
        }
    }

    /// Sinusoidal features of `t / num_timesteps` at geometrically spaced
    /// angular frequencies from 1 to 1000.
    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.time_embed_dim / 2;
        let phase = t as f64 / self.num_timesteps as f64;
        let mut out = vec![0.0; self.time_embed_dim];
        for k in 0..half {
            let freq = if half == 1 { 1.0 } else { libm::pow(MAX_FREQUENCY, k as f64 / (half - 1) as f64) };
            out[k] = libm::sin(freq * phase);
            out[half + k] = libm::cos(freq * phase);
        }
        out
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// `out = w * x + b` with `w` row-major `[rows x x.len()]`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = b[i] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Intermediate activations of one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Trace {
    cond_row: usize,
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Flat-parameter MLP denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Architecture,
    weights: Vec<f64>,
    seed: u64,
}

impl DenoiserModel {
    /// All-zero parameters; predicts zero noise everywhere.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, weights: vec![0.0; arch.param_count()], seed: 0 })
    }

    /// Seeded initialization: affine weights `N(0, 1/fan_in)`, embeddings
    /// `N(0, 0.02^2)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut weights = vec![0.0; arch.param_count()];
        let mut rng = seeded_rng(seed);
        let mut fill = |range: Range<usize>, std: f64, rng: &mut crate::SeededRng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for w in &mut weights[range] {
                *w = dist.sample(rng);
            }
        };
        fill(layout.cond, EMBED_INIT_STD, &mut rng);
        fill(layout.w1, 1.0 / libm::sqrt(arch.input_dim() as f64), &mut rng);
        fill(layout.w2, 1.0 / libm::sqrt(arch.hidden_dim as f64), &mut rng);
        fill(layout.w3, 1.0 / libm::sqrt(arch.hidden_dim as f64), &mut rng);
        Ok(Self { arch, weights, seed })
    }

    pub fn from_parts(arch: Architecture, weights: Vec<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        check_dim(arch.param_count(), weights.len())?;
        if !all_finite(&weights) {
            return Err(Error::NonFinite("model weights"));
        }
        Ok(Self { arch, weights, seed })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    /// Seed the parameters were initialized from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_inputs(&self, x_t: &[f64], t: usize) -> Result<()> {
        check_dim(self.arch.data_dim, x_t.len())?;
        if t >= self.arch.num_timesteps {
            return Err(Error::TimestepOutOfRange { t, len: self.arch.num_timesteps });
        }
        Ok(())
    }

    pub fn forward_trace(&self, x_t: &[f64], t: usize, cond: Condition) -> Result<Trace> {
        self.check_inputs(x_t, t)?;
        let cond_row = self.arch.cond_row(cond)?;
        let l = self.arch.layout();
        let w = &self.weights;
        let h = self.arch.hidden_dim;

        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x_t);
        input.extend(self.arch.time_embedding(t));
        input.extend_from_slice(&w[l.cond.clone()][self.arch.cond_row_range(cond_row)]);

        let mut z1 = vec![0.0; h];
        affine(&w[l.w1], &w[l.b1], &input, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
        let mut z2 = vec![0.0; h];
        affine(&w[l.w2], &w[l.b2], &a1, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|&z| silu(z)).collect();
        let mut output = vec![0.0; self.arch.data_dim];
        affine(&w[l.w3], &w[l.b3], &a2, &mut output);
        Ok(Trace { cond_row, input, z1, a1, z2, a2, output })
    }

    /// Reverse pass for an upstream gradient `d_out` on the output.
    ///
    /// Parameter gradients are accumulated into `grads` (aligned with
    /// [`weights`](Self::weights)) when given; the gradient with respect to the
    /// condition-embedding input is returned.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        let l = self.arch.layout();
        let w = &self.weights;
        let (d, h, n_in) = (self.arch.data_dim, self.arch.hidden_dim, self.arch.input_dim());

        let w3 = &w[l.w3.clone()];
        let mut d_a2 = vec![0.0; h];
        for i in 0..d {
            let g = d_out[i];
            for (da, wv) in d_a2.iter_mut().zip(&w3[i * h..(i + 1) * h]) {
                *da += wv * g;
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            for i in 0..d {
                let g = d_out[i];
                gr[l.b3.start + i] += g;
                let row = &mut gr[l.w3.start + i * h..l.w3.start + (i + 1) * h];
                for (gw, a) in row.iter_mut().zip(&trace.a2) {
                    *gw += g * a;
                }
            }
        }

        let d_z2: Vec<f64> = d_a2.iter().zip(&trace.z2).map(|(g, &z)| g * silu_grad(z)).collect();
        let w2 = &w[l.w2.clone()];
        let mut d_a1 = vec![0.0; h];
        for i in 0..h {
            let g = d_z2[i];
            for (da, wv) in d_a1.iter_mut().zip(&w2[i * h..(i + 1) * h]) {
                *da += wv * g;
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            for i in 0..h {
                let g = d_z2[i];
                gr[l.b2.start + i] += g;
                let row = &mut gr[l.w2.start + i * h..l.w2.start + (i + 1) * h];
                for (gw, a) in row.iter_mut().zip(&trace.a1) {
                    *gw += g * a;
                }
            }
        }

        let d_z1: Vec<f64> = d_a1.iter().zip(&trace.z1).map(|(g, &z)| g * silu_grad(z)).collect();
        let w1 = &w[l.w1.clone()];
        let cond_start = d + self.arch.time_embed_dim;
        let mut d_cond = vec![0.0; self.arch.cond_embed_dim];
        for i in 0..h {
            let g = d_z1[i];
            let row = &w1[i * n_in + cond_start..(i + 1) * n_in];
            for (dc, wv) in d_cond.iter_mut().zip(row) {
                *dc += wv * g;
            }
        }
        if let Some(gr) = grads {
            for i in 0..h {
                let g = d_z1[i];
                gr[l.b1.start + i] += g;
                let row = &mut gr[l.w1.start + i * n_in..l.w1.start + (i + 1) * n_in];
                for (gw, x) in row.iter_mut().zip(&trace.input) {
                    *gw += g * x;
                }
            }
            let row = self.arch.cond_row_range(trace.cond_row);
            for (gc, dc) in gr[l.cond.start + row.start..l.cond.start + row.end].iter_mut().zip(&d_cond) {
                *gc += dc;
            }
        }
        d_cond
    }

    /// `L = ||eps(x_t, c, t) - eps(x_t, null, t)||_2` and its gradient with
    /// respect to the embedding vector of class `class`.
    ///
    /// The gradient is defined as zero where `L = 0`.
    pub fn guidance_gap_and_grad(&self, x_t: &[f64], t: usize, class: usize) -> Result<(f64, Vec<f64>)> {
        let cond = self.forward_trace(x_t, t, Condition::Class(class))?;
        let uncond = self.forward_trace(x_t, t, Condition::Null)?;
        let diff: Vec<f64> = cond.output.iter().zip(&uncond.output).map(|(c, u)| c - u).collect();
        let gap = norm(&diff);
        if gap == 0.0 {
            return Ok((0.0, vec![0.0; self.arch.cond_embed_dim]));
        }
        let d_out: Vec<f64> = diff.iter().map(|v| v / gap).collect();
        Ok((gap, self.backward(&cond, &d_out, None)))
    }
}

impl NoisePredictor for DenoiserModel {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict_noise(&self, x_t: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x_t, t, cond)?.output)
    }
}

/// One training example: clean data and its condition.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x0: &'a [f64],
    pub class: usize,
}

/// The random quantities drawn for one example of a denoising-loss batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
    /// Condition replaced by the null condition (guidance dropout).
    pub drop_condition: bool,
}

/// Draws `(t, dropout, eps)` for one example, in that order.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, data_dim: usize, num_timesteps: usize, p_uncond: f64) -> NoiseDraw {
    let t = rng.random_range(0..num_timesteps);
    let drop_condition = rng.random::<f64>() < p_uncond;
    let eps = (0..data_dim).map(|_| rng.sample(StandardNormal)).collect();
    NoiseDraw { t, eps, drop_condition }
}

/// Mean squared-norm denoising loss and exact gradients for fixed draws.
pub fn denoising_loss_with_draws(
    m: &DenoiserModel,
    s: &NoiseSchedule,
    batch: &[Example<'_>],
    draws: &[NoiseDraw],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_dim(batch.len(), draws.len())?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = vec![0.0; m.param_count()];
    let mut loss = 0.0;
    for (ex, draw) in batch.iter().zip(draws) {
        check_dim(m.arch.data_dim, ex.x0.len())?;
        let x_t = s.forward_diffuse(ex.x0, draw.t, &draw.eps)?;
        let cond = if draw.drop_condition { Condition::Null } else { Condition::Class(ex.class) };
        let trace = m.forward_trace(&x_t, draw.t, cond)?;
        let resid: Vec<f64> = trace.output.iter().zip(&draw.eps).map(|(p, e)| p - e).collect();
        loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        m.backward(&trace, &d_out, Some(&mut grads));
    }
    Ok((loss, grads))
}

/// Samples `t`, guidance dropout and `eps` per example, then returns the
/// mean denoising loss `||eps - eps_theta(x_t, c, t)||^2` with its gradient.
pub fn grad_denoising_loss<R: Rng + ?Sized>(
    m: &DenoiserModel,
    batch: &[Example<'_>],
    s: &NoiseSchedule,
    rng: &mut R,
    p_uncond: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let draws: Vec<NoiseDraw> = batch.iter().map(|_| draw_noise(rng, m.arch.data_dim, s.len(), p_uncond)).collect();
    denoising_loss_with_draws(m, s, batch, &draws)
}

/// Cosine similarity of the flattened parameter vectors of two models.
pub fn param_cosine_similarity(a: &DenoiserModel, b: &DenoiserModel) -> Result<f64> {
    if a.arch != b.arch {
        return Err(Error::ArchitectureMismatch);
    }
    cosine(&a.weights, &b.weights)
}
