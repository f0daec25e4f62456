//! Labeled synthetic datasets: a Gaussian mixture with one blob per
//! condition, split into pretraining, member and non-member partitions.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::Example;
use crate::vecmath::norm;
use crate::{seeded_rng, Error, Result};

/// Radius of the sphere the class means are drawn on.
pub const CLASS_MEAN_RADIUS: f64 = 2.0;
/// Per-coordinate variance of each class blob.
pub const CLASS_VARIANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Partition {
    Pretrain,
    Member,
    Nonmember,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Pretrain => 0,
            Partition::Member => 1,
            Partition::Nonmember => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Partition::Pretrain),
            1 => Ok(Partition::Member),
            2 => Ok(Partition::Nonmember),
            other => Err(Error::InvalidDataset(format!("unknown partition tag {other}"))),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Pretrain => "pretrain",
            Partition::Member => "member",
            Partition::Nonmember => "nonmember",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub x0: Vec<f64>,
    pub cond: usize,
    pub partition: Partition,
}

impl Sample {
    pub fn example(&self) -> Example<'_> {
        Example { x0: &self.x0, class: self.cond }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub data_dim: usize,
    pub num_conditions: usize,
    pub generator_seed: u64,
}

impl SampleSet {
    /// Checks dense ids, dimensions and condition ranges. Partitions are
    /// disjoint by construction since each sample carries exactly one label.
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.num_conditions == 0 {
            return Err(Error::InvalidDataset("data_dim and num_conditions must be positive".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::InvalidDataset(format!("sample at position {i} has id {}", s.id)));
            }
            if s.x0.len() != self.data_dim {
                return Err(Error::InvalidDataset(format!("sample {i} has dimension {}", s.x0.len())));
            }
            if s.cond >= self.num_conditions {
                return Err(Error::InvalidDataset(format!("sample {i} has condition {}", s.cond)));
            }
            if !s.x0.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidDataset(format!("sample {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn partition(&self, p: Partition) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.partition == p).cloned().collect()
    }

    pub fn count(&self, p: Partition) -> usize {
        self.samples.iter().filter(|s| s.partition == p).count()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Shape of the synthetic mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub data_dim: usize,
    pub num_conditions: usize,
    pub n_pretrain: usize,
    pub n_member: usize,
    pub n_nonmember: usize,
}

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn draw_means<R: Rng + ?Sized>(rng: &mut R, data_dim: usize, num_conditions: usize) -> Vec<Vec<f64>> {
    (0..num_conditions)
        .map(|_| loop {
            let v = standard_normal_vec(rng, data_dim);
            let n = norm(&v);
            if n > 0.0 {
                break v.iter().map(|x| CLASS_MEAN_RADIUS * x / n).collect();
            }
        })
        .collect()
}

/// Class means of the mixture generated from `seed`; identical to the means
/// used by [`generate_mixture_dataset`] with the same seed.
pub fn mixture_means(data_dim: usize, num_conditions: usize, seed: u64) -> Vec<Vec<f64>> {
    draw_means(&mut seeded_rng(seed), data_dim, num_conditions)
}

/// Draws the class means once, then every sample i.i.d. from the mixture
/// (uniform class, isotropic blob), in pretrain, member, non-member order.
pub fn generate_mixture_dataset(spec: MixtureSpec, seed: u64) -> Result<SampleSet> {
    if spec.num_conditions == 0 {
        return Err(Error::InvalidConfig("mixture needs at least one class".into()));
    }
    if spec.data_dim == 0 {
        return Err(Error::InvalidConfig("data_dim must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let means = draw_means(&mut rng, spec.data_dim, spec.num_conditions);
    let std = libm::sqrt(CLASS_VARIANCE);
    let plan = [
        (Partition::Pretrain, spec.n_pretrain),
        (Partition::Member, spec.n_member),
        (Partition::Nonmember, spec.n_nonmember),
    ];
    let mut samples = Vec::with_capacity(spec.n_pretrain + spec.n_member + spec.n_nonmember);
    for (partition, n) in plan {
        for _ in 0..n {
            let cond = rng.random_range(0..spec.num_conditions);
            let x0 = means[cond].iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect();
            samples.push(Sample { id: samples.len(), x0, cond, partition });
        }
    }
    Ok(SampleSet { samples, data_dim: spec.data_dim, num_conditions: spec.num_conditions, generator_seed: seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_pretrain: usize, n_member: usize, n_nonmember: usize) -> MixtureSpec {
        MixtureSpec { data_dim: 16, num_conditions: 8, n_pretrain, n_member, n_nonmember }
    }

    #[test]
    fn pretrain_only() {
        let set = generate_mixture_dataset(spec(40, 0, 0), 1).unwrap();
        assert_eq!(set.len(), 40);
        assert!(set.samples.iter().all(|s| s.partition == Partition::Pretrain));
        set.validate().unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_mixture_dataset(spec(30, 10, 10), 42).unwrap();
        let b = generate_mixture_dataset(spec(30, 10, 10), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_mixture_dataset(spec(30, 10, 10), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partitions_are_counted_and_disjoint() {
        let set = generate_mixture_dataset(spec(50, 20, 30), 7).unwrap();
        assert_eq!(set.count(Partition::Pretrain), 50);
        assert_eq!(set.count(Partition::Member), 20);
        assert_eq!(set.count(Partition::Nonmember), 30);
        let members = set.partition(Partition::Member);
        let nonmembers = set.partition(Partition::Nonmember);
        assert!(members.iter().all(|m| nonmembers.iter().all(|n| n.id != m.id)));
    }

    #[test]
    fn zero_classes_rejected() {
        assert!(generate_mixture_dataset(MixtureSpec { num_conditions: 0, ..spec(1, 0, 0) }, 0).is_err());
    }

    #[test]
    fn means_lie_on_sphere() {
        for m in mixture_means(16, 8, 3) {
            assert!((norm(&m) - CLASS_MEAN_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_class_means_converge() {
        let set = generate_mixture_dataset(MixtureSpec { n_pretrain: 100_000, ..spec(0, 0, 0) }, 11).unwrap();
        let means = mixture_means(16, 8, 11);
        let mut sums = [[0.0; 16]; 8];
        let mut counts = [0usize; 8];
        for s in &set.samples {
            counts[s.cond] += 1;
            for (acc, v) in sums[s.cond].iter_mut().zip(&s.x0) {
                *acc += v;
            }
        }
        for c in 0..8 {
            let sigma = (CLASS_VARIANCE / counts[c] as f64).sqrt();
            for (d, m) in means[c].iter().enumerate() {
                let emp = sums[c][d] / counts[c] as f64;
                assert!((emp - m).abs() < 3.0 * sigma, "class {c} dim {d}: {emp} vs {m}");
            }
        }
    }

    #[test]
    fn validation_catches_bad_sets() {
        let mut set = generate_mixture_dataset(spec(5, 2, 2), 0).unwrap();
        set.samples[3].id = 9;
        assert!(set.validate().is_err());
        let mut set = generate_mixture_dataset(spec(5, 2, 2), 0).unwrap();
        set.samples[1].cond = 8;
        assert!(set.validate().is_err());
        let mut set = generate_mixture_dataset(spec(5, 2, 2), 0).unwrap();
        set.samples[1].x0.pop();
        assert!(set.validate().is_err());
    }
}
