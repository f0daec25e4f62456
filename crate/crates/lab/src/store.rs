//! Typed artifacts stored in the binary container: datasets, checkpoints and
//! semantic noise states.

use std::path::Path;

use noisemia_core::data::{Partition, Sample, SampleSet};
use noisemia_core::denoiser::{Architecture, DenoiserModel};

use crate::container::{Container, Digest, FormatError, Kind};

fn to_usize(v: u64, what: &str) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| FormatError::Invalid(format!("{what} {v} does not fit in usize")))
}

fn expect_shape(c: &Container, shape: &[u64]) -> Result<(), FormatError> {
    if c.shape != shape {
        return Err(FormatError::Invalid(format!("shape {:?}, expected {shape:?}", c.shape)));
    }
    Ok(())
}

const DATASET_HEADER: usize = 4;

pub fn dataset_container(set: &SampleSet, digest: Digest) -> Container {
    let n = set.samples.len();
    let mut ints = Vec::with_capacity(DATASET_HEADER + 3 * n);
    ints.extend([set.data_dim as u64, set.num_conditions as u64, set.generator_seed, n as u64]);
    for s in &set.samples {
        ints.extend([s.id as u64, s.cond as u64, u64::from(s.partition.tag())]);
    }
    let data = set.samples.iter().flat_map(|s| s.x0.iter().copied()).collect();
    Container { kind: Kind::Dataset, digest, ints, shape: vec![n as u64, set.data_dim as u64], data }
}

pub fn dataset_from_container(c: &Container) -> Result<SampleSet, FormatError> {
    let header = c.ints.get(..DATASET_HEADER).ok_or(FormatError::Truncated)?;
    let data_dim = to_usize(header[0], "data_dim")?;
    let num_conditions = to_usize(header[1], "num_conditions")?;
    let n = to_usize(header[3], "sample count")?;
    if c.ints.len() != DATASET_HEADER + 3 * n {
        return Err(FormatError::Invalid(format!("{} metadata words for {n} samples", c.ints.len())));
    }
    expect_shape(c, &[n as u64, data_dim as u64])?;
    let mut samples = Vec::with_capacity(n);
    for (i, meta) in c.ints[DATASET_HEADER..].chunks_exact(3).enumerate() {
        let tag = u8::try_from(meta[2]).map_err(|_| FormatError::Invalid(format!("partition tag {}", meta[2])))?;
        let partition = Partition::from_tag(tag).map_err(|e| FormatError::Invalid(e.to_string()))?;
        samples.push(Sample {
            id: to_usize(meta[0], "sample id")?,
            cond: to_usize(meta[1], "condition")?,
            partition,
            x0: c.data[i * data_dim..(i + 1) * data_dim].to_vec(),
        });
    }
    let set = SampleSet { samples, data_dim, num_conditions, generator_seed: header[2] };
    set.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(set)
}

pub fn save_dataset(path: &Path, set: &SampleSet, digest: Digest) -> Result<(), FormatError> {
    dataset_container(set, digest).write(path)
}

pub fn load_dataset(path: &Path) -> Result<(SampleSet, Digest), FormatError> {
    let c = Container::read(path, Kind::Dataset)?;
    Ok((dataset_from_container(&c)?, c.digest))
}

pub fn checkpoint_container(model: &DenoiserModel, digest: Digest) -> Container {
    let a = model.architecture();
    let ints = vec![
        a.data_dim as u64,
        a.num_conditions as u64,
        a.time_embed_dim as u64,
        a.cond_embed_dim as u64,
        a.hidden_dim as u64,
        a.num_timesteps as u64,
        model.seed(),
    ];
    Container {
        kind: Kind::Checkpoint,
        digest,
        ints,
        shape: vec![model.param_count() as u64],
        data: model.weights().to_vec(),
    }
}

pub fn checkpoint_from_container(c: &Container) -> Result<DenoiserModel, FormatError> {
    let [dd, nc, te, ce, h, t, seed] = c.ints[..] else {
        return Err(FormatError::Invalid(format!("{} metadata words, expected 7", c.ints.len())));
    };
    let arch = Architecture {
        data_dim: to_usize(dd, "data_dim")?,
        num_conditions: to_usize(nc, "num_conditions")?,
        time_embed_dim: to_usize(te, "time_embed_dim")?,
        cond_embed_dim: to_usize(ce, "cond_embed_dim")?,
        hidden_dim: to_usize(h, "hidden_dim")?,
        num_timesteps: to_usize(t, "num_timesteps")?,
    };
    arch.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    expect_shape(c, &[arch.param_count() as u64])?;
    DenoiserModel::from_parts(arch, c.data.clone(), seed).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &DenoiserModel, digest: Digest) -> Result<(), FormatError> {
    checkpoint_container(model, digest).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, Digest), FormatError> {
    let c = Container::read(path, Kind::Checkpoint)?;
    Ok((checkpoint_from_container(&c)?, c.digest))
}

/// Semantic initial noise per sample, rows ordered as `sample_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStates {
    pub sample_ids: Vec<usize>,
    pub dim: usize,
    pub states: Vec<f64>,
}

impl NoiseStates {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn save_noise_states(path: &Path, noise: &NoiseStates, digest: Digest) -> Result<(), FormatError> {
    let n = noise.sample_ids.len() as u64;
    Container {
        kind: Kind::NoiseStates,
        digest,
        ints: noise.sample_ids.iter().map(|&i| i as u64).collect(),
        shape: vec![n, noise.dim as u64],
        data: noise.states.clone(),
    }
    .write(path)
}

pub fn load_noise_states(path: &Path) -> Result<(NoiseStates, Digest), FormatError> {
    let c = Container::read(path, Kind::NoiseStates)?;
    let [n, dim] = c.shape[..] else {
        return Err(FormatError::Invalid(format!("noise states must be rank 2, found {:?}", c.shape)));
    };
    if n != c.ints.len() as u64 {
        return Err(FormatError::Invalid(format!("{} ids for {n} rows", c.ints.len())));
    }
    let sample_ids = c.ints.iter().map(|&i| to_usize(i, "sample id")).collect::<Result<Vec<_>, _>>()?;
    Ok((NoiseStates { sample_ids, dim: to_usize(dim, "dim")?, states: c.data }, c.digest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use noisemia_core::data::{generate_mixture_dataset, MixtureSpec};

    fn set() -> SampleSet {
        generate_mixture_dataset(
            MixtureSpec { data_dim: 3, num_conditions: 2, n_pretrain: 5, n_member: 4, n_nonmember: 4 },
            11,
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let s = set();
        save_dataset(&path, &s, [1; 32]).unwrap();
        let (back, digest) = load_dataset(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(digest, [1; 32]);
    }

    #[test]
    fn dataset_validation_runs_at_load() {
        let mut c = dataset_container(&set(), [0; 32]);
        // Duplicate id: second sample claims id 0.
        c.ints[DATASET_HEADER + 3] = 0;
        assert!(dataset_from_container(&c).is_err());
        let mut c = dataset_container(&set(), [0; 32]);
        c.ints[DATASET_HEADER + 2] = 7;
        assert!(dataset_from_container(&c).is_err());
        let mut c = dataset_container(&set(), [0; 32]);
        c.ints[DATASET_HEADER + 1] = 2;
        assert!(dataset_from_container(&c).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        use noisemia_core::denoiser::{Condition, NoisePredictor};
        let arch = Architecture {
            data_dim: 3,
            num_conditions: 2,
            time_embed_dim: 4,
            cond_embed_dim: 2,
            hidden_dim: 5,
            num_timesteps: 10,
        };
        let m = DenoiserModel::init(arch, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m, [2; 32]).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        let x = [0.3, -1.0, 2.0];
        for cond in [Condition::Class(1), Condition::Null] {
            let a = m.predict_noise(&x, 4, cond).unwrap();
            let b = back.predict_noise(&x, 4, cond).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(back.seed(), 42);
    }

    #[test]
    fn noise_states_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.bin");
        let n = NoiseStates { sample_ids: vec![4, 9], dim: 2, states: vec![1.0, 2.0, -3.0, 0.5] };
        save_noise_states(&path, &n, [0; 32]).unwrap();
        let (back, _) = load_noise_states(&path).unwrap();
        assert_eq!(back, n);
        assert_eq!(back.row(1), &[-3.0, 0.5]);
    }
}
