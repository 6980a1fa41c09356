use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Saved state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named parameters in insertion order. The order is stable, which makes
/// checkpoints and optimizer state deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.entries.insert(name.into(), Param { value, kind });
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: Tensor) {
        self.insert(name, value, ParamKind::Trainable);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Binds a stored parameter on the tape as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?))
    }

    /// Binds a stored parameter as a constant (frozen for this pass).
    pub fn bind_frozen(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.constant(self.get(name)?.clone()))
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.get(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.get(&format!("{prefix}.running_var"))?.data().to_vec(),
        })
    }

    pub fn set_running_stats(&mut self, prefix: &str, stats: &RunningStats) -> Result<()> {
        self.get_mut(&format!("{prefix}.running_mean"))?
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.get_mut(&format!("{prefix}.running_var"))?
            .data_mut()
            .copy_from_slice(&stats.var);
        Ok(())
    }

    /// Copies every entry of `other` whose name exists here with the same shape.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, p) in other.iter() {
            if let Some(mine) = self.entries.get_mut(name) {
                if mine.value.shape() == p.value.shape() {
                    mine.value = p.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Mixes a run seed with a parameter name so every parameter draws from its own
/// stream. Networks that share parameter names then share initial values.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// He-normal convolution kernel `(C_out, C_in, k, k)`.
pub fn he_conv(seed: u64, name: &str, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    Tensor::normal(
        Shape::new(c_out, c_in, k, k),
        (2.0 / fan_in).sqrt(),
        &mut rng_for(seed, name),
    )
}

/// Uniform `±1/sqrt(F_in)` weights for a `(F_in, F_out)` linear layer.
pub fn linear_weights(seed: u64, name: &str, f_in: usize, f_out: usize) -> Tensor {
    let bound = 1.0 / (f_in as f64).sqrt();
    Tensor::uniform(Shape::new(f_in, f_out, 1, 1), -bound, bound, &mut rng_for(seed, name))
}

pub fn channel_vector(c: usize, value: f64) -> Tensor {
    Tensor::full(Shape::new(1, c, 1, 1), value)
}

/// Registers `gamma`, `beta` and running statistics for a batch-norm layer.
pub fn add_batch_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.trainable(format!("{prefix}.gamma"), channel_vector(c, 1.0));
    store.trainable(format!("{prefix}.beta"), channel_vector(c, 0.0));
    store.insert(format!("{prefix}.running_mean"), channel_vector(c, 0.0), ParamKind::Buffer);
    store.insert(format!("{prefix}.running_var"), channel_vector(c, 1.0), ParamKind::Buffer);
}
