use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::BatchStats;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Running-statistic momentum for batch norm (`new = m * old + (1 - m) * batch`).
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, updated by the optimizer.
    Weight,
    /// Batch-norm running statistic.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
    pub grad: Option<Tensor>,
}

/// Flat name -> tensor map in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                kind,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(shape_err!(
                "{name}: shape {:?}, expected {:?}",
                value.shape(),
                slot.value.shape()
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    /// Learnable scalars whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, p)| p.kind == ParamKind::Weight && k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Folds observed batch statistics into the running buffers of the batch
    /// norm named `prefix`.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats) -> Result<()> {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let t = self
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("missing buffer {name}")))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }

    /// Rounds every stored value through binary32 (the checkpoint precision).
    pub fn round_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.value.round_to_f32();
        }
    }
}

/// Seeded weight initialisation.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-style fan-in uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// rounded to binary32.
    pub fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        t.round_to_f32();
        t
    }
}
