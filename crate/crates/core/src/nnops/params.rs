use indexmap::IndexMap;
use rand::Rng;

use super::tape::RunningUpdate;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

/// Named learnable tensors plus non-learnable buffers (batch-norm running
/// statistics). Names are dotted module paths such as `stage1.vpsa0.hc.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.buffers.iter_mut()
    }

    /// Number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Uniform(±sqrt(1/fan_in)) weight of shape `[cin, cout]`, zero bias.
    pub fn init_linear(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) {
        let bound = (1.0 / cin.max(1) as f64).sqrt();
        let w = (0..cin * cout)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::new(vec![cin, cout], w).expect("shape matches"),
        );
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        }
    }

    pub fn init_batchnorm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::filled(&[channels], 1.0));
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.prefix);
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::Config(format!("missing buffer `{key}`")))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }

    /// Rounds every parameter and buffer to the nearest `f32`.
    pub fn round_to_single(&mut self) {
        let tensors = self.params.values_mut().chain(self.buffers.values_mut());
        for t in tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
