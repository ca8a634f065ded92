//! Model families trained by the lab: a GPT-2-style causal Transformer, a
//! flat MLP baseline and low-rank adapters for the Transformer's attention.

pub mod lora;
pub mod mlp;
pub mod transformer;

use std::path::PathBuf;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::load_checkpoint;
use crate::numerics::{DenseArray, ParameterStore, Real, Tape, Var};
use crate::rng::{derived_rng, PortableRng};

pub use lora::{lora_wrap, LoraConfig, LORA_PREFIX};
pub use mlp::{Mlp, MlpConfig, MlpExample};
pub use transformer::{Transformer, TransformerConfig};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    Scratch,
    FromCheckpoint(PathBuf),
}

/// A recorded forward computation. `loss` is the mean cross-entropy over
/// supervised positions of the batch, `count` the number of those positions.
pub struct ForwardPass<F> {
    pub tape: Tape<F>,
    pub loss: Var,
    pub logits: Var,
    pub loss_value: f64,
    pub count: usize,
}

pub trait Model: Send + Sync {
    type Example: Send + Sync;

    fn scratch_params(&self, seed: u64) -> Result<ParameterStore<f32>>;

    /// Train mode when `rng` is given (dropout active), evaluation otherwise.
    fn forward<F: Real>(
        &self,
        params: &ParameterStore<F>,
        batch: &[&Self::Example],
        rng: Option<&mut PortableRng>,
    ) -> Result<ForwardPass<F>>;

    fn init(&self, seed: u64, init: &Init) -> Result<ParameterStore<f32>> {
        match init {
            Init::Scratch => self.scratch_params(seed),
            Init::FromCheckpoint(path) => {
                let loaded: ParameterStore<f32> = load_checkpoint(path)?;
                let reference = self.scratch_params(seed)?;
                check_layout(&reference, &loaded, path)?;
                Ok(loaded)
            }
        }
    }
}

/// Every entry of `reference` must be present in `loaded` with the same shape.
fn check_layout(
    reference: &ParameterStore<f32>,
    loaded: &ParameterStore<f32>,
    path: &std::path::Path,
) -> Result<()> {
    for (name, p) in reference.iter() {
        let got = loaded.get(name).map_err(|_| Error::Load {
            path: path.to_path_buf(),
            reason: format!("missing parameter {name:?}"),
        })?;
        if got.value.shape() != p.value.shape() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                reason: format!(
                    "parameter {name:?} has shape {:?}, model expects {:?}",
                    got.value.shape(),
                    p.value.shape()
                ),
            });
        }
    }
    Ok(())
}

pub(crate) fn normal_array(shape: &[usize], std: f64, seed: u64, name: &str) -> DenseArray<f32> {
    let mut rng = derived_rng(seed, &["init", name]);
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
    DenseArray::from_vec(shape, data).expect("shape matches data")
}

/// Builder that registers parameters with their decay tag.
pub(crate) struct Registry {
    pub store: ParameterStore<f32>,
    seed: u64,
}

impl Registry {
    pub fn new(seed: u64) -> Self {
        Registry {
            store: ParameterStore::new(),
            seed,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let v = normal_array(shape, std, self.seed, name);
        self.store.insert(name, v, true, true)
    }

    /// Biases and norm parameters are exempt from weight decay.
    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        self.store.insert(name, DenseArray::filled(shape, value), true, false)
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{prefix}.g"), &[dim], 1.0)?;
        self.constant(&format!("{prefix}.b"), &[dim], 0.0)
    }
}

pub(crate) fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} = {p} must lie in [0, 1)")))
    }
}
