//! Low-rank adapters on attention projections.
//!
//! For a frozen weight `W` of shape `[m, n]` the adapted projection is
//! `W + (alpha / r) * B A` with `A: [r, n]` and `B: [m, r]`. Adapter entries live
//! under the `lora.` prefix so checkpoints keep them apart from base weights.

use serde::{Deserialize, Serialize};

use super::{check_prob, normal_array, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, ParameterStore};
use crate::rng::derive_seed;

pub const LORA_PREFIX: &str = "lora.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Suffixes of projection names to adapt.
    pub targets: Vec<String>,
    /// Permit ranks above the smaller side of a targeted matrix.
    #[serde(default)]
    pub allow_overcomplete: bool,
}

impl LoraConfig {
    /// Attention qkv and output projections, `alpha = r`, adapter dropout 0.05.
    pub fn new(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: rank as f64,
            dropout: 0.05,
            targets: vec!["attn.c_attn".into(), "attn.c_proj".into()],
            allow_overcomplete: false,
        }
    }

    pub fn overcomplete(mut self, allow: bool) -> Self {
        self.allow_overcomplete = allow;
        self
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("LoRA alpha must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("LoRA needs at least one target"));
        }
        check_prob("lora dropout", self.dropout)
    }

    fn targets_weight(&self, name: &str) -> Option<String> {
        let prefix = name.strip_suffix(".w")?;
        self.targets
            .iter()
            .any(|t| prefix == t || prefix.ends_with(&format!(".{t}")))
            .then(|| prefix.to_string())
    }
}

/// Names of the `A` and `B` factors adapting the projection `prefix`.
pub fn adapter_names(prefix: &str) -> (String, String) {
    (
        format!("{LORA_PREFIX}{prefix}.a"),
        format!("{LORA_PREFIX}{prefix}.b"),
    )
}

/// Freezes every base entry and adds trainable factors for each targeted
/// projection. `B` starts at zero so the wrapped model matches the base.
pub fn lora_wrap(
    base: &ParameterStore<f32>,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    if base.names().any(|n| n.starts_with(LORA_PREFIX)) {
        return Err(Error::config("store already carries LoRA adapters"));
    }
    let mut out = base.clone();
    out.set_all_trainable(false);
    let r = cfg.rank;
    let init_seed = derive_seed(seed, &["lora"]);
    let mut wrapped = 0;
    for (name, p) in base.iter() {
        let Some(prefix) = cfg.targets_weight(name) else {
            continue;
        };
        let shape = p.value.shape();
        let (m, n) = (shape[0], shape[1]);
        if r > m.min(n) && !cfg.allow_overcomplete {
            return Err(Error::config(format!(
                "LoRA rank {r} exceeds the smaller dimension of {name} {shape:?}"
            )));
        }
        let (a_name, b_name) = adapter_names(&prefix);
        let a = normal_array(&[r, n], INIT_STD, init_seed, &a_name);
        out.insert(a_name, a, true, true)?;
        out.insert(b_name, DenseArray::zeros(&[m, r]), true, true)?;
        wrapped += 1;
    }
    if wrapped == 0 {
        return Err(Error::config(format!(
            "base store has no projection matching {:?}",
            cfg.targets
        )));
    }
    Ok(out)
}
