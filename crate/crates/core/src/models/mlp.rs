//! Flat MLP baseline mapping a source string directly to target characters.
//!
//! `embed(d_emb) -> flatten -> n x [linear(d_hidden) -> ReLU -> LayerNorm] -> linear(L * |Σ|)`,
//! with the output read as `L` independent distributions over the alphabet.

use serde::{Deserialize, Serialize};

use super::{ForwardPass, Model, Registry, INIT_STD};
use crate::error::{Error, Result};
use crate::mapgen::StringSpec;
use crate::numerics::{ParameterStore, Real, Tape};
use crate::rng::PortableRng;
use crate::textcodec::Direction;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub d_emb: usize,
    pub n_hidden_layers: usize,
    pub d_hidden: usize,
}

impl MlpConfig {
    pub fn for_spec(spec: &StringSpec) -> Self {
        MlpConfig {
            seq_len: spec.length(),
            vocab_size: spec.alphabet_size(),
            d_emb: 64,
            n_hidden_layers: 4,
            d_hidden: 512,
        }
    }

    pub fn tiny(seq_len: usize, vocab_size: usize) -> Self {
        MlpConfig {
            seq_len,
            vocab_size,
            d_emb: 4,
            n_hidden_layers: 4,
            d_hidden: 8,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.seq_len * self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.d_emb == 0 || self.d_hidden == 0 || self.n_hidden_layers == 0 {
            return Err(Error::config("MLP dimensions must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("MLP vocab_size must be at least 2"));
        }
        Ok(())
    }
}

/// Raw alphabet indices of a source string and its target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl MlpExample {
    pub fn from_pair(a: &str, b: &str, direction: Direction, spec: &StringSpec) -> Result<Self> {
        let (src, tgt) = direction.orient(a, b);
        let ids = |s: &str| -> Result<Vec<u32>> {
            Ok(spec.char_ids(s)?.into_iter().map(|i| i as u32).collect())
        };
        Ok(MlpExample {
            source: ids(src)?,
            target: ids(tgt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Mlp { config })
    }
}

impl Model for Mlp {
    type Example = MlpExample;

    fn scratch_params(&self, seed: u64) -> Result<ParameterStore<f32>> {
        let c = &self.config;
        let mut r = Registry::new(seed);
        r.normal("emb", &[c.vocab_size, c.d_emb], 1.0)?;
        let mut width = c.seq_len * c.d_emb;
        for i in 0..c.n_hidden_layers {
            r.normal(&format!("l{i}.w"), &[c.d_hidden, width], INIT_STD)?;
            r.constant(&format!("l{i}.b"), &[c.d_hidden], 0.0)?;
            r.layer_norm(&format!("l{i}.ln"), c.d_hidden)?;
            width = c.d_hidden;
        }
        r.normal("out.w", &[c.output_dim(), width], INIT_STD)?;
        r.constant("out.b", &[c.output_dim()], 0.0)?;
        Ok(r.store)
    }

    /// Mean cross-entropy over all `L` output positions of every example.
    fn forward<F: Real>(
        &self,
        params: &ParameterStore<F>,
        batch: &[&MlpExample],
        _rng: Option<&mut PortableRng>,
    ) -> Result<ForwardPass<F>> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let n = batch.len();
        let mut ids = Vec::with_capacity(n * c.seq_len);
        let mut targets = Vec::with_capacity(n * c.seq_len);
        for ex in batch {
            if ex.source.len() != c.seq_len || ex.target.len() != c.seq_len {
                return Err(Error::shape(format!(
                    "MLP example lengths ({}, {}) differ from seq_len {}",
                    ex.source.len(),
                    ex.target.len(),
                    c.seq_len
                )));
            }
            for (&s, &t) in ex.source.iter().zip(&ex.target) {
                if s as usize >= c.vocab_size || t as usize >= c.vocab_size {
                    return Err(Error::shape("character id outside the MLP alphabet"));
                }
                ids.push(s as usize);
                targets.push(t as usize);
            }
        }
        let mut tape = Tape::new();
        let emb = tape.param(params, "emb")?;
        let e = tape.embedding(emb, &ids)?;
        let mut x = tape.reshape(e, &[n, c.seq_len * c.d_emb])?;
        for i in 0..c.n_hidden_layers {
            let w = tape.param(params, &format!("l{i}.w"))?;
            let b = tape.param(params, &format!("l{i}.b"))?;
            let g = tape.param(params, &format!("l{i}.ln.g"))?;
            let gb = tape.param(params, &format!("l{i}.ln.b"))?;
            let h = tape.linear(x, w, Some(b))?;
            let h = tape.relu(h)?;
            x = tape.layer_norm(h, g, gb, LN_EPS)?;
        }
        let w = tape.param(params, "out.w")?;
        let b = tape.param(params, "out.b")?;
        let out = tape.linear(x, w, Some(b))?;
        let logits = tape.reshape(out, &[n * c.seq_len, c.vocab_size])?;
        let mask = vec![true; targets.len()];
        let loss = tape.masked_cross_entropy(logits, &targets, &mask)?;
        let loss_value = tape.scalar(loss)?;
        Ok(ForwardPass {
            tape,
            loss,
            logits,
            loss_value,
            count: targets.len(),
        })
    }
}
