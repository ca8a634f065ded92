//! Pre-LN causal Transformer with learned positions and a tied unembedding.
//!
//! Parameter names follow GPT-2: `wte`, `wpe`, `h{i}.ln_1`, `h{i}.attn.c_attn`,
//! `h{i}.attn.c_proj`, `h{i}.ln_2`, `h{i}.mlp.c_fc`, `h{i}.mlp.c_proj`, `ln_f`.
//! Linear weights are stored `[out, in]`.

use serde::{Deserialize, Serialize};

use super::lora::{adapter_names, LoraConfig};
use super::{check_prob, ForwardPass, Model, Registry, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Real, Tape, Var};
use crate::rng::PortableRng;
use crate::textcodec::TaskInstance;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub attn_dropout: f64,
    pub resid_dropout: f64,
    pub embd_dropout: f64,
}

impl TransformerConfig {
    /// Two layers of width 128 with four heads.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_len: 32,
            vocab_size,
            attn_dropout: 0.0,
            resid_dropout: 0.0,
            embd_dropout: 0.0,
        }
    }

    /// One layer of width 16, used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            vocab_size,
            ..Self::desk(vocab_size)
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.attn_dropout = p;
        self.resid_dropout = p;
        self.embd_dropout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        check_prob("attn_dropout", self.attn_dropout)?;
        check_prob("resid_dropout", self.resid_dropout)?;
        check_prob("embd_dropout", self.embd_dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub config: TransformerConfig,
    /// Adapter settings used when the store carries LoRA entries.
    pub lora: Option<LoraConfig>,
}

impl Transformer {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Transformer { config, lora: None })
    }

    pub fn with_lora(mut self, lora: LoraConfig) -> Self {
        self.lora = Some(lora);
        self
    }

    /// `x @ W^T + b` for the named projection, plus the low-rank update when
    /// the store holds adapters for it.
    fn project<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &ParameterStore<F>,
        x: Var,
        prefix: &str,
        rng: Option<&mut PortableRng>,
    ) -> Result<Var> {
        let w = tape.param(params, &format!("{prefix}.w"))?;
        let b = tape.param(params, &format!("{prefix}.b"))?;
        let y = tape.linear(x, w, Some(b))?;
        let (a_name, b_name) = adapter_names(prefix);
        if !params.contains(&a_name) {
            return Ok(y);
        }
        let cfg = self.lora.as_ref().ok_or_else(|| {
            Error::State(format!("store has adapters for {prefix} but the model has no LoRA config"))
        })?;
        let xin = tape.dropout(x, cfg.dropout, rng)?;
        let a = tape.param(params, &a_name)?;
        let bm = tape.param(params, &b_name)?;
        let h = tape.linear(xin, a, None)?;
        let u = tape.linear(h, bm, None)?;
        let u = tape.scale(u, cfg.scale())?;
        tape.add(y, u)
    }

    fn layer_norm<F: Real>(
        tape: &mut Tape<F>,
        params: &ParameterStore<F>,
        x: Var,
        prefix: &str,
    ) -> Result<Var> {
        let g = tape.param(params, &format!("{prefix}.g"))?;
        let b = tape.param(params, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

impl Model for Transformer {
    type Example = TaskInstance;

    fn scratch_params(&self, seed: u64) -> Result<ParameterStore<f32>> {
        let c = &self.config;
        let d = c.d_model;
        let mut r = Registry::new(seed);
        r.normal("wte", &[c.vocab_size, d], INIT_STD)?;
        r.normal("wpe", &[c.max_len, d], INIT_STD)?;
        for i in 0..c.n_layers {
            let h = format!("h{i}");
            r.layer_norm(&format!("{h}.ln_1"), d)?;
            r.normal(&format!("{h}.attn.c_attn.w"), &[3 * d, d], INIT_STD)?;
            r.constant(&format!("{h}.attn.c_attn.b"), &[3 * d], 0.0)?;
            r.normal(&format!("{h}.attn.c_proj.w"), &[d, d], INIT_STD)?;
            r.constant(&format!("{h}.attn.c_proj.b"), &[d], 0.0)?;
            r.layer_norm(&format!("{h}.ln_2"), d)?;
            r.normal(&format!("{h}.mlp.c_fc.w"), &[c.d_ff, d], INIT_STD)?;
            r.constant(&format!("{h}.mlp.c_fc.b"), &[c.d_ff], 0.0)?;
            r.normal(&format!("{h}.mlp.c_proj.w"), &[d, c.d_ff], INIT_STD)?;
            r.constant(&format!("{h}.mlp.c_proj.b"), &[d], 0.0)?;
        }
        r.layer_norm("ln_f", d)?;
        Ok(r.store)
    }

    /// Next-token prediction over each sequence, truncated to the longest
    /// supervised span in the batch. Position `t` predicts token `t + 1`.
    fn forward<F: Real>(
        &self,
        params: &ParameterStore<F>,
        batch: &[&TaskInstance],
        rng: Option<&mut PortableRng>,
    ) -> Result<ForwardPass<F>> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let seq = batch
            .iter()
            .map(|ex| ex.loss_mask.iter().rposition(|&m| m).map_or(0, |p| p + 1))
            .max()
            .unwrap_or(0);
        if seq < 2 {
            return Err(Error::EmptyTarget);
        }
        if seq > c.max_len {
            return Err(Error::shape(format!(
                "sequence of {seq} tokens exceeds max_len {}",
                c.max_len
            )));
        }
        let t = seq - 1;
        let rows = batch.len() * t;
        let mut ids = Vec::with_capacity(rows);
        let mut targets = Vec::with_capacity(rows);
        let mut mask = Vec::with_capacity(rows);
        for ex in batch {
            if ex.input_ids.len() < seq || ex.loss_mask.len() < seq {
                return Err(Error::shape("task instance shorter than the batch sequence"));
            }
            for p in 0..t {
                let (id, next) = (ex.input_ids[p] as usize, ex.input_ids[p + 1] as usize);
                if id >= c.vocab_size || next >= c.vocab_size {
                    return Err(Error::shape(format!(
                        "token id outside vocabulary of {}",
                        c.vocab_size
                    )));
                }
                ids.push(id);
                targets.push(next);
                mask.push(ex.loss_mask[p + 1]);
            }
        }
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..t).collect();

        let mut rng = rng;
        let mut tape = Tape::new();
        let wte = tape.param(params, "wte")?;
        let wpe = tape.param(params, "wpe")?;
        let tok = tape.embedding(wte, &ids)?;
        let pos = tape.embedding(wpe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = tape.dropout(x, c.embd_dropout, rng.as_deref_mut())?;
        for i in 0..c.n_layers {
            let h = format!("h{i}");
            let a = Self::layer_norm(&mut tape, params, x, &format!("{h}.ln_1"))?;
            let qkv = self.project(&mut tape, params, a, &format!("{h}.attn.c_attn"), rng.as_deref_mut())?;
            let att = tape.causal_attention(qkv, batch.len(), t, c.n_heads, c.attn_dropout, rng.as_deref_mut())?;
            let o = self.project(&mut tape, params, att, &format!("{h}.attn.c_proj"), rng.as_deref_mut())?;
            let o = tape.dropout(o, c.resid_dropout, rng.as_deref_mut())?;
            x = tape.add(x, o)?;

            let m = Self::layer_norm(&mut tape, params, x, &format!("{h}.ln_2"))?;
            let f = self.project(&mut tape, params, m, &format!("{h}.mlp.c_fc"), rng.as_deref_mut())?;
            let f = tape.gelu(f)?;
            let f = self.project(&mut tape, params, f, &format!("{h}.mlp.c_proj"), rng.as_deref_mut())?;
            let f = tape.dropout(f, c.resid_dropout, rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let x = Self::layer_norm(&mut tape, params, x, "ln_f")?;
        let logits = tape.linear(x, wte, None)?;
        let loss = tape.masked_cross_entropy(logits, &targets, &mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        let loss_value = tape.scalar(loss)?;
        Ok(ForwardPass {
            tape,
            loss,
            logits,
            loss_value,
            count,
        })
    }
}
