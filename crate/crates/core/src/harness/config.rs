use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mapgen::{MappingConfig, StringSpec};
use crate::models::{LoraConfig, MlpConfig, TransformerConfig};
use crate::optim::{lora_lr, OptimConfig};
use crate::rng::derive_seed;
use crate::textcodec::{Direction, Vocab, DEFAULT_MAX_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Scratch,
    Finetune,
    FinetuneReg,
    Lora { rank: usize },
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Finetune => "finetune",
            Regime::FinetuneReg => "finetune_reg",
            Regime::Lora { .. } => "lora",
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Regime::Lora { rank } => Some(*rank),
            _ => None,
        }
    }

    pub fn needs_base(&self) -> bool {
        !matches!(self, Regime::Scratch)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Lora { rank } => write!(f, "lora_r{rank}"),
            r => f.write_str(r.label()),
        }
    }
}

/// What the CLI calls a mode: a Transformer regime or the MLP baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Scratch,
    Finetune,
    FinetuneReg,
    Lora,
    Mlp,
}

impl Mode {
    pub const DEFAULT: [Mode; 4] = [Mode::Scratch, Mode::Finetune, Mode::FinetuneReg, Mode::Lora];

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Finetune => "finetune",
            Mode::FinetuneReg => "finetune_reg",
            Mode::Lora => "lora",
            Mode::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "scratch" => Ok(Mode::Scratch),
            "finetune" | "ft" => Ok(Mode::Finetune),
            "finetune_reg" | "ft_reg" => Ok(Mode::FinetuneReg),
            "lora" => Ok(Mode::Lora),
            "mlp" => Ok(Mode::Mlp),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Transformer(TransformerConfig),
    Mlp(MlpConfig),
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Transformer(_) => "transformer",
            ModelSpec::Mlp(_) => "mlp",
        }
    }
}

/// Pretraining on a disjoint bijective mapping, standing in for pretrained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mapping: MappingConfig,
    pub direction: Direction,
    pub regime: Regime,
    pub model: ModelSpec,
    pub optim: OptimConfig,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub surrogate: Option<SurrogateConfig>,
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    pub max_len: usize,
    pub run_seed: u64,
}

impl RunConfig {
    pub fn k(&self) -> usize {
        self.mapping.branching
    }

    /// `scratch`, `finetune`, `finetune_reg`, `lora` or `mlp`.
    pub fn regime_label(&self) -> &'static str {
        match self.model {
            ModelSpec::Mlp(_) => "mlp",
            ModelSpec::Transformer(_) => self.regime.label(),
        }
    }

    pub fn label(&self) -> String {
        let regime = match self.model {
            ModelSpec::Mlp(_) => "mlp".to_string(),
            ModelSpec::Transformer(_) => self.regime.to_string(),
        };
        format!("k{}_{}_{}", self.k(), regime, self.direction)
    }

    pub fn validate(&self) -> Result<()> {
        self.mapping.validate()?;
        self.optim.validate()?;
        match (&self.model, self.regime) {
            (ModelSpec::Mlp(m), Regime::Scratch) => {
                m.validate()?;
                if m.seq_len != self.mapping.spec.length() {
                    return Err(Error::config("MLP seq_len differs from the string length"));
                }
            }
            (ModelSpec::Mlp(_), r) => {
                return Err(Error::config(format!("the MLP baseline only trains from scratch, not {r}")));
            }
            (ModelSpec::Transformer(t), _) => t.validate()?,
        }
        if let Regime::Lora { rank } = self.regime {
            let l = self
                .lora
                .as_ref()
                .ok_or_else(|| Error::config("LoRA regime without LoRA settings"))?;
            if l.rank != rank {
                return Err(Error::config("LoRA settings disagree with the regime rank"));
            }
        }
        if self.regime.needs_base() && self.base_checkpoint.is_none() && self.surrogate.is_none() {
            return Err(Error::config(format!(
                "{} needs a base checkpoint or surrogate pretraining",
                self.regime
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Run seed shared by both directions of a `(K, mode)` cell.
pub fn default_run_seed(base_seed: u64, k: usize, mode_label: &str) -> u64 {
    derive_seed(base_seed, &["run", &k.to_string(), mode_label])
}

/// Per-K data seed, so every mode at one K trains on the same pairs.
pub fn data_seed(base_seed: u64, k: usize) -> u64 {
    derive_seed(base_seed, &["data", &k.to_string()])
}

/// Learning rate of the desk-scale Transformer. At 1e-4 a 2-layer model barely
/// moves off the uniform loss in 20 epochs of 4000 pairs.
pub const DESK_LR: f64 = 1e-3;

/// Scaled-down settings used by the suite when nothing is overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskPreset {
    pub spec: StringSpec,
    pub n_pairs: usize,
    pub max_len: usize,
    pub transformer: TransformerConfig,
    pub optim: OptimConfig,
    pub reg_dropout: f64,
    pub mlp_optim: OptimConfig,
}

impl Default for DeskPreset {
    fn default() -> Self {
        let spec = StringSpec::default();
        let vocab = Vocab::for_spec(&spec);
        DeskPreset {
            n_pairs: 4000,
            max_len: DEFAULT_MAX_LEN,
            transformer: TransformerConfig::desk(vocab.len()),
            optim: OptimConfig {
                base_lr: DESK_LR,
                ..OptimConfig::transformer()
            },
            reg_dropout: 0.1,
            mlp_optim: OptimConfig::mlp(),
            spec,
        }
    }
}

impl DeskPreset {
    pub fn mapping(&self, k: usize, base_seed: u64) -> MappingConfig {
        MappingConfig::new(self.spec.clone(), k, self.n_pairs, data_seed(base_seed, k))
    }

    /// Config for one mode at one K. `rank` is required for LoRA.
    pub fn run_config(
        &self,
        k: usize,
        mode: Mode,
        rank: Option<usize>,
        direction: Direction,
        base_seed: u64,
    ) -> Result<RunConfig> {
        let mapping = self.mapping(k, base_seed);
        let mut optim = self.optim.clone();
        let mut transformer = self.transformer.clone();
        let mut lora = None;
        let regime = match mode {
            Mode::Scratch | Mode::Mlp => Regime::Scratch,
            Mode::Finetune => Regime::Finetune,
            Mode::FinetuneReg => {
                transformer = transformer.with_dropout(self.reg_dropout);
                optim.weight_decay = OptimConfig::regularized().weight_decay;
                Regime::FinetuneReg
            }
            Mode::Lora => {
                let r = rank.ok_or_else(|| Error::config("LoRA mode needs a rank"))?;
                optim.base_lr = lora_lr(optim.base_lr, r);
                lora = Some(LoraConfig::new(r).overcomplete(true));
                Regime::Lora { rank: r }
            }
        };
        let model = match mode {
            Mode::Mlp => {
                optim = self.mlp_optim.clone();
                ModelSpec::Mlp(MlpConfig::for_spec(&self.spec))
            }
            _ => ModelSpec::Transformer(transformer),
        };
        let seed_label = match rank {
            Some(r) if mode == Mode::Lora => format!("lora_r{r}"),
            _ => mode.label().to_string(),
        };
        let surrogate = regime.needs_base().then(|| self.surrogate(base_seed));
        Ok(RunConfig {
            mapping,
            direction,
            regime,
            model,
            optim,
            lora,
            surrogate,
            base_checkpoint: None,
            max_len: self.max_len,
            run_seed: default_run_seed(base_seed, k, &seed_label),
        })
    }

    pub fn surrogate(&self, base_seed: u64) -> SurrogateConfig {
        SurrogateConfig {
            n_pairs: self.n_pairs,
            seed: derive_seed(base_seed, &["surrogate"]),
            epochs: self.optim.epochs,
            lr: self.optim.base_lr,
        }
    }
}
