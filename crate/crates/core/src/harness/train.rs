use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ModelSpec, Regime, RunConfig, SurrogateConfig};
use crate::error::{Error, Result};
use crate::mapgen::{generate, MappingConfig, PairSet, StringSpec};
use crate::metrics::{FloorSpec, MetricsRecord, EXCESS_TOL};
use crate::models::{lora_wrap, Init, Mlp, MlpExample, Model, Transformer, TransformerConfig};
use crate::numerics::{clip_global_norm, ParameterStore};
use crate::optim::{lr_at, AdamW, OptimConfig};
use crate::par;
use crate::rng::{derive_seed, derived_rng};
use crate::textcodec::{encode_example, Direction, TaskInstance, Vocab};

pub const SCHEMA_VERSION: u32 = 1;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-token training loss over the epoch's batches, train mode.
    pub train_loss: f64,
    pub excess: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub config: SurrogateConfig,
    pub pairset_hash: String,
    /// Absent when the base came from a saved checkpoint.
    pub final_loss: Option<f64>,
    /// Source strings of the experiment that also occur in the pretraining pairs.
    pub a_overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub label: String,
    pub k: usize,
    pub regime: String,
    pub rank: Option<usize>,
    pub direction: Direction,
    pub model_family: String,
    pub pairset_hash: String,
    /// Final evaluation over the full training set with dropout off.
    pub metrics: MetricsRecord,
    /// Same evaluation summed over each target string.
    pub final_sequence_loss: f64,
    pub best_epoch_loss: f64,
    pub below_floor: bool,
    pub steps: usize,
    pub seconds: f64,
    pub params_total: usize,
    pub params_trainable: usize,
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
    pub surrogate: Option<SurrogateReport>,
    pub notes: Vec<String>,
    pub config: RunConfig,
}

impl RunRecord {
    pub fn final_loss(&self) -> f64 {
        self.metrics.observed_nats
    }

    pub fn excess(&self) -> f64 {
        self.metrics.excess_nats
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Last-epoch training loss is no higher than the first.
    pub fn loss_decreased(&self) -> bool {
        match (self.epochs.first(), self.epochs.last()) {
            (Some(a), Some(b)) => b.train_loss <= a.train_loss,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

pub(crate) struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
}

/// Fixed-budget training: per-epoch shuffles seeded from `(run_seed, epoch)`,
/// global-norm clipping, scheduled AdamW. Dropout draws from its own stream.
pub(crate) fn train<M: Model>(
    model: &M,
    store: &mut ParameterStore<f32>,
    data: &[M::Example],
    optim: &OptimConfig,
    run_seed: u64,
    floor: f64,
    progress: Option<&str>,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::config("no training examples"));
    }
    let per_epoch = optim.steps_per_epoch(data.len());
    let total = optim.total_steps(data.len());
    let mut opt = AdamW::new();
    let mut dropout_rng = derived_rng(run_seed, &["dropout"]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(optim.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..optim.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(run_seed, &["shuffle", &epoch.to_string()]));
        let (mut sum, mut count) = (0.0f64, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(optim.batch_size) {
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &data[i]).collect();
            store.zero_grads();
            let fp = model.forward(store, &batch, Some(&mut dropout_rng))?;
            fp.tape.backward_into(fp.loss, store)?;
            clip_global_norm(store, optim.clip_norm);
            lr = lr_at(step, total, optim);
            opt.step(store, lr, optim);
            step += 1;
            sum += fp.loss_value * fp.count as f64;
            count += fp.count;
            step_losses.push(fp.loss_value);
        }
        debug_assert_eq!(step, (epoch + 1) * per_epoch);
        let train_loss = sum / count as f64;
        if let Some(label) = progress {
            eprintln!("{label} epoch {:>3} loss {train_loss:.4} lr {lr:.2e}", epoch + 1);
        }
        epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss,
            excess: train_loss - floor,
            lr,
        });
    }
    store.ensure_finite()?;
    Ok(TrainLog {
        epochs,
        step_losses,
    })
}

/// Mean per-token loss over `data` in evaluation mode.
pub fn evaluate<M: Model>(model: &M, store: &ParameterStore<f32>, data: &[M::Example]) -> Result<f64> {
    let chunks: Vec<&[M::Example]> = data.chunks(EVAL_BATCH).collect();
    let parts = par::map_collect(&chunks, |chunk| -> Result<(f64, usize)> {
        let batch: Vec<&M::Example> = chunk.iter().collect();
        let fp = model.forward(store, &batch, None)?;
        Ok((fp.loss_value * fp.count as f64, fp.count))
    });
    let (mut sum, mut count) = (0.0, 0);
    for p in parts {
        let (s, c) = p?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(sum / count as f64)
}

pub fn task_instances(ps: &PairSet, direction: Direction, max_len: usize) -> Result<Vec<TaskInstance>> {
    let vocab = Vocab::for_spec(&ps.config.spec);
    ps.pairs
        .iter()
        .map(|(a, b)| encode_example(a, b, direction, &vocab, max_len))
        .collect()
}

pub fn mlp_examples(ps: &PairSet, direction: Direction) -> Result<Vec<MlpExample>> {
    ps.pairs
        .iter()
        .map(|(a, b)| MlpExample::from_pair(a, b, direction, &ps.config.spec))
        .collect()
}

/// Number of experiment source strings (the `A` side) present in `pretrain`.
pub fn a_overlap(pretrain: &PairSet, experiment: &PairSet) -> usize {
    let seen: std::collections::HashSet<&str> = pretrain.pairs.iter().map(|(a, _)| a.as_str()).collect();
    experiment
        .pairs
        .iter()
        .filter(|(a, _)| seen.contains(a.as_str()))
        .count()
}

pub fn surrogate_mapping(spec: &StringSpec, sur: &SurrogateConfig) -> MappingConfig {
    MappingConfig::new(spec.clone(), 1, sur.n_pairs, sur.seed)
}

/// Trains a scratch Transformer forward on the disjoint bijective mapping of
/// `sur` and returns its parameters.
pub fn surrogate_pretrain(
    model_cfg: &TransformerConfig,
    spec: &StringSpec,
    sur: &SurrogateConfig,
    max_len: usize,
    opts: &RunOptions,
) -> Result<(ParameterStore<f32>, SurrogateReport)> {
    let ps = generate(&surrogate_mapping(spec, sur))?;
    let model = Transformer::new(model_cfg.clone().with_dropout(0.0))?;
    let data = task_instances(&ps, Direction::Forward, max_len)?;
    let mut store = model.scratch_params(derive_seed(sur.seed, &["init"]))?;
    let optim = OptimConfig {
        base_lr: sur.lr,
        epochs: sur.epochs,
        ..OptimConfig::transformer()
    };
    let label = opts.progress.then_some("surrogate");
    train(&model, &mut store, &data, &optim, sur.seed, 0.0, label)?;
    let final_loss = evaluate(&model, &store, &data)?;
    let report = SurrogateReport {
        config: sur.clone(),
        pairset_hash: ps.content_hash(),
        final_loss: Some(final_loss),
        a_overlap: 0,
    };
    Ok((store, report))
}

/// Surrogate-pretrained base weights shared by several runs.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub store: ParameterStore<f32>,
    pub report: SurrogateReport,
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunRecord> {
    let ps = generate(&cfg.mapping).map_err(|e| wrap(cfg, e))?;
    run_on(cfg, &ps, None, &RunOptions::default())
}

/// Runs `cfg` on an already generated pair set, which must match `cfg.mapping`.
/// Regimes that need a base use `base` when given, then the configured
/// checkpoint, and otherwise pretrain the surrogate themselves.
pub fn run_on(
    cfg: &RunConfig,
    ps: &PairSet,
    base: Option<&Pretrained>,
    opts: &RunOptions,
) -> Result<RunRecord> {
    execute(cfg, ps, base, opts).map_err(|e| wrap(cfg, e))
}

fn wrap(cfg: &RunConfig, e: Error) -> Error {
    Error::Run {
        label: cfg.label(),
        config: serde_json::to_string(cfg).unwrap_or_default(),
        source: Box::new(e),
    }
}

fn execute(
    cfg: &RunConfig,
    ps: &PairSet,
    base: Option<&Pretrained>,
    opts: &RunOptions,
) -> Result<RunRecord> {
    cfg.validate()?;
    if ps.config != cfg.mapping {
        return Err(Error::config("pair set was generated from a different mapping config"));
    }
    let start = Instant::now();
    let floor = FloorSpec::new(cfg.direction, cfg.k())?;
    let label = cfg.label();
    let progress = opts.progress.then_some(label.as_str());
    let mut notes = Vec::new();
    let mut surrogate = None;

    let (log, eval_loss, params_total, params_trainable) = match &cfg.model {
        ModelSpec::Mlp(mc) => {
            let model = Mlp::new(mc.clone())?;
            let data = mlp_examples(ps, cfg.direction)?;
            let mut store = model.scratch_params(derive_seed(cfg.run_seed, &["init"]))?;
            let log = train(&model, &mut store, &data, &cfg.optim, cfg.run_seed, floor.floor_nats, progress)?;
            let eval = evaluate(&model, &store, &data)?;
            (log, eval, store.total_count(), store.trainable_count())
        }
        ModelSpec::Transformer(tc) => {
            let mut model = Transformer::new(tc.clone())?;
            let data = task_instances(ps, cfg.direction, cfg.max_len)?;
            let init_seed = derive_seed(cfg.run_seed, &["init"]);
            let mut store = if !cfg.regime.needs_base() {
                model.scratch_params(init_seed)?
            } else if let Some(pre) = base {
                if cfg.surrogate.as_ref() != Some(&pre.report.config) {
                    return Err(Error::config("shared base was pretrained with different surrogate settings"));
                }
                surrogate = Some(pre.report.clone());
                pre.store.clone()
            } else if let Some(path) = &cfg.base_checkpoint {
                notes.push(format!("initialized from checkpoint {}", path.display()));
                model.init(init_seed, &Init::FromCheckpoint(path.clone()))?
            } else {
                let sur = cfg.surrogate.as_ref().expect("validated");
                let (store, report) =
                    surrogate_pretrain(tc, &ps.config.spec, sur, cfg.max_len, opts)?;
                surrogate = Some(report);
                store
            };
            if cfg.regime.needs_base() {
                if let Some(sur) = &cfg.surrogate {
                    let pre = generate(&surrogate_mapping(&ps.config.spec, sur))?;
                    let overlap = a_overlap(&pre, ps);
                    notes.push(format!(
                        "base weights come from surrogate pretraining on a disjoint K=1 mapping \
                         (seed {}, {} pairs, {} epochs) instead of natural-language pretraining",
                        sur.seed, sur.n_pairs, sur.epochs
                    ));
                    if overlap > 0 {
                        notes.push(format!("warning: {overlap} source strings also occur in the pretraining pairs"));
                    }
                    match surrogate.as_mut() {
                        Some(r) => r.a_overlap = overlap,
                        None => {
                            surrogate = Some(SurrogateReport {
                                config: sur.clone(),
                                pairset_hash: pre.content_hash(),
                                final_loss: None,
                                a_overlap: overlap,
                            })
                        }
                    }
                }
            }
            if let Regime::Lora { .. } = cfg.regime {
                let lcfg = cfg.lora.clone().expect("validated");
                notes.push(format!(
                    "LoRA rank {} alpha {} on {:?}",
                    lcfg.rank, lcfg.alpha, lcfg.targets
                ));
                store = lora_wrap(&store, &lcfg, derive_seed(cfg.run_seed, &["lora"]))?;
                model = model.with_lora(lcfg);
            } else {
                store.set_all_trainable(true);
            }
            let log = train(&model, &mut store, &data, &cfg.optim, cfg.run_seed, floor.floor_nats, progress)?;
            let eval = evaluate(&model, &store, &data)?;
            (log, eval, store.total_count(), store.trainable_count())
        }
    };

    let metrics = MetricsRecord::new(eval_loss, &floor);
    let best_epoch_loss = log.epochs.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        label,
        k: cfg.k(),
        regime: cfg.regime_label().to_string(),
        rank: cfg.regime.rank(),
        direction: cfg.direction,
        model_family: cfg.model.family().to_string(),
        pairset_hash: ps.content_hash(),
        below_floor: metrics.below_floor(EXCESS_TOL),
        final_sequence_loss: eval_loss * ps.config.spec.length() as f64,
        metrics,
        best_epoch_loss,
        steps: log.step_losses.len(),
        seconds: start.elapsed().as_secs_f64(),
        params_total,
        params_trainable,
        epochs: log.epochs,
        step_losses: log.step_losses,
        surrogate,
        notes,
        config: cfg.clone(),
    })
}
