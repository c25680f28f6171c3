//! Optimization loop: masked cross-entropy, AdamW, halve-on-plateau learning
//! rate, and per-sample conditional dropout.

mod loss;
mod optim;
mod schedule;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::model::{backward, forward, Checkpoint, Condition, ConditionSet, ExtraTensor, ModelError, ModelParams, SeqInput};
use crate::tokenizer::TokenId;

pub use loss::{batch_ce_loss, masked_ce_loss, target_rows, LossOutput};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig};
pub use schedule::{halving_epochs, PlateauSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("sequence has fewer than two tokens")]
    EmptyTargets,
    #[error("non-finite loss at batch {batch_index}")]
    NonFiniteLoss { batch_index: u64 },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("no training examples")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub adamw: AdamWConfig,
    pub epochs: usize,
    pub cond_dropout_p: f64,
    pub seed: u64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_init: 4e-4,
            lr_factor: 0.5,
            plateau_patience: 3,
            adamw: AdamWConfig::default(),
            epochs: 50,
            cond_dropout_p: 0.5,
            seed: 0,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return bad("lr_init must be positive");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return bad("cond_dropout_p must lie in [0, 1]");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("lr_factor must lie in (0, 1]");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || a.weight_decay < 0.0 {
            return bad("invalid AdamW hyperparameters");
        }
        Ok(())
    }
}

/// One training sequence with its (transformed) conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub conditions: ConditionSet,
}

/// Drops each present condition independently with probability `p`; the
/// formula is dropped as a unit.
pub fn apply_conditional_dropout(cs: &ConditionSet, p: f64, rng: &mut dyn RngCore) -> ConditionSet {
    let mut out = cs.clone();
    for c in Condition::ALL {
        if cs.is_present(c) && rng.random::<f64>() < p {
            out.remove(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub n_targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamW<f32>,
    pub schedule: PlateauSchedule,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    step: u64,
    adam_t: u64,
    schedule: PlateauSchedule,
    rng: ChaCha8Rng,
    train_config: TrainConfig,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>, cfg: &TrainConfig) -> Self {
        let n = params.num_params();
        Self {
            params,
            adam: AdamW::new(n),
            schedule: PlateauSchedule::new(cfg.lr_init, cfg.lr_factor, cfg.plateau_patience),
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr
    }

    pub fn to_checkpoint(&self, vocab_hash: &str, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.clone(), vocab_hash);
        for (prefix, buf) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for e in &self.params.layout.entries {
                c.extras.push(ExtraTensor {
                    name: format!("{prefix}{}", e.name),
                    shape: e.shape.clone(),
                    data: buf[e.range.clone()].to_vec(),
                });
            }
        }
        let meta = StateMeta {
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            schedule: self.schedule.clone(),
            rng: self.rng.clone(),
            train_config: cfg.clone(),
        };
        c.meta = serde_json::to_value(meta).expect("state serializes");
        c
    }

    /// Restores a state written by [`to_checkpoint`](Self::to_checkpoint).
    /// Checkpoints without optimizer state start fresh moments.
    pub fn from_checkpoint(c: Checkpoint, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let mut s = Self::new(c.params, cfg);
        let Ok(meta) = serde_json::from_value::<StateMeta>(c.meta) else {
            return Ok(s);
        };
        for e in &s.params.layout.entries {
            for (prefix, buf) in [("adam.m.", &mut s.adam.m), ("adam.v.", &mut s.adam.v)] {
                let name = format!("{prefix}{}", e.name);
                let t = c.extras.iter().find(|x| x.name == name).ok_or_else(|| {
                    TrainError::Model(ModelError::Checkpoint(format!("missing optimizer tensor {name}")))
                })?;
                if t.data.len() != e.range.len() {
                    return Err(TrainError::Model(ModelError::Checkpoint(format!("bad size for {name}"))));
                }
                buf[e.range.clone()].copy_from_slice(&t.data);
            }
        }
        s.epoch = meta.epoch;
        s.step = meta.step;
        s.adam.t = meta.adam_t;
        s.schedule = meta.schedule;
        s.rng = meta.rng;
        Ok(s)
    }
}

/// One forward/backward/AdamW update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[Example], cfg: &TrainConfig) -> Result<StepMetrics, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let conds: Vec<ConditionSet> =
        batch.iter().map(|e| apply_conditional_dropout(&e.conditions, cfg.cond_dropout_p, &mut state.rng)).collect();
    let inputs: Vec<SeqInput> =
        batch.iter().zip(&conds).map(|(e, c)| SeqInput { tokens: &e.tokens, conditions: c }).collect();
    let graph = forward(&state.params, &inputs, Some(&mut state.rng))?;
    let toks: Vec<&[TokenId]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let out = batch_ce_loss(&graph.logits, graph.vocab_size, &graph.spans, &toks)?;
    if !out.loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { batch_index: state.step });
    }
    let mut grads = backward(&state.params, &graph, &out.dlogits);
    let norm = clip_grad_norm(&mut grads.data, cfg.grad_clip_norm);
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteLoss { batch_index: state.step });
    }
    state.adam.step(&mut state.params.data, &grads.data, state.schedule.lr, &cfg.adamw);
    state.step += 1;
    Ok(StepMetrics { loss: out.loss, grad_norm: norm, accuracy: out.n_correct as f64 / out.n_targets as f64 })
}

/// Eval-mode loss and argmax accuracy, averaged over all targets.
pub fn evaluate(params: &ModelParams<f32>, examples: &[Example], batch_size: usize) -> Result<EvalMetrics, TrainError> {
    let mut total = 0.0;
    let mut n = 0;
    let mut correct = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let inputs: Vec<SeqInput> =
            chunk.iter().map(|e| SeqInput { tokens: &e.tokens, conditions: &e.conditions }).collect();
        let graph = forward(params, &inputs, None)?;
        let toks: Vec<&[TokenId]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let out = batch_ce_loss(&graph.logits, graph.vocab_size, &graph.spans, &toks)?;
        total += out.loss * out.n_targets as f64;
        n += out.n_targets;
        correct += out.n_correct;
    }
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(EvalMetrics { loss: total / n as f64, accuracy: correct as f64 / n as f64, n_targets: n })
}

pub const METRICS_HEADER: &str = "epoch,step,train_loss,val_loss,lr,grad_norm";

/// Where [`fit`] writes checkpoints and the metrics log.
pub struct FitOutput<'a> {
    pub dir: &'a Path,
    pub vocab_hash: &'a str,
}

fn metrics_line(m: &EpochMetrics) -> String {
    let val = m.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!("{},{},{:.6},{},{:e},{:.6}", m.epoch, m.step, m.train_loss, val, m.lr, m.grad_norm)
}

/// Trains from `state.epoch` up to `cfg.epochs`. After each epoch the
/// validation loss drives the plateau schedule, and with `output` set a
/// checkpoint and the cumulative `metrics.csv` are written.
pub fn fit(
    state: &mut TrainState,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    output: Option<FitOutput>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut history = Vec::new();
    let log_path = output.as_ref().map(|o| o.dir.join("metrics.csv"));
    let mut log = match &log_path {
        Some(p) if p.exists() => std::fs::read_to_string(p).map_err(|e| TrainError::Io(e.to_string()))?,
        _ => format!("{METRICS_HEADER}\n"),
    };
    while state.epoch < cfg.epochs {
        // a fresh permutation each epoch, so a resumed run matches an uninterrupted one
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let lr = state.schedule.lr;
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            let m = train_step(state, &batch, cfg)?;
            loss_sum += m.loss;
            norm_sum += m.grad_norm;
            steps += 1;
        }
        let val_loss = if val.is_empty() { None } else { Some(evaluate(&state.params, val, cfg.batch_size)?.loss) };
        if let Some(v) = val_loss {
            state.schedule.observe(v);
        }
        state.epoch += 1;
        let m = EpochMetrics {
            epoch: state.epoch,
            step: state.step,
            train_loss: loss_sum / steps as f64,
            val_loss,
            lr,
            grad_norm: norm_sum / steps as f64,
        };
        log::info!("{}", metrics_line(&m));
        if let (Some(o), Some(p)) = (&output, &log_path) {
            log.push_str(&metrics_line(&m));
            log.push('\n');
            let ckpt = state.to_checkpoint(o.vocab_hash, cfg);
            ckpt.save(&o.dir.join(format!("epoch-{:03}.ckpt", state.epoch)))?;
            ckpt.save(&o.dir.join("last.ckpt"))?;
            atomic_write(p, log.as_bytes()).map_err(|e| TrainError::Io(e.to_string()))?;
        }
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}
