//! Next-token training with AdamW, warmup plus cosine decay, global-norm
//! clipping and validation-loss checkpoint selection.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorSchema, Session, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{tokenize_history, Logits, LossSum, Model, ModelParams, Provenance, TokenSequence};
use crate::model::ops::log_sum_exp;
use crate::rng::{self, derive_seed};
use crate::tokenizer::ItemTokenizer;

/// Environment variable that forces single-threaded training and
/// evaluation.
pub const DETERMINISTIC_ENV: &str = "HIERGEN_DETERMINISTIC";

/// Sequences whose gradients are computed concurrently before being summed
/// in order; the sum is the same for any thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMask {
    /// Every next-token target, behavior and SID tokens alike.
    #[default]
    All,
    /// Only targets that are SID tokens.
    SidOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_mask: LossMask,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a new best validation loss
    /// (0 disables).
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            base_lr: 5e-4,
            min_lr: 1e-6,
            epochs: 200,
            warmup_fraction: 0.04,
            weight_decay: 0.01,
            seed: 0,
            loss_mask: LossMask::All,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("train.warmup_fraction must be in [0, 1), got {}", self.warmup_fraction)));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr && self.base_lr.is_finite()) {
            return Err(Error::Config("train learning rates need 0 <= min_lr <= base_lr".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.clip_norm must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup over `floor(warmup_fraction * total)` steps, then cosine
/// decay from `base_lr` to `min_lr` at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_fraction * total as f64).floor() as usize;
    if step < warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    if step == warmup || total <= warmup {
        return cfg.base_lr;
    }
    let progress = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Mean negative log-likelihood of `targets` over positions where
/// `loss_mask` is set.
pub fn ntp_loss(logits: &Logits, targets: &[u32], loss_mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows || loss_mask.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            loss_mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(loss_mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(r);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::Shape(format!("target {t} outside {} logits", row.len())));
        }
        sum += log_sum_exp(row) - row[t];
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("loss mask selects no positions".into()));
    }
    Ok(sum / n as f64)
}

/// AdamW with decoupled, multiplicative weight decay on matrices.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: ModelParams,
    v: ModelParams,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors) {
            let decays = p.is_matrix();
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + self.eps);
                if decays {
                    p.data[i] *= decay;
                }
                p.data[i] -= lr * update;
            }
        }
    }
}

/// One training or validation sequence with its supervised targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seq: TokenSequence,
    pub targets: Vec<Option<u32>>,
}

/// Next-token targets under `policy`; the last position has none.
pub fn next_token_targets(seq: &TokenSequence, policy: LossMask, sid_only_from: u32) -> Vec<Option<u32>> {
    let mut out: Vec<Option<u32>> = seq.tokens[1..]
        .iter()
        .map(|t| match policy {
            LossMask::All => Some(t.id),
            LossMask::SidOnly => (t.id >= sid_only_from).then_some(t.id),
        })
        .collect();
    out.push(None);
    out
}

/// Whole-user training samples from session lists.
pub fn build_train_samples<'a>(
    sequences: impl IntoIterator<Item = &'a [Session]>,
    schema: &BehaviorSchema,
    tokenizer: &ItemTokenizer,
    model: &crate::model::ModelConfig,
    policy: LossMask,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for sessions in sequences {
        let seq = tokenize_history(sessions, schema, tokenizer, model, model.max_tokens)?;
        if seq.len() < 2 {
            continue;
        }
        let targets = next_token_targets(&seq, policy, model.behavior_vocab() as u32);
        if targets.iter().any(Option::is_some) {
            out.push(Sample { seq, targets });
        }
    }
    Ok(out)
}

/// Validation samples: train plus validation sessions, supervised only on
/// tokens of the validation session.
pub fn build_val_samples(
    split: &SplitDataset,
    schema: &BehaviorSchema,
    tokenizer: &ItemTokenizer,
    model: &crate::model::ModelConfig,
    policy: LossMask,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for u in &split.users {
        let sessions = u.history_before_test();
        let seq = tokenize_history(&sessions, schema, tokenizer, model, model.max_tokens)?;
        let val = Provenance::History { session: u.val.index as u32 };
        let mut targets = next_token_targets(&seq, policy, model.behavior_vocab() as u32);
        for (t, tgt) in targets.iter_mut().enumerate() {
            if seq.tokens.get(t + 1).map(|x| x.provenance) != Some(val) {
                *tgt = None;
            }
        }
        if targets.iter().any(Option::is_some) {
            out.push(Sample { seq, targets });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Runs `f` on a single-threaded pool in deterministic mode, else on the
/// global pool.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    if deterministic_mode() {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    } else {
        f()
    }
}

/// Mean loss over all supervised positions of `samples`.
pub fn mean_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let parts = samples.par_iter().map(|s| model.sequence_loss(&s.seq, &s.targets)).collect::<Result<Vec<_>>>()?;
    let mut total = LossSum::default();
    parts.into_iter().for_each(|p| total.add(p));
    total.mean().ok_or_else(|| Error::Data("no supervised positions".into()))
}

fn batch_gradient(model: &Model, batch: &[&Sample]) -> Result<(ModelParams, LossSum)> {
    let mut grads = model.params().zeros_like();
    let mut loss = LossSum::default();
    for chunk in batch.chunks(GRAD_CHUNK) {
        let parts = chunk
            .par_iter()
            .map(|s| {
                let mut g = model.params().zeros_like();
                let l = model.sequence_loss_grad(&s.seq, &s.targets, &mut g)?;
                Ok((g, l))
            })
            .collect::<Result<Vec<_>>>()?;
        for (g, l) in parts {
            grads.add_assign(&g);
            loss.add(l);
        }
    }
    Ok((grads, loss))
}

/// Trains `model` and returns the parameters with the lowest validation
/// loss. One JSON record per epoch goes to `log`.
pub fn train(mut model: Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig, mut log: Option<&mut (dyn Write + Send)>) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("no validation samples".into()));
    }
    with_pool(move || {
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
        let total = steps_per_epoch * cfg.epochs;
        let mut opt = AdamW::new(model.params(), cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(usize, f64, ModelParams)> = None;
        let mut step = 0usize;
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng::seeded(derive_seed(cfg.seed, 0x5348_5546, epoch as u64)));
            let mut epoch_loss = LossSum::default();
            let mut lr = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
                let (mut grads, loss) = batch_gradient(&model, &batch)?;
                step += 1;
                if loss.count == 0 {
                    continue;
                }
                if !loss.nll.is_finite() {
                    return Err(Error::Diverged { epoch, step, msg: format!("batch loss {}", loss.nll) });
                }
                grads.scale(1.0 / loss.count as f64);
                let norm = grads.global_norm();
                if !norm.is_finite() {
                    return Err(Error::Diverged { epoch, step, msg: format!("gradient norm {norm}") });
                }
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
                lr = lr_at(step, total, cfg);
                opt.step(model.params_mut(), &grads, lr);
                epoch_loss.add(loss);
            }
            if !model.params().all_finite() {
                return Err(Error::Diverged { epoch, step, msg: "parameters became non-finite".into() });
            }
            let val_loss = mean_loss(&model, val)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged { epoch, step, msg: format!("validation loss {val_loss}") });
            }
            let rec = EpochRecord { epoch, step, lr, train_loss: epoch_loss.mean().unwrap_or(f64::NAN), val_loss };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            history.push(rec);
            if best.as_ref().is_none_or(|b| val_loss < b.1) {
                best = Some((epoch, val_loss, model.params().clone()));
            } else if cfg.patience > 0 && best.as_ref().is_some_and(|b| epoch - b.0 >= cfg.patience) {
                break;
            }
        }
        let (best_epoch, best_val_loss, params) = best.expect("at least one epoch ran");
        let config = model.config().clone();
        Ok(TrainReport { history, best_epoch, best_val_loss, model: Model::from_params(config, params)? })
    })
}
