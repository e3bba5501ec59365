//! Mini-batch SGD over the adapter with a cosine learning-rate decay.
//!
//! Each step weighs the batch with the maximum-probability score of the
//! frozen, unadapted model, then takes one gradient step on the enabled
//! parameter groups of the current model.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::UnlabeledPool;
use crate::error::{Error, Result};
use crate::model::{mcm_score, predict_probs, ClassHead, ModelState};
use crate::objectives::{entropy, loss_and_grad, AdapterGrad, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Prompt,
    AffineScale,
    AffineShift,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Prompt,
        ParamGroup::AffineScale,
        ParamGroup::AffineShift,
    ];
}

fn all_groups() -> BTreeSet<ParamGroup> {
    ParamGroup::ALL.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub param_groups: BTreeSet<ParamGroup>,
    pub loss: LossConfig,
    pub shuffle: bool,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            param_groups: all_groups(),
            loss: LossConfig::default(),
            shuffle: true,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("train config", m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.param_groups.is_empty() {
            return bad("at least one parameter group must be enabled".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        Ok(())
    }
}

/// `lr0 · (1 + cos(π t / T)) / 2`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_w: f64,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss,mean_w,mean_entropy\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.step, e.epoch, e.lr, e.loss, e.mean_w, e.mean_entropy
            );
        }
        out
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

struct Velocity {
    scale: Vec<f64>,
    shift: Vec<f64>,
    context: Vec<f64>,
}

fn sgd_step(
    state: &mut ModelState,
    grad: &AdapterGrad,
    velocity: &mut Velocity,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let update = |params: &mut [f64], g: &[f64], v: &mut [f64]| {
        for ((p, g), v) in params.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = cfg.momentum * *v + g;
            *p -= lr * *v;
        }
    };
    let adapter = state.adapter_mut()?;
    if cfg.param_groups.contains(&ParamGroup::AffineScale) {
        update(&mut adapter.scale, &grad.scale, &mut velocity.scale);
    }
    if cfg.param_groups.contains(&ParamGroup::AffineShift) {
        update(&mut adapter.shift, &grad.shift, &mut velocity.shift);
    }
    if cfg.param_groups.contains(&ParamGroup::Prompt) && !grad.context.is_empty() {
        let mut ctx = adapter.context_flat();
        update(&mut ctx, &grad.context, &mut velocity.context);
        adapter.set_context_flat(&ctx);
    }
    Ok(())
}

/// Adapts a fresh model on `pool` and returns the state after the last epoch.
///
/// `oracle_weights`, when given, replaces the frozen-model scores with fixed
/// per-row weights aligned with `pool`.
pub fn train(
    pool: &UnlabeledPool,
    head: ClassHead,
    cfg: &TrainConfig,
    oracle_weights: Option<&[f64]>,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    cfg.loss.validate(head.num_classes())?;
    let features = pool.features();
    if features.cols() != head.dim() {
        return Err(Error::Dimension {
            context: "training features",
            expected: head.dim(),
            actual: features.cols(),
        });
    }
    if let Some(w) = oracle_weights {
        if w.len() != pool.len() {
            return Err(Error::Dimension {
                context: "oracle weights",
                expected: pool.len(),
                actual: w.len(),
            });
        }
    }
    let reference = ModelState::frozen_reference(head.clone());
    let mut state = ModelState::new(head);
    let mut log = TrainLog::default();
    if pool.is_empty() || cfg.epochs == 0 {
        return Ok((state, log));
    }

    let n = pool.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let ctx_len = state.adapter().m * state.adapter().k;
    let d = state.head().dim();
    let mut velocity = Velocity {
        scale: vec![0.0; d],
        shift: vec![0.0; d],
        context: vec![0.0; ctx_len],
    };
    if n % cfg.batch_size == 1 || n == 1 {
        log::warn!("training pool of {n} leaves a single-sample batch every epoch");
    }

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch, cfg.shuffle);
        for idx in order.chunks(cfg.batch_size) {
            let batch = features.select_rows(idx);
            let w: Vec<f64> = match oracle_weights {
                Some(all) => idx.iter().map(|&i| all[i]).collect(),
                None => mcm_score(&predict_probs(&reference, &batch)?),
            };
            let lr = cosine_lr(step, total_steps, cfg.lr);
            let out = loss_and_grad(&cfg.loss, &state, &batch, &w)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let entropies: Vec<f64> = out.probs.iter_rows().map(entropy).collect::<Result<_>>()?;
            sgd_step(&mut state, &out.grad, &mut velocity, lr, cfg)?;
            log.entries.push(TrainLogEntry {
                step,
                epoch,
                lr,
                loss: out.loss,
                mean_w: w.iter().sum::<f64>() / w.len() as f64,
                mean_entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
            });
            step += 1;
        }
    }
    Ok((state, log))
}
