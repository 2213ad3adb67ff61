//! The unlearning loop and toy-scale pretraining.
//!
//! Unlearning runs Adam over mini-batches of the forget set. Forget-set train
//! accuracy is measured before the first step and after every epoch; the
//! selected checkpoint is the last epoch whose accuracy strictly decreased
//! before `patience` consecutive epochs failed to. Task-vector runs fine-tune
//! for the whole budget and then negate.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, ForgetSet, LabeledSet, Split};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::losses::{
    build_objective, frozen_reference, loss_cross_entropy, ForgetBatch, LossConfig, Method,
    Temperature,
};
use crate::model::{labelled_accuracy, restore, snapshot, ParameterSnapshot, PromptSet, Trainable};
use crate::optim::{Adam, AdamConfig};
use crate::surgery::{
    apply_masked_update, apply_task_vector, compute_saliency_mask, compute_task_vector,
};
use crate::taxonomy::{ClassId, Granularity, Taxonomy};

// stream ids for seed-derived generators
const DATA_STREAM_BASE: u64 = 1 << 20;
const SWEEP_STREAM: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Consecutive non-improving epochs tolerated; `None` never stops early.
    pub early_stop_patience: Option<usize>,
    /// Extra history entries every this many steps; 0 records epochs only.
    pub eval_every: usize,
    /// Level at which forget-set train accuracy drives the stop rule.
    pub stop_level: Granularity,
}

impl TrainConfig {
    /// Desk-scale preset for the toy model: lr 1e-3, batch 32, 8 epochs.
    pub fn toy(method: Method) -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossConfig::for_method(method),
            early_stop_patience: Some(1),
            eval_every: 0,
            stop_level: Granularity::Fine,
        }
    }

    /// Full-scale preset: 8 epochs at the method's full-size learning rate.
    pub fn full_scale(method: Method) -> Self {
        TrainConfig {
            learning_rate: method.full_scale_learning_rate(),
            ..TrainConfig::toy(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Patience,
    Budget,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::Budget => "budget",
        })
    }
}

impl FromStr for StopReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patience" => Ok(StopReason::Patience),
            "budget" => Ok(StopReason::Budget),
            other => Err(Error::Validation(format!("unknown stop reason `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub forget_acc: f64,
}

#[derive(Debug, Clone)]
pub struct UnlearnResult {
    pub final_model: ParameterSnapshot,
    pub selected_checkpoint: ParameterSnapshot,
    pub selected_epoch: usize,
    pub history: Vec<HistoryEntry>,
    pub stop_reason: StopReason,
}

/// Forget-set train accuracy at `level`.
pub fn forget_accuracy<M: Trainable + ?Sized>(
    model: &M,
    forget: &ForgetSet,
    level: Granularity,
    prompts: &PromptSet,
) -> Result<f64> {
    let (scope, pairs): (&[ClassId], Vec<(&[f64], &ClassId)>) = match level {
        Granularity::Fine => (
            &forget.fine_scope,
            forget
                .records
                .iter()
                .map(|r| (r.input.as_slice(), &r.fine))
                .collect(),
        ),
        Granularity::Coarse => (
            &forget.coarse_scope,
            forget
                .records
                .iter()
                .map(|r| (r.input.as_slice(), &r.coarse))
                .collect(),
        ),
    };
    labelled_accuracy(model, &pairs, scope, prompts)
}

fn check_finite(step: usize, value: f64, grad: &[f64]) -> Result<()> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, loss: value });
    }
    Ok(())
}

/// Runs one unlearning job from the model's current parameters.
pub fn run_unlearning<M: Trainable + Clone>(
    model: &M,
    forget: &ForgetSet,
    prompts: &PromptSet,
    config: &TrainConfig,
) -> Result<UnlearnResult> {
    config.validate()?;
    if forget.is_empty() {
        return Err(Error::Evaluation("forget set is empty".into()));
    }
    let method = config.loss.method;
    let origin = snapshot(model, "origin");
    let reference = if method.uses_reference() {
        Some(frozen_reference(model, &origin)?)
    } else {
        None
    };
    let objective = build_objective(&config.loss, reference)?;
    let mut working = model.clone();

    let mask = if method == Method::SalUn {
        let whole = ForgetBatch::whole(forget, prompts);
        let m = compute_saliency_mask(model, &[whole], 1.0 - config.loss.salun_fraction)?;
        log::info!("saliency mask covers {:.4} of the parameters", m.coverage());
        Some(m)
    } else {
        None
    };

    let mut adam = Adam::new(
        AdamConfig::with_lr(config.learning_rate),
        working.num_parameters(),
    );
    let initial_loss = objective
        .evaluate(&working, &ForgetBatch::whole(forget, prompts))?
        .total
        .value;
    let acc0 = forget_accuracy(&working, forget, config.stop_level, prompts)?;
    let mut history = vec![HistoryEntry {
        step: 0,
        epoch: 0,
        loss: initial_loss,
        forget_acc: acc0,
    }];
    let mut selected = origin.clone();
    let mut selected_epoch = 0;
    let mut best_acc = acc0;
    let mut stale = 0;
    let mut stop_reason = StopReason::Budget;
    let mut step = 0;
    let mut order: Vec<usize> = (0..forget.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM_BASE + epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = ForgetBatch::from_set(forget, chunk, prompts);
            let out = objective.evaluate(&working, &batch)?;
            step += 1;
            check_finite(step, out.total.value, &out.total.grad)?;
            let delta = adam.delta(&out.total.grad);
            match &mask {
                Some(m) => apply_masked_update(&mut working, m, &delta)?,
                None => working
                    .parameters_mut()
                    .iter_mut()
                    .zip(&delta)
                    .for_each(|(p, d)| *p += d),
            }
            if working.parameters().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    loss: out.total.value,
                });
            }
            epoch_loss += out.total.value;
            batches += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                history.push(HistoryEntry {
                    step,
                    epoch,
                    loss: out.total.value,
                    forget_acc: forget_accuracy(&working, forget, config.stop_level, prompts)?,
                });
            }
        }
        let acc = forget_accuracy(&working, forget, config.stop_level, prompts)?;
        history.push(HistoryEntry {
            step,
            epoch,
            loss: epoch_loss / batches as f64,
            forget_acc: acc,
        });
        log::debug!(
            "epoch {epoch}: loss {:.6}, forget accuracy {acc:.4}",
            epoch_loss / batches as f64
        );

        if method == Method::TaskVector {
            continue;
        }
        if acc < best_acc {
            best_acc = acc;
            selected = snapshot(&working, format!("epoch-{epoch}"));
            selected_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if config.early_stop_patience.is_some_and(|p| stale >= p) {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }

    let mut final_model = snapshot(&working, format!("step-{step}"));
    if method == Method::TaskVector {
        let tv = compute_task_vector(&origin, &final_model)?;
        let negated = apply_task_vector(&origin, &tv, config.loss.tv_scale)?;
        final_model = negated.clone();
        selected = negated;
        selected_epoch = config.epochs;
    }
    Ok(UnlearnResult {
        final_model,
        selected_checkpoint: selected,
        selected_epoch,
        history,
        stop_reason,
    })
}

/// Seeded order of forget-set positions used to carve per-class budgets.
pub fn budget_order(forget: &ForgetSet, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..forget.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SWEEP_STREAM);
    order.shuffle(&mut rng);
    order
}

/// Independent runs, each restricted to the first `budget` records per
/// forget class of one seeded shuffle, so larger budgets contain smaller
/// ones. `evaluate` scores the selected checkpoint loaded into a model.
pub fn sample_budget_sweep<M, F>(
    model: &M,
    forget: &ForgetSet,
    prompts: &PromptSet,
    config: &TrainConfig,
    budgets: &[usize],
    mut evaluate: F,
) -> Result<Vec<(usize, MetricReport)>>
where
    M: Trainable + Clone,
    F: FnMut(&M) -> Result<MetricReport>,
{
    let available = forget.min_per_class();
    let order = budget_order(forget, config.seed);
    let mut out = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        if budget == 0 {
            return Err(Error::Config("sample budget must be >= 1".into()));
        }
        if budget > available {
            return Err(Error::Config(format!(
                "budget {budget} exceeds the {available} records available per forget class"
            )));
        }
        let subset = forget.restrict_per_class(&order, budget);
        let result = run_unlearning(model, &subset, prompts, config)?;
        let mut unlearned = model.clone();
        restore(&mut unlearned, &result.selected_checkpoint)?;
        out.push((budget, evaluate(&unlearned)?));
    }
    Ok(out)
}

/// Text form of a run history: one `step epoch loss forget_acc` line each.
pub fn history_to_text(history: &[HistoryEntry]) -> String {
    let mut out = String::from("# step\tepoch\tloss\tforget_acc\n");
    for h in history {
        let _ = writeln!(
            out,
            "{}\t{}\t{:?}\t{:?}",
            h.step, h.epoch, h.loss, h.forget_acc
        );
    }
    out
}

pub fn parse_history(text: &str, origin: &Path) -> Result<Vec<HistoryEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || {
            Error::parse(
                origin,
                format!(
                    "line {}: expected step, epoch, loss, forget_acc",
                    lineno + 1
                ),
            )
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(HistoryEntry {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            forget_acc: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Supervised pretraining of the toy model from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the coarse-label cross-entropy.
    pub coarse_weight: f64,
    /// Weight of the general-suite cross-entropy.
    pub general_weight: f64,
}

// Short and gentle on purpose: a model trained far past separability leaves
// cosine margins that the toy unlearning presets cannot undo in 8 epochs.
impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            coarse_weight: 1.0,
            general_weight: 1.0,
        }
    }
}

/// Trains fine and coarse cross-entropy on the manifest's train split, plus
/// cross-entropy on an optional flat general set so zero-shot preservation
/// has something to measure. The model must know every class involved.
pub fn pretrain_toy<M: Trainable>(
    model: &mut M,
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    general: Option<&LabeledSet>,
    prompts: &PromptSet,
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0.0) {
        return Err(Error::Config(
            "pretraining needs epochs, batch size and lr > 0".into(),
        ));
    }
    let train: Vec<_> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Evaluation("no training records".into()));
    }
    let fine = taxonomy.fine_classes();
    let coarse = taxonomy.coarse_classes();
    let index_in = |scope: &[ClassId], c: &ClassId| {
        scope
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| Error::UnknownClass(c.to_string()))
    };
    let inputs: Vec<&[f64]> = train.iter().map(|r| r.vector()).collect::<Result<_>>()?;
    let fine_labels: Vec<usize> = train
        .iter()
        .map(|r| index_in(fine, &r.fine))
        .collect::<Result<_>>()?;
    let coarse_labels: Vec<usize> = train
        .iter()
        .map(|r| index_in(coarse, &r.coarse))
        .collect::<Result<_>>()?;
    let general_data = match general {
        Some(g) => {
            let labels: Vec<usize> = g
                .examples
                .iter()
                .map(|(_, c)| index_in(&g.classes, c))
                .collect::<Result<_>>()?;
            Some((g, labels))
        }
        None => None,
    };

    let mut adam = Adam::new(
        AdamConfig::with_lr(config.learning_rate),
        model.num_parameters(),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut general_order: Vec<usize> =
        general.map_or(Vec::new(), |g| (0..g.examples.len()).collect());
    let mut losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM_BASE + epoch as u64);
        order.shuffle(&mut rng);
        general_order.shuffle(&mut rng);
        let mut total = 0.0;
        let n_batches = order.len().div_ceil(config.batch_size);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i]).collect();
            let yf: Vec<usize> = chunk.iter().map(|&i| fine_labels[i]).collect();
            let yc: Vec<usize> = chunk.iter().map(|&i| coarse_labels[i]).collect();
            let mut out =
                loss_cross_entropy(model, &xs, &yf, fine, prompts, Temperature::LogitScale)?;
            if config.coarse_weight != 0.0 && coarse.len() >= 2 {
                let c =
                    loss_cross_entropy(model, &xs, &yc, coarse, prompts, Temperature::LogitScale)?;
                out.value += config.coarse_weight * c.value;
                out.grad
                    .iter_mut()
                    .zip(&c.grad)
                    .for_each(|(g, o)| *g += config.coarse_weight * o);
            }
            if let Some((g, labels)) = &general_data {
                if config.general_weight != 0.0 && !general_order.is_empty() {
                    // walk the general set at the same relative pace as the main set
                    let per = general_order.len().div_ceil(n_batches).max(1);
                    let start = (b * per) % general_order.len();
                    let idx: Vec<usize> = general_order
                        .iter()
                        .cycle()
                        .skip(start)
                        .take(per)
                        .copied()
                        .collect();
                    let gx: Vec<&[f64]> = idx.iter().map(|&i| g.examples[i].0.as_slice()).collect();
                    let gy: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let c = loss_cross_entropy(
                        model,
                        &gx,
                        &gy,
                        &g.classes,
                        prompts,
                        Temperature::LogitScale,
                    )?;
                    out.value += config.general_weight * c.value;
                    out.grad
                        .iter_mut()
                        .zip(&c.grad)
                        .for_each(|(g, o)| *g += config.general_weight * o);
                }
            }
            step += 1;
            check_finite(step, out.value, &out.grad)?;
            adam.step(model.parameters_mut(), &out.grad);
            total += out.value;
        }
        losses.push(total / n_batches as f64);
        log::debug!(
            "pretrain epoch {}: loss {:.6}",
            epoch + 1,
            total / n_batches as f64
        );
    }
    Ok(losses)
}
