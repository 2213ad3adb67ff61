//! Unlearning objectives.
//!
//! Every loss is a batch mean and returns its value together with the full
//! parameter gradient. Probabilities are softmaxes over an ordered class
//! scope; logs of probabilities are floored at `ln(LOG_FLOOR)` and floored
//! entries contribute no gradient.
//!
//! The composite objectives per method:
//!
//! | method       | objective                                         |
//! |--------------|---------------------------------------------------|
//! | `GA`         | GA(fine)                                          |
//! | `GDiff`      | GA(fine) + GD(coarse)                             |
//! | `GA_KL`      | GA(fine) + a_c KL_coarse + a_f KL_fine            |
//! | `Relabel`    | Relabel                                           |
//! | `SalUn`      | Relabel (updates masked by the trainer)           |
//! | `ME_GD`      | ME + GD(coarse)                                   |
//! | `TaskVector` | GD(fine) + 0.05 GA(coarse), then negated          |
//! | `NPO_KL`     | NPO + a_c KL_coarse + a_f KL_fine                 |
//! | `HGA_KL`     | HGA + a_f KL_fine + a_c KL_coarse                 |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ForgetRecord, ForgetSet};
use crate::error::{Error, Result};
use crate::model::{log_softmax, restore, ParameterSnapshot, PromptSet, Scores, Trainable};
use crate::taxonomy::{ClassId, Granularity};

/// Probabilities below this are floored inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Weight of the coarse ascent term in the task-vector fine-tuning objective.
pub const TASK_VECTOR_COARSE_ASCENT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "GDiff")]
    GDiff,
    #[serde(rename = "GA_KL")]
    GaKl,
    #[serde(rename = "Relabel")]
    Relabel,
    #[serde(rename = "SalUn")]
    SalUn,
    #[serde(rename = "ME_GD")]
    MeGd,
    #[serde(rename = "TaskVector")]
    TaskVector,
    #[serde(rename = "NPO_KL")]
    NpoKl,
    #[serde(rename = "HGA_KL")]
    HgaKl,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Ga,
        Method::GDiff,
        Method::GaKl,
        Method::Relabel,
        Method::SalUn,
        Method::MeGd,
        Method::TaskVector,
        Method::NpoKl,
        Method::HgaKl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ga => "GA",
            Method::GDiff => "GDiff",
            Method::GaKl => "GA_KL",
            Method::Relabel => "Relabel",
            Method::SalUn => "SalUn",
            Method::MeGd => "ME_GD",
            Method::TaskVector => "TaskVector",
            Method::NpoKl => "NPO_KL",
            Method::HgaKl => "HGA_KL",
        }
    }

    /// Learning rate used for this method against the full-size model.
    pub fn full_scale_learning_rate(&self) -> f64 {
        match self {
            Method::Ga | Method::GDiff | Method::GaKl => 8e-8,
            Method::SalUn => 2e-7,
            _ => 1e-7,
        }
    }

    pub fn uses_reference(&self) -> bool {
        matches!(self, Method::GaKl | Method::NpoKl | Method::HgaKl)
    }

    pub fn uses_relabeling(&self) -> bool {
        matches!(self, Method::Relabel | Method::SalUn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Case-insensitive; `_`, `-` and `+` are ignored (`hga_kl`, `HGA+KL`).
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | '+' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().replace('_', "").to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Which logits feed the softmax of probability-based losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// `logit_scale * similarity`; the reference uses its own scale.
    LogitScale,
    /// Raw cosine similarity.
    Raw,
}

impl FromStr for Temperature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit_scale" | "scaled" => Ok(Temperature::LogitScale),
            "raw" => Ok(Temperature::Raw),
            other => Err(Error::Config(format!("unknown temperature `{other}`"))),
        }
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Temperature::LogitScale => "logit_scale",
            Temperature::Raw => "raw",
        })
    }
}

/// Support of the fine-level KL regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlFineSupport {
    /// Every fine class except the sample's own label.
    ExcludeOwnLabel,
    /// Every fine class outside the forget set.
    ExcludeAllForget,
}

impl FromStr for KlFineSupport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude_own_label" => Ok(KlFineSupport::ExcludeOwnLabel),
            "exclude_all_forget" => Ok(KlFineSupport::ExcludeAllForget),
            other => Err(Error::Config(format!("unknown KL fine support `{other}`"))),
        }
    }
}

impl fmt::Display for KlFineSupport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlFineSupport::ExcludeOwnLabel => "exclude_own_label",
            KlFineSupport::ExcludeAllForget => "exclude_all_forget",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    pub margin: f64,
    pub beta: f64,
    pub alpha_c: f64,
    pub alpha_f: f64,
    pub relabel_seed: u64,
    /// Negation scale applied to task vectors.
    pub tv_scale: f64,
    /// Fraction of parameters SalUn may update.
    pub salun_fraction: f64,
    pub temperature: Temperature,
    pub kl_fine_support: KlFineSupport,
}

impl LossConfig {
    /// Hyper-parameter defaults for a method.
    pub fn for_method(method: Method) -> Self {
        let (alpha_c, alpha_f) = match method {
            Method::HgaKl => (10.0, 20.0),
            Method::NpoKl | Method::GaKl => (5.0, 20.0),
            _ => (0.0, 0.0),
        };
        LossConfig {
            method,
            margin: 2.0,
            beta: 0.5,
            alpha_c,
            alpha_f,
            relabel_seed: 0,
            tv_scale: 1.5,
            salun_fraction: 0.1,
            temperature: Temperature::LogitScale,
            kl_fine_support: KlFineSupport::ExcludeOwnLabel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config("margin must be >= 0".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be > 0".into()));
        }
        if !(self.alpha_c >= 0.0 && self.alpha_f >= 0.0) {
            return Err(Error::Config("alpha_c and alpha_f must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.salun_fraction) {
            return Err(Error::Config("salun_fraction must lie in [0, 1]".into()));
        }
        if !self.tv_scale.is_finite() {
            return Err(Error::Config("tv_scale must be finite".into()));
        }
        Ok(())
    }
}

/// A batch of forget-set records with the scopes their losses classify over.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetBatch {
    pub records: Vec<ForgetRecord>,
    pub fine_scope: Vec<ClassId>,
    pub coarse_scope: Vec<ClassId>,
    /// Forget classes of the request; used by [`KlFineSupport::ExcludeAllForget`].
    pub forget_fine: Vec<ClassId>,
    pub prompts: PromptSet,
}

impl ForgetBatch {
    pub fn from_set(set: &ForgetSet, indices: &[usize], prompts: &PromptSet) -> Self {
        ForgetBatch {
            prompts: prompts.clone(),
            records: indices.iter().map(|&i| set.records[i].clone()).collect(),
            fine_scope: set.fine_scope.clone(),
            coarse_scope: set.coarse_scope.clone(),
            forget_fine: set.forget_fine.clone(),
        }
    }

    pub fn whole(set: &ForgetSet, prompts: &PromptSet) -> Self {
        ForgetBatch::from_set(set, &(0..set.len()).collect::<Vec<_>>(), prompts)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn inputs(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.input.as_slice()).collect()
    }

    fn scope(&self, level: Granularity) -> &[ClassId] {
        match level {
            Granularity::Fine => &self.fine_scope,
            Granularity::Coarse => &self.coarse_scope,
        }
    }

    fn label_indices(&self, level: Granularity) -> Result<Vec<usize>> {
        let scope = self.scope(level);
        self.records
            .iter()
            .map(|r| {
                let label = match level {
                    Granularity::Fine => &r.fine,
                    Granularity::Coarse => &r.coarse,
                };
                scope
                    .iter()
                    .position(|c| c == label)
                    .ok_or_else(|| Error::UnknownClass(label.to_string()))
            })
            .collect()
    }
}

/// Loss value and gradient w.r.t. every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossOutput {
    fn zero(n: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }

    fn add_scaled(&mut self, other: &LossOutput, weight: f64) {
        self.value += weight * other.value;
        self.grad
            .iter_mut()
            .zip(&other.grad)
            .for_each(|(g, o)| *g += weight * o);
    }
}

/// Per-sample contribution: value and derivative w.r.t. the sample's logits.
type SampleTerm = (f64, Vec<f64>);

fn logits_of(scores: &Scores, row: usize, temperature: Temperature) -> Vec<f64> {
    let scale = match temperature {
        Temperature::LogitScale => scores.logit_scale,
        Temperature::Raw => 1.0,
    };
    scores.row(row).iter().map(|s| scale * s).collect()
}

/// Runs a logit-space per-sample term over a batch and backpropagates the
/// batch mean into the model.
fn logit_loss<M, F>(
    model: &M,
    batch: &ForgetBatch,
    level: Granularity,
    temperature: Temperature,
    per_sample: F,
) -> Result<LossOutput>
where
    M: Trainable + ?Sized,
    F: FnMut(usize, &[f64]) -> Result<SampleTerm>,
{
    if batch.is_empty() {
        return Err(Error::Evaluation("empty forget batch".into()));
    }
    scoped_logit_loss(
        model,
        &batch.inputs(),
        batch.scope(level),
        &batch.prompts,
        temperature,
        per_sample,
    )
}

fn scoped_logit_loss<M, F>(
    model: &M,
    inputs: &[&[f64]],
    scope: &[ClassId],
    prompts: &PromptSet,
    temperature: Temperature,
    mut per_sample: F,
) -> Result<LossOutput>
where
    M: Trainable + ?Sized,
    F: FnMut(usize, &[f64]) -> Result<SampleTerm>,
{
    if scope.len() < 2 {
        return Err(Error::DegenerateScope(scope.len()));
    }
    let scores = model.score_batch(inputs, scope, prompts)?;
    let n = inputs.len() as f64;
    let k = scope.len();
    let mut value = 0.0;
    let mut grad_sims = vec![0.0; scores.sims.len()];
    let mut grad_scale = 0.0;
    for i in 0..inputs.len() {
        let logits = logits_of(&scores, i, temperature);
        let (v, dlogits) = per_sample(i, &logits)?;
        value += v / n;
        for c in 0..k {
            let dl = dlogits[c] / n;
            match temperature {
                Temperature::LogitScale => {
                    grad_sims[i * k + c] = scores.logit_scale * dl;
                    grad_scale += scores.sims[i * k + c] * dl;
                }
                Temperature::Raw => grad_sims[i * k + c] = dl,
            }
        }
    }
    let mut grad = vec![0.0; model.num_parameters()];
    model.backward(inputs, scope, prompts, &grad_sims, grad_scale, &mut grad)?;
    Ok(LossOutput { value, grad })
}

/// Mean cross-entropy of `labels` (positions in `scope`) over a plain batch.
pub fn loss_cross_entropy<M: Trainable + ?Sized>(
    model: &M,
    inputs: &[&[f64]],
    labels: &[usize],
    scope: &[ClassId],
    prompts: &PromptSet,
    temperature: Temperature,
) -> Result<LossOutput> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Evaluation(
            "cross-entropy needs one label per input".into(),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= scope.len()) {
        return Err(Error::Config(format!(
            "label index {bad} outside a scope of {}",
            scope.len()
        )));
    }
    scoped_logit_loss(model, inputs, scope, prompts, temperature, |i, logits| {
        let k = logits.len();
        Ok(weighted_log_prob(
            logits,
            &one_hot(k, labels[i], -1.0),
            &vec![true; k],
        ))
    })
}

/// Log-softmax over the included entries; excluded entries are `-inf`.
fn masked_log_softmax(logits: &[f64], included: &[bool]) -> Vec<f64> {
    let support: Vec<f64> = logits
        .iter()
        .zip(included)
        .filter(|(_, inc)| **inc)
        .map(|(l, _)| *l)
        .collect();
    let mut reduced = log_softmax(&support).into_iter();
    included
        .iter()
        .map(|inc| {
            if *inc {
                reduced.next().unwrap_or(f64::NEG_INFINITY)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// `sum_k w_k * max(log p_k, ln floor)` over the entries where `included`,
/// with `p` the softmax restricted to the included entries.
fn weighted_log_prob(logits: &[f64], weights: &[f64], included: &[bool]) -> SampleTerm {
    let log_p = masked_log_softmax(logits, included);
    let floor = LOG_FLOOR.ln();
    let mut value = 0.0;
    let mut active_weight = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    for k in 0..logits.len() {
        if !included[k] || weights[k] == 0.0 {
            continue;
        }
        if log_p[k] > floor {
            value += weights[k] * log_p[k];
            dlogits[k] += weights[k];
            active_weight += weights[k];
        } else {
            value += weights[k] * floor;
        }
    }
    for k in 0..logits.len() {
        if included[k] {
            dlogits[k] -= log_p[k].exp() * active_weight;
        }
    }
    (value, dlogits)
}

fn one_hot(k: usize, at: usize, weight: f64) -> Vec<f64> {
    let mut w = vec![0.0; k];
    w[at] = weight;
    w
}

/// Mean of `log p(label | x)`; minimizing it ascends the cross-entropy.
pub fn loss_ga<M: Trainable + ?Sized>(
    model: &M,
    batch: &ForgetBatch,
    level: Granularity,
    temperature: Temperature,
) -> Result<LossOutput> {
    let labels = batch.label_indices(level)?;
    logit_loss(model, batch, level, temperature, |i, logits| {
        let k = logits.len();
        Ok(weighted_log_prob(
            logits,
            &one_hot(k, labels[i], 1.0),
            &vec![true; k],
        ))
    })
}

/// Mean of `-log p(label | x)`.
pub fn loss_gd<M: Trainable + ?Sized>(
    model: &M,
    batch: &ForgetBatch,
    level: Granularity,
    temperature: Temperature,
) -> Result<LossOutput> {
    let labels = batch.label_indices(level)?;
    logit_loss(model, batch, level, temperature, |i, logits| {
        let k = logits.len();
        Ok(weighted_log_prob(
            logits,
            &one_hot(k, labels[i], -1.0),
            &vec![true; k],
        ))
    })
}

/// Fixed random wrong label for a record: uniform over the scope minus the
/// true label, drawn from `seed` and the record's position.
pub fn relabel_target(
    seed: u64,
    record_index: usize,
    scope_len: usize,
    true_index: usize,
) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(record_index as u64);
    let r = rng.random_range(0..scope_len - 1);
    if r >= true_index {
        r + 1
    } else {
        r
    }
}

/// Mean of `-log p(y_rand | x)` over the fine scope.
pub fn loss_relabel<M: Trainable + ?Sized>(
    model: &M,
    batch: &ForgetBatch,
    relabel_seed: u64,
    temperature: Temperature,
) -> Result<LossOutput> {
    if batch.fine_scope.len() < 2 {
        return Err(Error::DegenerateScope(batch.fine_scope.len()));
    }
    let labels = batch.label_indices(Granularity::Fine)?;
    let k = batch.fine_scope.len();
    let targets: Vec<usize> = batch
        .records
        .iter()
        .zip(&labels)
        .map(|(r, &y)| relabel_target(relabel_seed, r.index, k, y))
        .collect();
    logit_loss(model, batch, Granularity::Fine, temperature, |i, logits| {
        Ok(weighted_log_prob(
            logits,
            &one_hot(k, targets[i], -1.0),
            &vec![true; k],
        ))
    })
}

/// Mean hinge `max(0, m + sim(x, y) - max_{y' != y} sim(x, y'))` over fine
/// classes. The subgradient at the kink is zero.
pub fn loss_hga<M: Trainable + ?Sized>(
    model: &M,
    batch: &ForgetBatch,
    margin: f64,
) -> Result<LossOutput> {
    if !(margin >= 0.0) {
        return Err(Error::Config("margin must be >= 0".into()));
    }
    let scope = &batch.fine_scope;
    if scope.len() < 2 {
        return Err(Error::DegenerateScope(scope.len()));
    }
    if batch.is_empty() {
        return Err(Error::Evaluation("empty forget batch".into()));
    }
    let labels = batch.label_indices(Granularity::Fine)?;
    let inputs = batch.inputs();
    let prompts = &batch.prompts;
    let scores = model.score_batch(&inputs, scope, prompts)?;
    let n = batch.len() as f64;
    let k = scope.len();
    let mut value = 0.0;
    let mut grad_sims = vec![0.0; scores.sims.len()];
    for (i, &y) in labels.iter().enumerate() {
        let row = scores.row(i);
        let (rival, rival_sim) = row.iter().enumerate().filter(|(c, _)| *c != y).fold(
            (usize::MAX, f64::NEG_INFINITY),
            |best, (c, &s)| {
                if s > best.1 {
                    (c, s)
                } else {
                    best
                }
            },
        );
        let slack = margin + row[y] - rival_sim;
        if slack > 0.0 {
            value += slack / n;
            grad_sims[i * k + y] += 1.0 / n;
            grad_sims[i * k + rival] -= 1.0 / n;
        }
    }
    let mut grad = vec![0.0; model.num_parameters()];
    model.backward(&inputs, scope, prompts, &grad_sims, 0.0, &mut grad)?;
    Ok(LossOutput { value, grad })
}

/// Reference logits (rows) over `scope` for every record of the batch.
fn reference_logits<M: Trainable + ?Sized>(
    reference: &M,
    batch: &ForgetBatch,
    scope: &[ClassId],
    temperature: Temperature,
) -> Result<Scores> {
    let inputs = batch.inputs();
    let prompts = &batch.prompts;
    let mut scores = reference.score_batch(&inputs, scope, prompts)?;
    for i in 0..scores.rows {
        let logits = logits_of(&scores, i, temperature);
        let k = scores.cols;
        scores.sims[i * k..(i + 1) * k].copy_from_slice(&logits);
    }
    Ok(scores)
}

/// `KL(q || p)` on the support, both given as logits. The value is summed
/// term by term so identical logits give exactly zero.
fn kl_term(logits: &[f64], reference: &[f64], included: &[bool]) -> SampleTerm {
    let floor = LOG_FLOOR.ln();
    let log_q = masked_log_softmax(reference, included);
    let log_p = masked_log_softmax(logits, included);
    let q: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
    let value = (0..logits.len())
        .filter(|&c| included[c] && q[c] > 0.0)
        .map(|c| q[c] * (log_q[c].max(floor) - log_p[c].max(floor)))
        .sum();
    let neg_q: Vec<f64> = q.iter().map(|x| -x).collect();
    let (_, dlogits) = weighted_log_prob(logits, &neg_q, included);
    (value, dlogits)
}

/// Mean `KL(p_ref(. | x) || p(. | x))` over coarse classes.
pub fn loss_kl_coarse<M: Trainable + ?Sized>(
    model: &M,
    reference: &M,
    batch: &ForgetBatch,
    temperature: Temperature,
) -> Result<LossOutput> {
    let k = batch.coarse_scope.len();
    if k < 2 {
        return Err(Error::DegenerateScope(k));
    }
    let q = reference_logits(reference, batch, &batch.coarse_scope, temperature)?;
    logit_loss(
        model,
        batch,
        Granularity::Coarse,
        temperature,
        |i, logits| Ok(kl_term(logits, q.row(i), &vec![true; k])),
    )
}

/// Mean KL over fine classes with the sample's own label (or every forget
/// class) removed from the support and both distributions renormalized.
pub fn loss_kl_fine<M: Trainable + ?Sized>(
    model: &M,
    reference: &M,
    batch: &ForgetBatch,
    temperature: Temperature,
    support: KlFineSupport,
) -> Result<LossOutput> {
    let labels = batch.label_indices(Granularity::Fine)?;
    let masks: Vec<Vec<bool>> = labels
        .iter()
        .map(|&y| {
            batch
                .fine_scope
                .iter()
                .enumerate()
                .map(|(c, class)| match support {
                    KlFineSupport::ExcludeOwnLabel => c != y,
                    KlFineSupport::ExcludeAllForget => !batch.forget_fine.contains(class),
                })
                .collect()
        })
        .collect();
    let smallest = masks
        .iter()
        .map(|m| m.iter().filter(|b| **b).count())
        .min()
        .unwrap_or(0);
    if smallest < 2 {
        return Err(Error::DegenerateScope(smallest));
    }
    let q = reference_logits(reference, batch, &batch.fine_scope, temperature)?;
    logit_loss(model, batch, Granularity::Fine, temperature, |i, logits| {
        Ok(kl_term(logits, q.row(i), &masks[i]))
    })
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-(2 / beta) log sigmoid(-beta log(p(y|x) / p_ref(y|x)))` at the
/// fine level.
pub fn loss_npo<M: Trainable + ?Sized>(
    model: &M,
    reference: &M,
    batch: &ForgetBatch,
    beta: f64,
    temperature: Temperature,
) -> Result<LossOutput> {
    if !(beta > 0.0) {
        return Err(Error::Config("beta must be > 0".into()));
    }
    let labels = batch.label_indices(Granularity::Fine)?;
    let q = reference_logits(reference, batch, &batch.fine_scope, temperature)?;
    let floor = LOG_FLOOR.ln();
    logit_loss(model, batch, Granularity::Fine, temperature, |i, logits| {
        let k = logits.len();
        let y = labels[i];
        let (log_p, dlog_p) = weighted_log_prob(logits, &one_hot(k, y, 1.0), &vec![true; k]);
        let log_ref = masked_log_softmax(q.row(i), &vec![true; k])[y].max(floor);
        let ratio = log_p - log_ref;
        let value = -(2.0 / beta) * log_sigmoid(-beta * ratio);
        let d_ratio = 2.0 * sigmoid(beta * ratio);
        Ok((value, dlog_p.into_iter().map(|d| d * d_ratio).collect()))
    })
}

/// Mean `KL(U_K || p(. | x))` over the fine scope.
pub fn loss_me<M: Trainable + ?Sized>(
    model: &M,
    batch: &ForgetBatch,
    temperature: Temperature,
) -> Result<LossOutput> {
    let k = batch.fine_scope.len();
    if k < 2 {
        return Err(Error::DegenerateScope(k));
    }
    let uniform = vec![0.0; k];
    logit_loss(model, batch, Granularity::Fine, temperature, |_, logits| {
        Ok(kl_term(logits, &uniform, &vec![true; k]))
    })
}

/// One weighted term of a composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Ga(Granularity),
    Gd(Granularity),
    KlCoarse,
    KlFine,
    Relabel,
    Npo,
    Me,
    Hga,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Ga(l) => write!(f, "ga_{l}"),
            Term::Gd(l) => write!(f, "gd_{l}"),
            Term::KlCoarse => f.write_str("kl_coarse"),
            Term::KlFine => f.write_str("kl_fine"),
            Term::Relabel => f.write_str("relabel"),
            Term::Npo => f.write_str("npo"),
            Term::Me => f.write_str("me"),
            Term::Hga => f.write_str("hga"),
        }
    }
}

/// Composite objective for one method, holding the frozen reference model
/// when the method needs one.
#[derive(Debug, Clone)]
pub struct Objective<M> {
    config: LossConfig,
    terms: Vec<(Term, f64)>,
    reference: Option<M>,
}

/// Objective value with the unweighted value of every term.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub total: LossOutput,
    pub terms: Vec<(Term, f64, f64)>,
}

/// Clones `model` and loads `snapshot` into the clone.
pub fn frozen_reference<M: Trainable + Clone>(
    model: &M,
    snapshot: &ParameterSnapshot,
) -> Result<M> {
    let mut reference = model.clone();
    restore(&mut reference, snapshot)?;
    Ok(reference)
}

/// Weighted terms making up a method's objective.
pub fn method_terms(config: &LossConfig) -> Vec<(Term, f64)> {
    use Granularity::{Coarse, Fine};
    match config.method {
        Method::Ga => vec![(Term::Ga(Fine), 1.0)],
        Method::GDiff => vec![(Term::Ga(Fine), 1.0), (Term::Gd(Coarse), 1.0)],
        Method::GaKl => vec![
            (Term::Ga(Fine), 1.0),
            (Term::KlCoarse, config.alpha_c),
            (Term::KlFine, config.alpha_f),
        ],
        Method::Relabel | Method::SalUn => vec![(Term::Relabel, 1.0)],
        Method::MeGd => vec![(Term::Me, 1.0), (Term::Gd(Coarse), 1.0)],
        Method::TaskVector => vec![
            (Term::Gd(Fine), 1.0),
            (Term::Ga(Coarse), TASK_VECTOR_COARSE_ASCENT),
        ],
        Method::NpoKl => vec![
            (Term::Npo, 1.0),
            (Term::KlCoarse, config.alpha_c),
            (Term::KlFine, config.alpha_f),
        ],
        Method::HgaKl => vec![
            (Term::Hga, 1.0),
            (Term::KlFine, config.alpha_f),
            (Term::KlCoarse, config.alpha_c),
        ],
    }
}

/// Builds the composite objective of `config.method`. `reference` must be the
/// model at its pre-unlearning parameters for KL- and NPO-based methods.
pub fn build_objective<M: Trainable + Clone>(
    config: &LossConfig,
    reference: Option<M>,
) -> Result<Objective<M>> {
    config.validate()?;
    let terms = method_terms(config);
    let needs_reference = terms
        .iter()
        .any(|(t, w)| matches!(t, Term::KlCoarse | Term::KlFine | Term::Npo) && *w != 0.0);
    if needs_reference && reference.is_none() {
        return Err(Error::Config(format!(
            "method {} needs a reference model",
            config.method
        )));
    }
    Ok(Objective {
        config: config.clone(),
        terms,
        reference,
    })
}

impl<M: Trainable + Clone> Objective<M> {
    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn terms(&self) -> &[(Term, f64)] {
        &self.terms
    }

    pub fn reference(&self) -> Option<&M> {
        self.reference.as_ref()
    }

    fn reference_or_err(&self) -> Result<&M> {
        self.reference
            .as_ref()
            .ok_or_else(|| Error::Config("objective has no reference model".into()))
    }

    pub fn evaluate_term(&self, term: Term, model: &M, batch: &ForgetBatch) -> Result<LossOutput> {
        let c = &self.config;
        match term {
            Term::Ga(level) => loss_ga(model, batch, level, c.temperature),
            Term::Gd(level) => loss_gd(model, batch, level, c.temperature),
            Term::KlCoarse => loss_kl_coarse(model, self.reference_or_err()?, batch, c.temperature),
            Term::KlFine => loss_kl_fine(
                model,
                self.reference_or_err()?,
                batch,
                c.temperature,
                c.kl_fine_support,
            ),
            Term::Relabel => loss_relabel(model, batch, c.relabel_seed, c.temperature),
            Term::Npo => loss_npo(
                model,
                self.reference_or_err()?,
                batch,
                c.beta,
                c.temperature,
            ),
            Term::Me => loss_me(model, batch, c.temperature),
            Term::Hga => loss_hga(model, batch, c.margin),
        }
    }

    /// Weighted sum of the method's terms; zero-weight terms are skipped.
    pub fn evaluate(&self, model: &M, batch: &ForgetBatch) -> Result<ObjectiveOutput> {
        let mut total = LossOutput::zero(model.num_parameters());
        let mut parts = Vec::with_capacity(self.terms.len());
        for &(term, weight) in &self.terms {
            if weight == 0.0 {
                parts.push((term, weight, 0.0));
                continue;
            }
            let out = self.evaluate_term(term, model, batch)?;
            total.add_scaled(&out, weight);
            parts.push((term, weight, out.value));
        }
        Ok(ObjectiveOutput {
            total,
            terms: parts,
        })
    }
}
