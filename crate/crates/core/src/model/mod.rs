//! Dual-encoder similarity models.
//!
//! [`SimilarityModel`] is the inference surface every checkpoint provides:
//! unit-norm input embeddings, prompt-ensembled unit-norm class embeddings and
//! a positive logit scale. [`Trainable`] adds a flat parameter vector and a
//! batched backward pass; losses and the trainer only ever talk to that trait.

mod external;
mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::Record;
use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, Granularity};

pub use external::{load_external_checkpoint, EmbeddingTableModel, ExternalModel};
pub use toy::{ToyConfig, ToyModel};

/// Ordered list of prompt templates, each with exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new<I, S>(templates: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(Error::Config("prompt set is empty".into()));
        }
        for t in &templates {
            if t.matches("{}").count() != 1 {
                return Err(Error::Config(format!(
                    "template `{t}` must contain exactly one `{{}}` placeholder"
                )));
            }
        }
        Ok(PromptSet { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Renders every template with `display_name`.
    pub fn render(&self, display_name: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen("{}", display_name, 1))
            .collect()
    }
}

/// Inference surface of a contrastive image/text scorer.
pub trait SimilarityModel {
    /// Temperature multiplying cosine similarities; always positive.
    fn logit_scale(&self) -> f64;

    /// Unit-norm embedding of an input feature vector.
    fn embed_input(&self, input: &[f64]) -> Result<Vec<f64>>;

    /// Unit-norm prompt-ensembled embedding of a class.
    fn embed_class(&self, class: &ClassId, prompts: &PromptSet) -> Result<Vec<f64>>;

    /// Whether this is the built-in toy model.
    fn is_toy(&self) -> bool {
        false
    }
}

/// Similarity matrix for a batch of inputs against an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` cosine similarities.
    pub sims: Vec<f64>,
    pub logit_scale: f64,
}

impl Scores {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.sims[i * self.cols..(i + 1) * self.cols]
    }
}

/// A model with a flat parameter vector and an analytic backward pass.
pub trait Trainable: SimilarityModel {
    fn parameters(&self) -> &[f64];

    fn parameters_mut(&mut self) -> &mut [f64];

    fn num_parameters(&self) -> usize {
        self.parameters().len()
    }

    /// Cosine similarities of every input against every class.
    fn score_batch(
        &self,
        inputs: &[&[f64]],
        classes: &[ClassId],
        prompts: &PromptSet,
    ) -> Result<Scores>;

    /// Accumulates into `grad` the parameter gradient of a scalar whose
    /// partial derivatives are `grad_sims` (row-major, same layout as
    /// [`Scores::sims`]) and `grad_scale` (w.r.t. the logit scale itself).
    fn backward(
        &self,
        inputs: &[&[f64]],
        classes: &[ClassId],
        prompts: &PromptSet,
        grad_sims: &[f64],
        grad_scale: f64,
        grad: &mut [f64],
    ) -> Result<()>;
}

/// Immutable copy of a model's parameters.
#[derive(Clone, PartialEq)]
pub struct ParameterSnapshot {
    values: Vec<f64>,
    tag: String,
}

impl fmt::Debug for ParameterSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParameterSnapshot")
            .field("tag", &self.tag)
            .field("len", &self.values.len())
            .finish()
    }
}

impl ParameterSnapshot {
    pub fn from_values(values: Vec<f64>, tag: impl Into<String>) -> Self {
        ParameterSnapshot {
            values,
            tag: tag.into(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn snapshot<M: Trainable + ?Sized>(model: &M, tag: impl Into<String>) -> ParameterSnapshot {
    ParameterSnapshot::from_values(model.parameters().to_vec(), tag)
}

pub fn restore<M: Trainable + ?Sized>(model: &mut M, snap: &ParameterSnapshot) -> Result<()> {
    let params = model.parameters_mut();
    if params.len() != snap.values.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            actual: snap.values.len(),
        });
    }
    params.copy_from_slice(&snap.values);
    Ok(())
}

/// Scales `v` to unit L2 norm in place and returns the original norm.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Ensembles per-template embeddings: normalize each, average, renormalize.
pub(crate) fn ensemble<I>(per_template: I) -> Vec<f64>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for mut v in per_template {
        normalize_in_place(&mut v);
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        count += 1;
    }
    if count > 0 {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
    normalize_in_place(&mut acc);
    acc
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// First index of the maximum; earlier entries win ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Precomputed class embeddings for one ordered scope.
#[derive(Debug, Clone)]
pub struct ClassBank {
    classes: Vec<ClassId>,
    embeddings: Vec<Vec<f64>>,
    logit_scale: f64,
}

impl ClassBank {
    pub fn build<M: SimilarityModel + ?Sized>(
        model: &M,
        classes: &[ClassId],
        prompts: &PromptSet,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Config("prompt set is empty".into()));
        }
        let embeddings = classes
            .iter()
            .map(|c| model.embed_class(c, prompts))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassBank {
            classes: classes.to_vec(),
            embeddings,
            logit_scale: model.logit_scale(),
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn similarities(&self, input_embedding: &[f64]) -> Vec<f64> {
        self.embeddings
            .iter()
            .map(|v| dot(input_embedding, v))
            .collect()
    }

    pub fn probabilities(&self, input_embedding: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .similarities(input_embedding)
            .into_iter()
            .map(|s| self.logit_scale * s)
            .collect();
        softmax(&logits)
    }

    pub fn classify(&self, input_embedding: &[f64]) -> &ClassId {
        &self.classes[argmax(&self.similarities(input_embedding))]
    }
}

/// Cosine similarity between an input and a prompt-ensembled class.
pub fn similarity<M: SimilarityModel + ?Sized>(
    model: &M,
    input: &[f64],
    class: &ClassId,
    prompts: &PromptSet,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("prompt set is empty".into()));
    }
    let u = model.embed_input(input)?;
    let v = model.embed_class(class, prompts)?;
    Ok(dot(&u, &v).clamp(-1.0, 1.0))
}

/// Softmax of `logit_scale * similarity` over an ordered class list.
pub fn class_probabilities<M: SimilarityModel + ?Sized>(
    model: &M,
    input: &[f64],
    classes: &[ClassId],
    prompts: &PromptSet,
) -> Result<Vec<f64>> {
    if classes.len() < 2 {
        return Err(Error::DegenerateScope(classes.len()));
    }
    let bank = ClassBank::build(model, classes, prompts)?;
    Ok(bank.probabilities(&model.embed_input(input)?))
}

/// Zero-shot label: argmax over `classes`, first occurrence on ties.
pub fn zero_shot_classify<M: SimilarityModel + ?Sized>(
    model: &M,
    input: &[f64],
    classes: &[ClassId],
    prompts: &PromptSet,
) -> Result<ClassId> {
    if classes.len() < 2 {
        return Err(Error::DegenerateScope(classes.len()));
    }
    let bank = ClassBank::build(model, classes, prompts)?;
    Ok(bank.classify(&model.embed_input(input)?).clone())
}

/// Fraction of records whose zero-shot label over `scope` equals their label
/// at `level`.
pub fn accuracy<'a, M, I>(
    model: &M,
    records: I,
    level: Granularity,
    scope: &[ClassId],
    prompts: &PromptSet,
) -> Result<f64>
where
    M: SimilarityModel + ?Sized,
    I: IntoIterator<Item = &'a Record>,
{
    let labelled = records
        .into_iter()
        .map(|r| Ok((r.vector()?, r.label(level))))
        .collect::<Result<Vec<_>>>()?;
    labelled_accuracy(model, &labelled, scope, prompts)
}

/// Accuracy over `(input, label)` pairs.
pub fn labelled_accuracy<M: SimilarityModel + ?Sized>(
    model: &M,
    examples: &[(&[f64], &ClassId)],
    scope: &[ClassId],
    prompts: &PromptSet,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Evaluation("accuracy over an empty dataset".into()));
    }
    if scope.len() < 2 {
        return Err(Error::DegenerateScope(scope.len()));
    }
    for (_, label) in examples {
        if !scope.contains(label) {
            return Err(Error::Evaluation(format!(
                "label `{label}` is outside the class scope"
            )));
        }
    }
    let bank = ClassBank::build(model, scope, prompts)?;
    let mut correct = 0usize;
    for (input, label) in examples {
        if bank.classify(&model.embed_input(input)?) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Inputs are used directly as embeddings; classes look up fixed vectors.
    struct Fixed {
        classes: Vec<(ClassId, Vec<f64>)>,
        scale: f64,
    }

    impl SimilarityModel for Fixed {
        fn logit_scale(&self) -> f64 {
            self.scale
        }
        fn embed_input(&self, input: &[f64]) -> Result<Vec<f64>> {
            let mut v = input.to_vec();
            normalize_in_place(&mut v);
            Ok(v)
        }
        fn embed_class(&self, class: &ClassId, _prompts: &PromptSet) -> Result<Vec<f64>> {
            let mut v = self
                .classes
                .iter()
                .find(|(c, _)| c == class)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::UnknownClass(class.to_string()))?;
            normalize_in_place(&mut v);
            Ok(v)
        }
    }

    fn ids(names: &[&str]) -> Vec<ClassId> {
        names.iter().map(|n| ClassId::from(*n)).collect()
    }

    fn prompts() -> PromptSet {
        PromptSet::new(["a photo of a {}."]).unwrap()
    }

    #[test]
    fn cosine_edge_cases() {
        let m = Fixed {
            classes: vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 2.0])],
            scale: 1.0,
        };
        assert!(
            (similarity(&m, &[3.0, 0.0], &"a".into(), &prompts()).unwrap() - 1.0).abs() < 1e-12
        );
        assert!(
            similarity(&m, &[3.0, 0.0], &"b".into(), &prompts())
                .unwrap()
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn softmax_oracle_three_classes() {
        // sims (0.9, 0.1, 0.1) at scale 10; oracle p0 = 1 / (1 + 2 e^-8)
        let m = Fixed {
            classes: vec![
                ("a".into(), vec![0.9, 0.19f64.sqrt(), 0.0, 0.0]),
                ("b".into(), vec![0.1, 0.0, 0.99f64.sqrt(), 0.0]),
                ("c".into(), vec![0.1, 0.0, 0.0, 0.99f64.sqrt()]),
            ],
            scale: 10.0,
        };
        let p = class_probabilities(
            &m,
            &[1.0, 0.0, 0.0, 0.0],
            &ids(&["a", "b", "c"]),
            &prompts(),
        )
        .unwrap();
        let p0 = 1.0 / (1.0 + 2.0 * (-8.0f64).exp());
        assert!((p[0] - p0).abs() < 1e-12);
        assert!((p0 - 0.999_329_524_583_085_5).abs() < 1e-12);
        assert!((p[1] - p[2]).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_peaked_probabilities() {
        let m = Fixed {
            classes: vec![
                ("a".into(), vec![1.0, 0.0]),
                ("b".into(), vec![0.0, 1.0]),
                ("c".into(), vec![-1.0, 0.0]),
            ],
            scale: 5.0,
        };
        // input on the b axis sees a and c symmetrically
        let p = class_probabilities(&m, &[0.0, 1.0], &ids(&["a", "c"]), &prompts()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        let big = Fixed { scale: 1e4, ..m };
        let p = class_probabilities(&big, &[1.0, 0.2], &ids(&["a", "b", "c"]), &prompts()).unwrap();
        assert!(p[0] > 1.0 - 1e-9);
    }

    #[test]
    fn ties_go_to_first() {
        let m = Fixed {
            classes: vec![("a".into(), vec![1.0, 1.0]), ("b".into(), vec![1.0, 1.0])],
            scale: 1.0,
        };
        let c = zero_shot_classify(&m, &[1.0, 0.0], &ids(&["b", "a"]), &prompts()).unwrap();
        assert_eq!(c.as_str(), "b");
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn degenerate_scope_and_prompts() {
        let m = Fixed {
            classes: vec![("a".into(), vec![1.0])],
            scale: 1.0,
        };
        assert!(matches!(
            class_probabilities(&m, &[1.0], &ids(&["a"]), &prompts()),
            Err(Error::DegenerateScope(1))
        ));
        assert!(PromptSet::new(Vec::<String>::new()).is_err());
        assert!(PromptSet::new(["no placeholder"]).is_err());
        assert!(PromptSet::new(["{} and {}"]).is_err());
    }

    #[test]
    fn ensemble_is_unit_and_order_free() {
        let a = ensemble(vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]]);
        let b = ensemble(vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn render_substitutes_display_name() {
        let p = PromptSet::new(["a photo of my dirty {}", "i love my {}!"]).unwrap();
        assert_eq!(p.render("Audi A7")[1], "i love my Audi A7!");
    }
}
