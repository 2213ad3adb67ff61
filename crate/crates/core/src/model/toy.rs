//! Small trainable dual encoder.
//!
//! Image side: `x -> tanh(W1 x + b1) -> W2 h + b2 -> normalize`.
//! Text side: a learnable row per class id plus a learnable additive offset
//! per prompt template, each template embedding normalized, averaged over the
//! prompt set and renormalized. The logit scale is stored as its logarithm.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{dot, normalize_in_place, PromptSet, Scores, SimilarityModel, Trainable};
use crate::binfmt::{Container, Payload, PayloadKind};
use crate::error::{Error, Result};
use crate::taxonomy::ClassId;

pub const TOY_ARCH: &str = "toy-mlp";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub init_logit_scale: f64,
    /// Expected norm of a freshly initialized class row; template offsets
    /// start at a tenth of it.
    pub text_init_norm: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            input_dim: 64,
            hidden_dim: 64,
            embed_dim: 32,
            init_logit_scale: 14.0,
            text_init_norm: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ToyMeta {
    arch: String,
    input_dim: usize,
    hidden_dim: usize,
    embed_dim: usize,
    classes: Vec<ClassId>,
    templates: Vec<String>,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    d: usize,
    h: usize,
    e: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    table: usize,
    offsets: usize,
    log_scale: usize,
    total: usize,
}

impl Layout {
    fn new(d: usize, h: usize, e: usize, classes: usize, templates: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + e * h;
        let table = b2 + e;
        let offsets = table + classes * e;
        let log_scale = offsets + templates * e;
        Layout {
            d,
            h,
            e,
            w1,
            b1,
            w2,
            b2,
            table,
            offsets,
            log_scale,
            total: log_scale + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    classes: Vec<ClassId>,
    templates: Vec<String>,
    class_index: HashMap<ClassId, usize>,
    template_index: HashMap<String, usize>,
    params: Vec<f64>,
}

/// Forward intermediates for one input.
struct ImageTrace {
    hidden: Vec<f64>,
    embed: Vec<f64>,
    norm: f64,
}

/// Forward intermediates for one class.
struct ClassTrace {
    row: usize,
    template_rows: Vec<usize>,
    /// Normalized per-template embeddings and their pre-normalization norms.
    unit: Vec<Vec<f64>>,
    norms: Vec<f64>,
    mean_norm: f64,
    embed: Vec<f64>,
}

impl ToyModel {
    /// Randomly initialized model over the given class and template vocabularies.
    pub fn new(
        config: ToyConfig,
        classes: &[ClassId],
        templates: &[String],
        seed: u64,
    ) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 || config.embed_dim == 0 {
            return Err(Error::Config(
                "toy model dimensions must be positive".into(),
            ));
        }
        if config.init_logit_scale <= 0.0 {
            return Err(Error::Config("logit scale must be positive".into()));
        }
        if !(config.text_init_norm > 0.0) {
            return Err(Error::Config("text init norm must be positive".into()));
        }
        let mut model = ToyModel::with_params(config, classes, templates, Vec::new())?;
        let l = model.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; l.total];
        let mut fill = |range: std::ops::Range<usize>, std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[range] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(l.w1..l.b1, 1.0 / (l.d as f64).sqrt());
        fill(l.w2..l.b2, 1.0 / (l.h as f64).sqrt());
        let row_std = config.text_init_norm / (l.e as f64).sqrt();
        fill(l.table..l.offsets, row_std);
        fill(l.offsets..l.log_scale, 0.1 * row_std);
        params[l.log_scale] = config.init_logit_scale.ln();
        model.params = params;
        Ok(model)
    }

    fn with_params(
        config: ToyConfig,
        classes: &[ClassId],
        templates: &[String],
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut class_index = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            if class_index.insert(c.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate class `{c}` in vocabulary"
                )));
            }
        }
        let mut template_index = HashMap::new();
        for (i, t) in templates.iter().enumerate() {
            if template_index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate template `{t}`")));
            }
        }
        Ok(ToyModel {
            config,
            classes: classes.to_vec(),
            templates: templates.to_vec(),
            class_index,
            template_index,
            params,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(
            self.config.input_dim,
            self.config.hidden_dim,
            self.config.embed_dim,
            self.classes.len(),
            self.templates.len(),
        )
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// Parameter count computed from the architecture alone.
    pub fn expected_parameter_count(config: &ToyConfig, classes: usize, templates: usize) -> usize {
        Layout::new(
            config.input_dim,
            config.hidden_dim,
            config.embed_dim,
            classes,
            templates,
        )
        .total
    }

    fn trace_image(&self, l: &Layout, x: &[f64]) -> Result<ImageTrace> {
        if x.len() != l.d {
            return Err(Error::Config(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                l.d
            )));
        }
        let p = &self.params;
        let hidden: Vec<f64> = (0..l.h)
            .map(|j| {
                let row = &p[l.w1 + j * l.d..l.w1 + (j + 1) * l.d];
                (dot(row, x) + p[l.b1 + j]).tanh()
            })
            .collect();
        let mut embed: Vec<f64> = (0..l.e)
            .map(|k| {
                let row = &p[l.w2 + k * l.h..l.w2 + (k + 1) * l.h];
                dot(row, &hidden) + p[l.b2 + k]
            })
            .collect();
        let norm = normalize_in_place(&mut embed);
        Ok(ImageTrace {
            hidden,
            embed,
            norm,
        })
    }

    fn template_rows(&self, prompts: &PromptSet) -> Result<Vec<usize>> {
        prompts
            .templates()
            .iter()
            .map(|t| {
                self.template_index.get(t).copied().ok_or_else(|| {
                    Error::Config(format!("template `{t}` is not part of this toy model"))
                })
            })
            .collect()
    }

    fn trace_class(
        &self,
        l: &Layout,
        class: &ClassId,
        template_rows: &[usize],
    ) -> Result<ClassTrace> {
        let row = *self
            .class_index
            .get(class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))?;
        let p = &self.params;
        let base = &p[l.table + row * l.e..l.table + (row + 1) * l.e];
        let mut unit = Vec::with_capacity(template_rows.len());
        let mut norms = Vec::with_capacity(template_rows.len());
        let mut mean = vec![0.0; l.e];
        for &t in template_rows {
            let offset = &p[l.offsets + t * l.e..l.offsets + (t + 1) * l.e];
            let mut z: Vec<f64> = base.iter().zip(offset).map(|(a, b)| a + b).collect();
            norms.push(normalize_in_place(&mut z));
            mean.iter_mut().zip(&z).for_each(|(m, w)| *m += w);
            unit.push(z);
        }
        let count = template_rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        let mean_norm = normalize_in_place(&mut mean);
        Ok(ClassTrace {
            row,
            template_rows: template_rows.to_vec(),
            unit,
            norms,
            mean_norm,
            embed: mean,
        })
    }

    pub fn to_container(&self) -> Container {
        let meta = ToyMeta {
            arch: TOY_ARCH.to_string(),
            input_dim: self.config.input_dim,
            hidden_dim: self.config.hidden_dim,
            embed_dim: self.config.embed_dim,
            classes: self.classes.clone(),
            templates: self.templates.clone(),
        };
        Container {
            kind: PayloadKind::Model,
            meta: serde_json::to_string(&meta).expect("metadata serializes"),
            payload: Payload::Floats(self.params.clone()),
        }
    }

    pub fn from_container(container: &Container, origin: &Path) -> Result<Self> {
        if container.kind != PayloadKind::Model {
            return Err(Error::parse(origin, "not a model checkpoint"));
        }
        let meta: ToyMeta = serde_json::from_str(&container.meta)
            .map_err(|e| Error::parse(origin, format!("bad metadata: {e}")))?;
        if meta.arch != TOY_ARCH {
            return Err(Error::parse(
                origin,
                format!("unexpected architecture `{}`", meta.arch),
            ));
        }
        let Payload::Floats(params) = &container.payload else {
            return Err(Error::parse(origin, "model payload must be floats"));
        };
        let config = ToyConfig {
            input_dim: meta.input_dim,
            hidden_dim: meta.hidden_dim,
            embed_dim: meta.embed_dim,
            ..ToyConfig::default()
        };
        let model = ToyModel::with_params(config, &meta.classes, &meta.templates, params.clone())?;
        let expected = model.layout().total;
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ToyModel::from_container(&Container::read(path)?, path)
    }
}

impl SimilarityModel for ToyModel {
    fn logit_scale(&self) -> f64 {
        self.params[self.layout().log_scale].exp()
    }

    fn embed_input(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace_image(&self.layout(), input)?.embed)
    }

    fn embed_class(&self, class: &ClassId, prompts: &PromptSet) -> Result<Vec<f64>> {
        let rows = self.template_rows(prompts)?;
        Ok(self.trace_class(&self.layout(), class, &rows)?.embed)
    }

    fn is_toy(&self) -> bool {
        true
    }
}

impl Trainable for ToyModel {
    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn score_batch(
        &self,
        inputs: &[&[f64]],
        classes: &[ClassId],
        prompts: &PromptSet,
    ) -> Result<Scores> {
        let l = self.layout();
        let rows = self.template_rows(prompts)?;
        let class_embeds = classes
            .iter()
            .map(|c| Ok(self.trace_class(&l, c, &rows)?.embed))
            .collect::<Result<Vec<_>>>()?;
        let mut sims = Vec::with_capacity(inputs.len() * classes.len());
        for x in inputs {
            let u = self.trace_image(&l, x)?.embed;
            sims.extend(class_embeds.iter().map(|v| dot(&u, v)));
        }
        Ok(Scores {
            rows: inputs.len(),
            cols: classes.len(),
            sims,
            logit_scale: self.params[l.log_scale].exp(),
        })
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        classes: &[ClassId],
        prompts: &PromptSet,
        grad_sims: &[f64],
        grad_scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let l = self.layout();
        if grad.len() != l.total {
            return Err(Error::ShapeMismatch {
                expected: l.total,
                actual: grad.len(),
            });
        }
        if grad_sims.len() != inputs.len() * classes.len() {
            return Err(Error::ShapeMismatch {
                expected: inputs.len() * classes.len(),
                actual: grad_sims.len(),
            });
        }
        let p = &self.params;
        let rows = self.template_rows(prompts)?;
        let class_traces = classes
            .iter()
            .map(|c| self.trace_class(&l, c, &rows))
            .collect::<Result<Vec<_>>>()?;
        let image_traces = inputs
            .iter()
            .map(|x| self.trace_image(&l, x))
            .collect::<Result<Vec<_>>>()?;

        // d(scale)/d(log scale) = scale
        grad[l.log_scale] += grad_scale * p[l.log_scale].exp();

        let k = classes.len();
        let mut grad_class = vec![vec![0.0; l.e]; k];
        for (i, (x, img)) in inputs.iter().zip(&image_traces).enumerate() {
            let g_row = &grad_sims[i * k..(i + 1) * k];
            let mut g_u = vec![0.0; l.e];
            for (c, g) in g_row.iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                let v = &class_traces[c].embed;
                for d in 0..l.e {
                    g_u[d] += g * v[d];
                    grad_class[c][d] += g * img.embed[d];
                }
            }
            // through u = e / |e|
            let proj = dot(&img.embed, &g_u);
            let g_e: Vec<f64> = (0..l.e)
                .map(|d| (g_u[d] - img.embed[d] * proj) / img.norm)
                .collect();
            let mut g_h = vec![0.0; l.h];
            for (kk, ge) in g_e.iter().enumerate() {
                grad[l.b2 + kk] += ge;
                let w_row = l.w2 + kk * l.h;
                for j in 0..l.h {
                    grad[w_row + j] += ge * img.hidden[j];
                    g_h[j] += ge * p[w_row + j];
                }
            }
            for j in 0..l.h {
                let g_a = g_h[j] * (1.0 - img.hidden[j] * img.hidden[j]);
                if g_a == 0.0 {
                    continue;
                }
                grad[l.b1 + j] += g_a;
                let w_row = l.w1 + j * l.d;
                for (d, xd) in x.iter().enumerate() {
                    grad[w_row + d] += g_a * xd;
                }
            }
        }

        for (trace, g_v) in class_traces.iter().zip(&grad_class) {
            let proj = dot(&trace.embed, g_v);
            let count = trace.template_rows.len() as f64;
            let g_mean: Vec<f64> = (0..l.e)
                .map(|d| (g_v[d] - trace.embed[d] * proj) / trace.mean_norm / count)
                .collect();
            for ((w, n), &t) in trace
                .unit
                .iter()
                .zip(&trace.norms)
                .zip(&trace.template_rows)
            {
                let proj_w = dot(w, &g_mean);
                for d in 0..l.e {
                    let g_z = (g_mean[d] - w[d] * proj_w) / n;
                    grad[l.table + trace.row * l.e + d] += g_z;
                    grad[l.offsets + t * l.e + d] += g_z;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{restore, similarity, snapshot};

    fn small() -> (ToyModel, PromptSet) {
        let classes: Vec<ClassId> = ["a", "b", "c"].iter().map(|s| ClassId::from(*s)).collect();
        let prompts = PromptSet::new(["a {}", "the {}"]).unwrap();
        let cfg = ToyConfig {
            input_dim: 5,
            hidden_dim: 4,
            embed_dim: 3,
            ..ToyConfig::default()
        };
        (
            ToyModel::new(cfg, &classes, prompts.templates(), 7).unwrap(),
            prompts,
        )
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let (m, _) = small();
        // W1 4x5 + b1 4 + W2 3x4 + b2 3 + table 3x3 + offsets 2x3 + log scale
        assert_eq!(m.num_parameters(), 20 + 4 + 12 + 3 + 9 + 6 + 1);
        assert_eq!(snapshot(&m, "x").len(), 55);
    }

    #[test]
    fn embeddings_are_unit_norm_and_scale_positive() {
        let (m, prompts) = small();
        let u = m.embed_input(&[0.3, -1.0, 2.0, 0.0, 0.5]).unwrap();
        let v = m.embed_class(&"b".into(), &prompts).unwrap();
        assert!((dot(&u, &u) - 1.0).abs() < 1e-12);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
        assert!((m.logit_scale() - 14.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_order_does_not_matter() {
        let (m, prompts) = small();
        let reversed = PromptSet::new(["the {}", "a {}"]).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = similarity(&m, &x, &"c".into(), &prompts).unwrap();
        let b = similarity(&m, &x, &"c".into(), &reversed).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn snapshot_restore_is_bit_exact() {
        let (mut m, prompts) = small();
        let x = [1.0, 0.0, -1.0, 0.5, 0.25];
        let before = similarity(&m, &x, &"a".into(), &prompts).unwrap();
        let snap = snapshot(&m, "origin");
        for p in m.parameters_mut() {
            *p += 0.01;
        }
        restore(&mut m, &snap).unwrap();
        assert_eq!(m.parameters(), snap.values());
        assert_eq!(
            similarity(&m, &x, &"a".into(), &prompts).unwrap().to_bits(),
            before.to_bits()
        );
        let short = crate::model::ParameterSnapshot::from_values(vec![0.0; 3], "bad");
        assert!(matches!(
            restore(&mut m, &short),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn container_round_trip() {
        let (m, _) = small();
        let back = ToyModel::from_container(&m.to_container(), Path::new("x")).unwrap();
        assert_eq!(back.parameters(), m.parameters());
        assert_eq!(back.classes(), m.classes());
    }

    #[test]
    fn unknown_template_and_class_are_errors() {
        let (m, _) = small();
        let other = PromptSet::new(["art of {}"]).unwrap();
        assert!(m.embed_class(&"a".into(), &other).is_err());
        let (_, prompts) = small();
        assert!(matches!(
            m.embed_class(&"zz".into(), &prompts),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (m, prompts) = small();
        let classes: Vec<ClassId> = m.classes().to_vec();
        let x1 = [0.3, -0.2, 0.8, 0.1, -0.5];
        let x2 = [-0.7, 0.4, 0.0, 0.9, 0.2];
        let inputs: Vec<&[f64]> = vec![&x1, &x2];
        // arbitrary linear functional of sims and scale
        let weights = [0.3, -1.2, 0.5, 0.9, 0.1, -0.4];
        let f = |model: &ToyModel| {
            let s = model.score_batch(&inputs, &classes, &prompts).unwrap();
            dot(&s.sims, &weights) + 0.7 * s.logit_scale
        };
        let mut grad = vec![0.0; m.num_parameters()];
        m.backward(&inputs, &classes, &prompts, &weights, 0.7, &mut grad)
            .unwrap();
        let h = 1e-6;
        let mut probe = m.clone();
        for (i, analytic) in grad.iter().enumerate() {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let up = f(&probe);
            probe.params[i] = orig - h;
            let down = f(&probe);
            probe.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
