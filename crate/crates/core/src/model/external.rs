//! Adapter for checkpoints produced outside this crate.
//!
//! Supported `format_tag`s:
//!
//! * `toy-v1`: the binary toy-model checkpoint written by [`ToyModel::save`].
//! * `embedding-table-json`: frozen embeddings exported from a pretrained
//!   contrastive model. Inputs are precomputed image features; class text
//!   embeddings are stored per prompt template and ensembled at lookup time.
//!
//! ```json
//! {
//!   "logit_scale": 100.0,
//!   "input_dim": 768,
//!   "projection": [[...], ...],
//!   "text": { "class_id": { "a photo of a {}.": [...], ... } }
//! }
//! ```
//!
//! `projection` is optional; when present it maps input features to the
//! joint space (`embed_dim x input_dim`, row-major rows).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dot, ensemble, normalize_in_place, PromptSet, SimilarityModel, ToyModel};
use crate::error::{Error, Result};
use crate::taxonomy::ClassId;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTableModel {
    pub logit_scale: f64,
    pub input_dim: usize,
    #[serde(default)]
    pub projection: Option<Vec<Vec<f64>>>,
    pub text: BTreeMap<ClassId, BTreeMap<String, Vec<f64>>>,
}

impl EmbeddingTableModel {
    fn validate(&self, origin: &Path) -> Result<()> {
        let bad = |m: String| Err(Error::parse(origin, m));
        if !(self.logit_scale > 0.0) {
            return bad("logit_scale must be positive".into());
        }
        let embed_dim = match &self.projection {
            Some(rows) => {
                if rows.is_empty() || rows.iter().any(|r| r.len() != self.input_dim) {
                    return bad("projection rows must all have input_dim entries".into());
                }
                rows.len()
            }
            None => self.input_dim,
        };
        for (class, per_template) in &self.text {
            for (template, v) in per_template {
                if v.len() != embed_dim {
                    return bad(format!(
                        "class `{class}` template `{template}` has dimension {}, expected {embed_dim}",
                        v.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

impl SimilarityModel for EmbeddingTableModel {
    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    fn embed_input(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim {
            return Err(Error::Config(format!(
                "input has dimension {}, checkpoint expects {}",
                input.len(),
                self.input_dim
            )));
        }
        let mut u = match &self.projection {
            Some(rows) => rows.iter().map(|r| dot(r, input)).collect(),
            None => input.to_vec(),
        };
        normalize_in_place(&mut u);
        Ok(u)
    }

    fn embed_class(&self, class: &ClassId, prompts: &PromptSet) -> Result<Vec<f64>> {
        let per_template = self
            .text
            .get(class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))?;
        let vectors = prompts
            .templates()
            .iter()
            .map(|t| {
                per_template.get(t).cloned().ok_or_else(|| {
                    Error::Config(format!(
                        "no text embedding for `{class}` under template `{t}`"
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ensemble(vectors))
    }
}

/// A model loaded through the checkpoint adapter.
#[derive(Debug, Clone)]
pub enum ExternalModel {
    Toy(ToyModel),
    EmbeddingTable(EmbeddingTableModel),
}

impl SimilarityModel for ExternalModel {
    fn logit_scale(&self) -> f64 {
        match self {
            ExternalModel::Toy(m) => m.logit_scale(),
            ExternalModel::EmbeddingTable(m) => m.logit_scale(),
        }
    }

    fn embed_input(&self, input: &[f64]) -> Result<Vec<f64>> {
        match self {
            ExternalModel::Toy(m) => m.embed_input(input),
            ExternalModel::EmbeddingTable(m) => m.embed_input(input),
        }
    }

    fn embed_class(&self, class: &ClassId, prompts: &PromptSet) -> Result<Vec<f64>> {
        match self {
            ExternalModel::Toy(m) => m.embed_class(class, prompts),
            ExternalModel::EmbeddingTable(m) => m.embed_class(class, prompts),
        }
    }

    fn is_toy(&self) -> bool {
        matches!(self, ExternalModel::Toy(_))
    }
}

pub fn load_external_checkpoint(path: &Path, format_tag: &str) -> Result<ExternalModel> {
    match format_tag {
        "toy-v1" => Ok(ExternalModel::Toy(ToyModel::load(path)?)),
        "embedding-table-json" => {
            let text = std::fs::read_to_string(path)?;
            let model: EmbeddingTableModel =
                serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
            model.validate(path)?;
            Ok(ExternalModel::EmbeddingTable(model))
        }
        other => Err(Error::UnknownFormat(other.to_string())),
    }
}
