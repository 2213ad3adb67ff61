//! Parameter-space edits: task-vector negation and saliency-masked updates.
//!
//! Task vectors and masks persist in the same binary container as toy
//! checkpoints; the kind byte tells float vectors from bit-packed masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{Container, Payload, PayloadKind};
use crate::error::{Error, Result};
use crate::losses::{loss_gd, ForgetBatch, Temperature};
use crate::model::{ParameterSnapshot, Trainable};
use crate::taxonomy::Granularity;

/// `tuned - origin`, elementwise.
///
/// The tuned endpoint is kept alongside the difference so that negation can
/// be evaluated as `(1 + a) * origin - a * tuned`, which is exact at `a = 0`
/// and `a = -1`; `origin + (tuned - origin)` is not exact in floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: Vec<f64>,
    pub tuned: Vec<f64>,
    /// (origin tag, tuned tag)
    pub source_tags: (String, String),
}

#[derive(Serialize, Deserialize)]
struct TaskVectorMeta {
    origin: String,
    tuned: String,
    len: usize,
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

pub fn compute_task_vector(
    origin: &ParameterSnapshot,
    tuned: &ParameterSnapshot,
) -> Result<TaskVector> {
    check_len(origin.len(), tuned.len())?;
    Ok(TaskVector {
        delta: tuned
            .values()
            .iter()
            .zip(origin.values())
            .map(|(t, o)| t - o)
            .collect(),
        tuned: tuned.values().to_vec(),
        source_tags: (origin.tag().to_string(), tuned.tag().to_string()),
    })
}

/// `origin - scale * tv`, elementwise.
pub fn apply_task_vector(
    origin: &ParameterSnapshot,
    tv: &TaskVector,
    scale: f64,
) -> Result<ParameterSnapshot> {
    check_len(origin.len(), tv.delta.len())?;
    check_len(origin.len(), tv.tuned.len())?;
    let values = origin
        .values()
        .iter()
        .zip(&tv.tuned)
        .map(|(o, t)| (1.0 + scale) * o - scale * t)
        .collect();
    Ok(ParameterSnapshot::from_values(
        values,
        format!("{}-negated-{scale}", origin.tag()),
    ))
}

impl TaskVector {
    pub fn to_container(&self) -> Container {
        let meta = TaskVectorMeta {
            origin: self.source_tags.0.clone(),
            tuned: self.source_tags.1.clone(),
            len: self.delta.len(),
        };
        // payload: delta followed by the tuned endpoint
        let mut values = self.delta.clone();
        values.extend_from_slice(&self.tuned);
        Container {
            kind: PayloadKind::TaskVector,
            meta: serde_json::to_string(&meta).expect("metadata serializes"),
            payload: Payload::Floats(values),
        }
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        if c.kind != PayloadKind::TaskVector {
            return Err(Error::parse(origin, "not a task vector"));
        }
        let meta: TaskVectorMeta = serde_json::from_str(&c.meta)
            .map_err(|e| Error::parse(origin, format!("bad metadata: {e}")))?;
        let Payload::Floats(values) = &c.payload else {
            return Err(Error::parse(origin, "task vector payload must be floats"));
        };
        if values.len() != 2 * meta.len {
            return Err(Error::parse(
                origin,
                "task vector payload length does not match metadata",
            ));
        }
        Ok(TaskVector {
            delta: values[..meta.len].to_vec(),
            tuned: values[meta.len..].to_vec(),
            source_tags: (meta.origin, meta.tuned),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TaskVector::from_container(&Container::read(path)?, path)
    }
}

/// Boolean parameter mask: `true` marks coordinates that may be updated.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    pub mask: Vec<bool>,
    /// Gradient magnitude a coordinate must strictly exceed to be selected.
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct MaskMeta {
    threshold: f64,
}

impl SaliencyMask {
    pub fn all(n: usize, value: bool) -> Self {
        SaliencyMask {
            mask: vec![value; n],
            threshold: if value {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Fraction of `true` entries.
    pub fn coverage(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|b| **b).count() as f64 / self.mask.len() as f64
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: PayloadKind::Mask,
            meta: serde_json::to_string(&MaskMeta {
                threshold: self.threshold,
            })
            .expect("metadata serializes"),
            payload: Payload::Bits(self.mask.clone()),
        }
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        if c.kind != PayloadKind::Mask {
            return Err(Error::parse(origin, "not a saliency mask"));
        }
        let meta: MaskMeta = serde_json::from_str(&c.meta)
            .map_err(|e| Error::parse(origin, format!("bad metadata: {e}")))?;
        let Payload::Bits(mask) = &c.payload else {
            return Err(Error::parse(origin, "mask payload must be bits"));
        };
        Ok(SaliencyMask {
            mask: mask.clone(),
            threshold: meta.threshold,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SaliencyMask::from_container(&Container::read(path)?, path)
    }
}

/// Selects the `round((1 - quantile) * n)` largest magnitudes. The threshold
/// is the next magnitude down and selection is strict, so entries tied with
/// it are left out.
pub fn mask_from_gradient(grad: &[f64], quantile: f64) -> Result<SaliencyMask> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Config(format!(
            "saliency quantile {quantile} outside [0, 1]"
        )));
    }
    let n = grad.len();
    let k = ((1.0 - quantile) * n as f64).round() as usize;
    let mut magnitudes: Vec<f64> = grad.iter().map(|g| g.abs()).collect();
    magnitudes.sort_by(|a, b| b.total_cmp(a));
    let threshold = if k >= n {
        f64::NEG_INFINITY
    } else {
        magnitudes[k]
    };
    if grad.iter().all(|g| *g == 0.0) && k < n {
        log::warn!("forget-loss gradient is identically zero; saliency mask is empty");
    }
    Ok(SaliencyMask {
        mask: grad.iter().map(|g| g.abs() > threshold).collect(),
        threshold,
    })
}

/// Mask over the magnitude of the forget-set cross-entropy gradient,
/// accumulated over `batches`.
pub fn compute_saliency_mask<M: Trainable + ?Sized>(
    model: &M,
    batches: &[ForgetBatch],
    quantile: f64,
) -> Result<SaliencyMask> {
    if batches.is_empty() {
        return Err(Error::Evaluation(
            "saliency mask needs at least one batch".into(),
        ));
    }
    let mut grad = vec![0.0; model.num_parameters()];
    for batch in batches {
        let out = loss_gd(model, batch, Granularity::Fine, Temperature::LogitScale)?;
        grad.iter_mut().zip(&out.grad).for_each(|(g, o)| *g += o);
    }
    mask_from_gradient(&grad, quantile)
}

/// Adds `update` to the parameters where the mask is set; the rest are not
/// touched.
pub fn apply_masked_update<M: Trainable + ?Sized>(
    model: &mut M,
    mask: &SaliencyMask,
    update: &[f64],
) -> Result<()> {
    let n = model.num_parameters();
    check_len(n, mask.len())?;
    check_len(n, update.len())?;
    for ((p, u), keep) in model
        .parameters_mut()
        .iter_mut()
        .zip(update)
        .zip(&mask.mask)
    {
        if *keep {
            *p += u;
        }
    }
    Ok(())
}
