//! Assembly of the labelled forget set from a manifest and a partition.

use std::collections::BTreeMap;

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, ClassPartition, Taxonomy};

/// One forget-set example with both hierarchy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetRecord {
    /// Position in the assembled set; keys per-record random draws.
    pub index: usize,
    pub id: String,
    pub input: Vec<f64>,
    pub fine: ClassId,
    pub coarse: ClassId,
}

/// The assembled forget set with the scopes its losses classify over.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetSet {
    pub records: Vec<ForgetRecord>,
    pub fine_scope: Vec<ClassId>,
    pub coarse_scope: Vec<ClassId>,
    pub forget_fine: Vec<ClassId>,
}

impl ForgetSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keeps the first `per_class` records of every forget class, in the
    /// given order of record positions.
    pub fn restrict_per_class(&self, order: &[usize], per_class: usize) -> ForgetSet {
        let mut taken: BTreeMap<&ClassId, usize> = BTreeMap::new();
        let mut keep: Vec<usize> = Vec::new();
        for &i in order {
            let n = taken.entry(&self.records[i].fine).or_default();
            if *n < per_class {
                *n += 1;
                keep.push(i);
            }
        }
        keep.sort_unstable();
        let records = keep
            .into_iter()
            .enumerate()
            .map(|(new_index, i)| ForgetRecord {
                index: new_index,
                ..self.records[i].clone()
            })
            .collect();
        ForgetSet {
            records,
            ..self.clone()
        }
    }

    /// Smallest number of records held by any forget class.
    pub fn min_per_class(&self) -> usize {
        self.forget_fine
            .iter()
            .map(|c| self.records.iter().filter(|r| r.fine == *c).count())
            .min()
            .unwrap_or(0)
    }
}

/// Training records whose fine label is a forget class, at most
/// `per_class_budget` per class (all of them when `None`), each carrying its
/// fine label and parent.
pub fn assemble_forget_dataset(
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    partition: &ClassPartition,
    per_class_budget: Option<usize>,
) -> Result<ForgetSet> {
    let mut taken: BTreeMap<&ClassId, usize> = BTreeMap::new();
    let mut records = Vec::new();
    for r in manifest.split(Split::Train) {
        if !partition.is_forget(r.fine.as_str()) {
            continue;
        }
        let n = taken.entry(&r.fine).or_default();
        if per_class_budget.is_some_and(|b| *n >= b) {
            continue;
        }
        *n += 1;
        records.push(ForgetRecord {
            index: records.len(),
            id: r.id.clone(),
            input: r.vector()?.to_vec(),
            fine: r.fine.clone(),
            coarse: taxonomy.parent_of(r.fine.as_str())?.clone(),
        });
    }
    for class in &partition.forget_fine {
        if !taken.contains_key(class) {
            return Err(Error::Validation(format!(
                "forget class `{class}` has no training records"
            )));
        }
    }
    Ok(ForgetSet {
        records,
        fine_scope: taxonomy.fine_classes().to_vec(),
        coarse_scope: taxonomy.coarse_classes().to_vec(),
        forget_fine: partition.forget_fine.clone(),
    })
}
