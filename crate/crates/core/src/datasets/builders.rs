//! Dataset construction procedures over external manifests.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Record, Split};
use crate::error::{Error, Result};
use crate::model::{accuracy, PromptSet, SimilarityModel};
use crate::taxonomy::{ClassId, Granularity, Taxonomy, TaxonomyEntry};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompcarsRules {
    pub min_fine_per_coarse: usize,
    pub min_images_per_fine: usize,
    /// Fine classes are kept only when their accuracy is strictly above this.
    pub min_fine_accuracy: f64,
}

impl Default for CompcarsRules {
    fn default() -> Self {
        CompcarsRules {
            min_fine_per_coarse: 2,
            min_images_per_fine: 90,
            min_fine_accuracy: 0.20,
        }
    }
}

/// Result of a filtering or sampling pass.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub manifest: DatasetManifest,
    pub taxonomy: Taxonomy,
    /// One line per removal or warning.
    pub audit: Vec<String>,
    pub removed_records: usize,
}

impl BuildOutcome {
    pub fn audit_text(&self) -> String {
        let mut out = String::new();
        for line in &self.audit {
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

fn restrict_taxonomy(taxonomy: &Taxonomy, keep: &BTreeSet<ClassId>) -> Result<Taxonomy> {
    let entries = taxonomy
        .fine_classes()
        .iter()
        .filter(|f| keep.contains(*f))
        .map(|f| {
            let c = taxonomy.parent_of(f.as_str())?;
            Ok(TaxonomyEntry {
                fine: f.clone(),
                coarse: c.clone(),
                fine_display: taxonomy.display_name(f.as_str())?.to_string(),
                coarse_display: taxonomy.display_name(c.as_str())?.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if entries.is_empty() {
        return Err(Error::Validation("every class was filtered out".into()));
    }
    Taxonomy::from_entries(entries)
}

/// Car-model style filtering.
///
/// Structure rules run first: fine classes with too few images are dropped,
/// then coarse classes left with too few fine children are dropped along with
/// those children. The remaining fine classes are then pruned by zero-shot
/// accuracy over the surviving fine scope, computed on all of a class's
/// records with the given prompt ensemble.
pub fn filter_compcars_style<M: SimilarityModel + ?Sized>(
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    model: &M,
    prompts: &PromptSet,
    rules: &CompcarsRules,
) -> Result<BuildOutcome> {
    manifest.validate(taxonomy)?;
    let mut by_fine: BTreeMap<&ClassId, Vec<&Record>> = BTreeMap::new();
    for r in &manifest.records {
        by_fine.entry(&r.fine).or_default().push(r);
    }
    let count = |f: &ClassId| by_fine.get(f).map_or(0, Vec::len);

    let mut audit = Vec::new();
    let mut removed_records = 0usize;
    let mut keep: BTreeSet<ClassId> = BTreeSet::new();

    for f in taxonomy.fine_classes() {
        let n = count(f);
        if n < rules.min_images_per_fine {
            audit.push(format!(
                "removed fine `{f}` ({n} records): {n} images < {}",
                rules.min_images_per_fine
            ));
            removed_records += n;
        } else {
            keep.insert(f.clone());
        }
    }

    for c in taxonomy.coarse_classes() {
        let children: Vec<ClassId> = taxonomy
            .children_of(c.as_str())?
            .into_iter()
            .filter(|f| keep.contains(f))
            .collect();
        if children.len() < rules.min_fine_per_coarse {
            let n: usize = children.iter().map(count).sum();
            audit.push(format!(
                "removed coarse `{c}` ({n} records): {} fine children < {}",
                children.len(),
                rules.min_fine_per_coarse
            ));
            removed_records += n;
            for f in children {
                keep.remove(&f);
            }
        }
    }

    let scope: Vec<ClassId> = taxonomy
        .fine_classes()
        .iter()
        .filter(|f| keep.contains(*f))
        .cloned()
        .collect();
    if scope.len() >= 2 {
        let mut pruned = Vec::new();
        for f in &scope {
            let acc = accuracy(
                model,
                by_fine[f].iter().copied(),
                Granularity::Fine,
                &scope,
                prompts,
            )?;
            if acc <= rules.min_fine_accuracy {
                audit.push(format!(
                    "removed fine `{f}` ({} records): accuracy {acc:.4} <= {}",
                    count(f),
                    rules.min_fine_accuracy
                ));
                removed_records += count(f);
                pruned.push(f.clone());
            }
        }
        for f in pruned {
            keep.remove(&f);
        }
    }

    if keep.is_empty() {
        return Err(Error::Validation("every class was filtered out".into()));
    }
    let records: Vec<Record> = manifest
        .records
        .iter()
        .filter(|r| keep.contains(&r.fine))
        .cloned()
        .collect();
    Ok(BuildOutcome {
        manifest: DatasetManifest {
            records,
            taxonomy_ref: manifest.taxonomy_ref.clone(),
        },
        taxonomy: restrict_taxonomy(taxonomy, &keep)?,
        audit,
        removed_records,
    })
}

/// Dog-breed style sampling: a seeded subset of `per_class_train` training
/// records per fine class; test records pass through. Classes with fewer
/// candidates keep all of them and are reported in the audit.
pub fn build_breed_style(
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    per_class_train: usize,
    seed: u64,
) -> Result<BuildOutcome> {
    manifest.validate(taxonomy)?;
    let mut audit = Vec::new();
    let mut selected: BTreeSet<&str> = BTreeSet::new();
    for (idx, fine) in taxonomy.fine_classes().iter().enumerate() {
        let mut pool: Vec<&Record> = manifest
            .split(Split::Train)
            .filter(|r| r.fine == *fine)
            .collect();
        if pool.len() < per_class_train {
            log::warn!(
                "class `{fine}` has {} training records, wanted {per_class_train}",
                pool.len()
            );
            audit.push(format!(
                "warning: class `{fine}` has only {} training records (< {per_class_train}); all kept",
                pool.len()
            ));
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            pool.shuffle(&mut rng);
            for r in &pool[per_class_train..] {
                audit.push(format!("removed record `{}`: not sampled", r.id));
            }
            pool.truncate(per_class_train);
        }
        selected.extend(pool.iter().map(|r| r.id.as_str()));
    }
    let records: Vec<Record> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Test || selected.contains(r.id.as_str()))
        .cloned()
        .collect();
    let removed_records = manifest.len() - records.len();
    Ok(BuildOutcome {
        manifest: DatasetManifest {
            records,
            taxonomy_ref: manifest.taxonomy_ref.clone(),
        },
        taxonomy: taxonomy.clone(),
        audit,
        removed_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::manifest::Input;
    use std::path::Path;

    fn tax() -> Taxonomy {
        Taxonomy::parse(
            "a1\tA\ta1\tA\na2\tA\ta2\tA\nb1\tB\tb1\tB\nc1\tC\tc1\tC\nc2\tC\tc2\tC\n",
            Path::new("t"),
        )
        .unwrap()
    }

    fn records(fine: &str, coarse: &str, n: usize, split: Split) -> Vec<Record> {
        (0..n)
            .map(|i| Record {
                id: format!("{fine}/{split}/{i}"),
                input: Input::Vector(vec![i as f64]),
                fine: fine.into(),
                coarse: coarse.into(),
                split,
            })
            .collect()
    }

    #[test]
    fn breed_sampling_is_seeded() {
        let t = tax();
        let mut recs = records("a1", "A", 500, Split::Train);
        recs.extend(records("a2", "A", 50, Split::Train));
        recs.extend(records("a1", "A", 7, Split::Test));
        let m = DatasetManifest::new(recs);
        let out = build_breed_style(&m, &t, 200, 3).unwrap();
        let a1_train = out
            .manifest
            .split(Split::Train)
            .filter(|r| r.fine.as_str() == "a1")
            .count();
        assert_eq!(a1_train, 200);
        assert_eq!(out.manifest.split(Split::Test).count(), 7);
        assert_eq!(
            out.manifest
                .split(Split::Train)
                .filter(|r| r.fine.as_str() == "a2")
                .count(),
            50
        );
        assert!(out.audit.iter().any(|l| l.contains("warning: class `a2`")));
        assert_eq!(m.len(), out.manifest.len() + out.removed_records);

        let again = build_breed_style(&m, &t, 200, 3).unwrap();
        assert_eq!(again.manifest, out.manifest);
        let other = build_breed_style(&m, &t, 200, 4).unwrap();
        assert_ne!(other.manifest, out.manifest);
        assert_eq!(other.manifest.len(), out.manifest.len());
    }
}
