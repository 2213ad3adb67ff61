//! Two-level concept hierarchy and compilation of unlearning requests into
//! class partitions.
//!
//! Identifiers are opaque strings. Display names are kept separately so that
//! prompt templating never has to touch an identifier.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque class identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(String);

impl ClassId {
    pub fn new(id: impl Into<String>) -> Self {
        ClassId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for ClassId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

impl From<String> for ClassId {
    fn from(s: String) -> Self {
        ClassId(s)
    }
}

/// Level of the hierarchy a class or label lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Fine,
    Coarse,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Fine => "fine",
            Granularity::Coarse => "coarse",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fine" => Ok(Granularity::Fine),
            "coarse" => Ok(Granularity::Coarse),
            other => Err(Error::Config(format!(
                "granularity must be `fine` or `coarse`, got `{other}`"
            ))),
        }
    }
}

/// Fine classes with their coarse parents.
///
/// Class order is the order of first appearance and is used as the canonical
/// order of every classification scope derived from the taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    fine_classes: Vec<ClassId>,
    coarse_classes: Vec<ClassId>,
    parent: BTreeMap<ClassId, ClassId>,
    display_name: BTreeMap<ClassId, String>,
}

/// One line of a taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub fine: ClassId,
    pub coarse: ClassId,
    pub fine_display: String,
    pub coarse_display: String,
}

impl Taxonomy {
    /// Builds a taxonomy from `(fine, coarse, fine display, coarse display)` entries.
    pub fn from_entries(entries: impl IntoIterator<Item = TaxonomyEntry>) -> Result<Self> {
        let mut fine_classes = Vec::new();
        let mut coarse_classes = Vec::new();
        let mut parent = BTreeMap::new();
        let mut display_name: BTreeMap<ClassId, String> = BTreeMap::new();

        for entry in entries {
            if entry.fine.as_str().is_empty() || entry.coarse.as_str().is_empty() {
                return Err(Error::Validation("empty class identifier".into()));
            }
            if parent.contains_key(&entry.fine) {
                return Err(Error::Validation(format!(
                    "fine class `{}` listed twice",
                    entry.fine
                )));
            }
            match display_name.get(&entry.coarse) {
                Some(existing) if *existing != entry.coarse_display => {
                    return Err(Error::Validation(format!(
                        "coarse class `{}` has conflicting display names `{}` and `{}`",
                        entry.coarse, existing, entry.coarse_display
                    )));
                }
                Some(_) => {}
                None => {
                    coarse_classes.push(entry.coarse.clone());
                    display_name.insert(entry.coarse.clone(), entry.coarse_display.clone());
                }
            }
            fine_classes.push(entry.fine.clone());
            display_name.insert(entry.fine.clone(), entry.fine_display);
            parent.insert(entry.fine, entry.coarse);
        }

        if fine_classes.is_empty() {
            return Err(Error::Validation("taxonomy has no classes".into()));
        }
        let coarse_set: BTreeSet<&ClassId> = coarse_classes.iter().collect();
        if let Some(clash) = fine_classes.iter().find(|f| coarse_set.contains(f)) {
            return Err(Error::Validation(format!(
                "`{clash}` appears at both the fine and the coarse level"
            )));
        }

        Ok(Taxonomy {
            fine_classes,
            coarse_classes,
            parent,
            display_name,
        })
    }

    /// Parses the tab-separated taxonomy format.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    origin,
                    format!(
                        "line {}: expected 4 tab-separated fields, found {}",
                        lineno + 1,
                        fields.len()
                    ),
                ));
            }
            entries.push(TaxonomyEntry {
                fine: ClassId::new(fields[0].trim()),
                coarse: ClassId::new(fields[1].trim()),
                fine_display: fields[2].trim().to_string(),
                coarse_display: fields[3].trim().to_string(),
            });
        }
        Taxonomy::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# fine_id\tcoarse_id\tfine_display\tcoarse_display\n");
        for fine in &self.fine_classes {
            let coarse = &self.parent[fine];
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                fine, coarse, self.display_name[fine], self.display_name[coarse]
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn fine_classes(&self) -> &[ClassId] {
        &self.fine_classes
    }

    pub fn coarse_classes(&self) -> &[ClassId] {
        &self.coarse_classes
    }

    pub fn classes(&self, level: Granularity) -> &[ClassId] {
        match level {
            Granularity::Fine => &self.fine_classes,
            Granularity::Coarse => &self.coarse_classes,
        }
    }

    pub fn is_fine(&self, id: &str) -> bool {
        self.parent.contains_key(id)
    }

    pub fn is_coarse(&self, id: &str) -> bool {
        self.coarse_classes.iter().any(|c| c.as_str() == id)
    }

    pub fn parent_of(&self, fine: &str) -> Result<&ClassId> {
        self.parent
            .get(fine)
            .ok_or_else(|| Error::UnknownClass(fine.to_string()))
    }

    /// Fine children of a coarse class, in taxonomy order.
    pub fn children_of(&self, coarse: &str) -> Result<Vec<ClassId>> {
        if !self.is_coarse(coarse) {
            return Err(Error::UnknownClass(coarse.to_string()));
        }
        Ok(self
            .fine_classes
            .iter()
            .filter(|f| self.parent[*f].as_str() == coarse)
            .cloned()
            .collect())
    }

    pub fn display_name(&self, id: &str) -> Result<&str> {
        self.display_name
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownClass(id.to_string()))
    }

    /// Map from every class id (both levels) to its display name.
    pub fn display_names(&self) -> &BTreeMap<ClassId, String> {
        &self.display_name
    }

    /// Compiles a request into forget/retain class sets.
    pub fn resolve(&self, request: &UnlearnRequest) -> Result<ClassPartition> {
        resolve_request(self, request)
    }
}

/// Knowledge-level unlearning request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub targets: Vec<ClassId>,
    pub granularity: Granularity,
}

impl UnlearnRequest {
    pub fn new<I, S>(targets: I, granularity: Granularity) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ClassId>,
    {
        UnlearnRequest {
            targets: targets.into_iter().map(Into::into).collect(),
            granularity,
        }
    }

    pub fn fine<I, S>(targets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ClassId>,
    {
        Self::new(targets, Granularity::Fine)
    }

    pub fn coarse<I, S>(targets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ClassId>,
    {
        Self::new(targets, Granularity::Coarse)
    }

    /// Checks the request against a taxonomy.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Validation("request has no targets".into()));
        }
        let level = taxonomy.classes(self.granularity);
        for target in &self.targets {
            if !level.contains(target) {
                return Err(Error::Validation(format!(
                    "`{target}` is not a {} class of the taxonomy",
                    self.granularity
                )));
            }
        }
        let distinct: BTreeSet<&ClassId> = self.targets.iter().collect();
        if distinct.len() == level.len() {
            return Err(Error::DegenerateRequest(format!(
                "request targets every {} class",
                self.granularity
            )));
        }
        Ok(())
    }
}

/// Resolved forget/retain sets at both levels.
///
/// All lists follow taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub forget_fine: Vec<ClassId>,
    pub retain_fine: Vec<ClassId>,
    pub forget_parents: Vec<ClassId>,
    pub retain_parents: Vec<ClassId>,
    pub granularity: Granularity,
}

impl ClassPartition {
    pub fn is_forget(&self, fine: &str) -> bool {
        self.forget_fine.iter().any(|c| c.as_str() == fine)
    }

    pub fn is_retain(&self, fine: &str) -> bool {
        self.retain_fine.iter().any(|c| c.as_str() == fine)
    }
}

/// Compiles an [`UnlearnRequest`] into a [`ClassPartition`].
///
/// Coarse requests expand to every fine child of the targeted parents. A fine
/// request that removes all children of some parent keeps that parent in
/// `forget_parents` only and logs a warning.
pub fn resolve_request(taxonomy: &Taxonomy, request: &UnlearnRequest) -> Result<ClassPartition> {
    request.validate(taxonomy)?;
    let targets: BTreeSet<&str> = request.targets.iter().map(ClassId::as_str).collect();

    let forget_fine: Vec<ClassId> = match request.granularity {
        Granularity::Fine => taxonomy
            .fine_classes()
            .iter()
            .filter(|f| targets.contains(f.as_str()))
            .cloned()
            .collect(),
        Granularity::Coarse => taxonomy
            .fine_classes()
            .iter()
            .filter(|f| targets.contains(taxonomy.parent[*f].as_str()))
            .cloned()
            .collect(),
    };
    let forget_set: BTreeSet<&ClassId> = forget_fine.iter().collect();
    let retain_fine: Vec<ClassId> = taxonomy
        .fine_classes()
        .iter()
        .filter(|f| !forget_set.contains(f))
        .cloned()
        .collect();

    let parents_of = |fines: &[ClassId]| -> BTreeSet<ClassId> {
        fines.iter().map(|f| taxonomy.parent[f].clone()).collect()
    };
    let forget_parent_set = parents_of(&forget_fine);
    let retain_parent_set = parents_of(&retain_fine);
    let in_order = |set: &BTreeSet<ClassId>| -> Vec<ClassId> {
        taxonomy
            .coarse_classes()
            .iter()
            .filter(|c| set.contains(*c))
            .cloned()
            .collect()
    };

    if request.granularity == Granularity::Fine {
        for exhausted in forget_parent_set.difference(&retain_parent_set) {
            log::warn!(
                "fine request removes every child of `{exhausted}`; parent kept in forget scope only"
            );
        }
    }

    Ok(ClassPartition {
        forget_parents: in_order(&forget_parent_set),
        retain_parents: in_order(&retain_parent_set),
        forget_fine,
        retain_fine,
        granularity: request.granularity,
    })
}
