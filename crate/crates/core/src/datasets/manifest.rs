//! Labelled records and the manifest file format.
//!
//! One record per line, tab-separated:
//! `id  locator_or_vector  fine  coarse  split`. A second field made only of
//! comma-separated decimals is an inline feature vector; anything else is a
//! locator resolved by whoever owns the image pipeline. `#` starts a comment;
//! a leading `# taxonomy=<path>` comment records the taxonomy reference.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, Granularity, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Vector(Vec<f64>),
    Locator(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub input: Input,
    pub fine: ClassId,
    pub coarse: ClassId,
    pub split: Split,
}

impl Record {
    pub fn vector(&self) -> Result<&[f64]> {
        match &self.input {
            Input::Vector(v) => Ok(v),
            Input::Locator(loc) => Err(Error::Config(format!(
                "record `{}` points at `{loc}`; locator inputs need an image pipeline",
                self.id
            ))),
        }
    }

    pub fn label(&self, level: Granularity) -> &ClassId {
        match level {
            Granularity::Fine => &self.fine,
            Granularity::Coarse => &self.coarse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub taxonomy_ref: Option<String>,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>) -> Self {
        DatasetManifest {
            records,
            taxonomy_ref: None,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks label consistency against a taxonomy and id uniqueness.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!(
                    "record id `{}` appears twice",
                    r.id
                )));
            }
            let parent = taxonomy.parent_of(r.fine.as_str()).map_err(|_| {
                Error::Validation(format!(
                    "record `{}` has fine label `{}` outside the taxonomy",
                    r.id, r.fine
                ))
            })?;
            if *parent != r.coarse {
                return Err(Error::Validation(format!(
                    "record `{}`: coarse label `{}` is not the parent `{}` of `{}`",
                    r.id, r.coarse, parent, r.fine
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut manifest = DatasetManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(t) = comment.trim().strip_prefix("taxonomy=") {
                    manifest.taxonomy_ref = Some(t.to_string());
                }
                continue;
            }
            let at = |m: String| Error::parse(origin, format!("line {}: {m}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(at(format!("expected 5 fields, found {}", fields.len())));
            }
            manifest.records.push(Record {
                id: fields[0].to_string(),
                input: parse_input(fields[1]),
                fine: ClassId::new(fields[2]),
                coarse: ClassId::new(fields[3]),
                split: fields[4].parse().map_err(|e: Error| at(e.to_string()))?,
            });
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        DatasetManifest::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        if let Some(t) = &self.taxonomy_ref {
            out.push_str(&format!("# taxonomy={t}\n"));
        }
        out.push_str("# id\tlocator_or_vector\tfine\tcoarse\tsplit\n");
        for r in &self.records {
            let input = match &r.input {
                Input::Vector(v) => v
                    .iter()
                    .map(|x| format!("{x:?}"))
                    .collect::<Vec<_>>()
                    .join(","),
                Input::Locator(l) => l.clone(),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.id, input, r.fine, r.coarse, r.split
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

fn parse_input(field: &str) -> Input {
    let parsed: std::result::Result<Vec<f64>, _> =
        field.split(',').map(|x| x.trim().parse::<f64>()).collect();
    match parsed {
        Ok(v) if !field.trim().is_empty() => Input::Vector(v),
        _ => Input::Locator(field.to_string()),
    }
}

/// Flat labelled dataset used for zero-shot and out-of-domain suites.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub name: String,
    /// Classification scope, in order of first appearance.
    pub classes: Vec<ClassId>,
    pub examples: Vec<(Vec<f64>, ClassId)>,
}

impl LabeledSet {
    pub fn new(name: impl Into<String>, examples: Vec<(Vec<f64>, ClassId)>) -> Self {
        let mut classes: Vec<ClassId> = Vec::new();
        for (_, c) in &examples {
            if !classes.contains(c) {
                classes.push(c.clone());
            }
        }
        LabeledSet {
            name: name.into(),
            classes,
            examples,
        }
    }

    /// Uses the fine label of every record of the given split.
    pub fn from_manifest(
        name: impl Into<String>,
        manifest: &DatasetManifest,
        split: Split,
    ) -> Result<Self> {
        let examples = manifest
            .split(split)
            .map(|r| Ok((r.vector()?.to_vec(), r.fine.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSet::new(name, examples))
    }

    pub fn pairs(&self) -> Vec<(&[f64], &ClassId)> {
        self.examples
            .iter()
            .map(|(x, c)| (x.as_slice(), c))
            .collect()
    }

    pub fn to_manifest(&self, split: Split) -> DatasetManifest {
        DatasetManifest::new(
            self.examples
                .iter()
                .enumerate()
                .map(|(i, (x, c))| Record {
                    id: format!("{}/{i}", self.name),
                    input: Input::Vector(x.clone()),
                    fine: c.clone(),
                    coarse: ClassId::new("-"),
                    split,
                })
                .collect(),
        )
    }
}
