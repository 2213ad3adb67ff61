//! Forgetting quality, utility and their harmonic mean, plus zero-shot
//! preservation, difficulty stratification and out-of-domain evaluation.
//!
//! Accuracies are fractions in `[0, 1]`; rendering multiplies by 100 and
//! rounds half-up to two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, Input, LabeledSet, Record, Split};
use crate::error::{Error, Result};
use crate::model::{accuracy, labelled_accuracy, ClassBank, PromptSet, SimilarityModel};
use crate::taxonomy::{ClassId, ClassPartition, Granularity, Taxonomy};

/// The four accuracies behind every report: forget and retain test records,
/// each at the fine and the coarse level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawAccuracies {
    pub forget_fine: f64,
    pub forget_coarse: f64,
    pub retain_fine: f64,
    pub retain_coarse: f64,
}

impl RawAccuracies {
    pub const KEYS: [&'static str; 4] = [
        "forget.fine",
        "forget.coarse",
        "retain.fine",
        "retain.coarse",
    ];

    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "forget.fine" => Some(self.forget_fine),
            "forget.coarse" => Some(self.forget_coarse),
            "retain.fine" => Some(self.retain_fine),
            "retain.coarse" => Some(self.retain_coarse),
            _ => None,
        }
    }

    fn set(&mut self, key: &str, value: f64) -> bool {
        let slot = match key {
            "forget.fine" => &mut self.forget_fine,
            "forget.coarse" => &mut self.forget_coarse,
            "retain.fine" => &mut self.retain_fine,
            "retain.coarse" => &mut self.retain_coarse,
            _ => return false,
        };
        *slot = value;
        true
    }

    fn map(
        &self,
        other: &RawAccuracies,
        f: impl Fn(f64, f64) -> Result<f64>,
    ) -> Result<RawAccuracies> {
        Ok(RawAccuracies {
            forget_fine: f(self.forget_fine, other.forget_fine)?,
            forget_coarse: f(self.forget_coarse, other.forget_coarse)?,
            retain_fine: f(self.retain_fine, other.retain_fine)?,
            retain_coarse: f(self.retain_coarse, other.retain_coarse)?,
        })
    }

    /// Reads `prefix.forget.fine=...` style lines, values in percent.
    pub fn from_percent_lines(text: &str, prefix: &str, origin: &Path) -> Result<Self> {
        let mut out = RawAccuracies {
            forget_fine: f64::NAN,
            forget_coarse: f64::NAN,
            retain_fine: f64::NAN,
            retain_coarse: f64::NAN,
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    origin,
                    format!("line {}: expected key=value", lineno + 1),
                ));
            };
            let Some(key) = key
                .trim()
                .strip_prefix(prefix)
                .and_then(|k| k.strip_prefix('.'))
            else {
                continue;
            };
            let v: f64 = value.trim().parse().map_err(|_| {
                Error::parse(
                    origin,
                    format!("line {}: `{}` is not a number", lineno + 1, value.trim()),
                )
            })?;
            if !out.set(key, v / 100.0) {
                return Err(Error::parse(
                    origin,
                    format!("line {}: unknown key `{prefix}.{key}`", lineno + 1),
                ));
            }
        }
        for key in RawAccuracies::KEYS {
            if out.get(key).is_some_and(f64::is_nan) {
                return Err(Error::parse(origin, format!("missing `{prefix}.{key}`")));
            }
        }
        Ok(out)
    }
}

/// `acc_unlearned / acc_origin`, optionally clipped at 1.
pub fn scaled_accuracy(acc_unlearned: f64, acc_origin: f64, clip: bool) -> Result<f64> {
    if !(acc_origin > 0.0) {
        return Err(Error::Evaluation(format!(
            "original accuracy is {acc_origin}; scaled accuracy is undefined"
        )));
    }
    let ratio = acc_unlearned / acc_origin;
    Ok(if clip { ratio.min(1.0) } else { ratio })
}

/// Clipping used when none is requested: on for fine requests, off for
/// coarse ones.
pub fn default_clip(mode: Granularity) -> bool {
    mode == Granularity::Fine
}

pub fn quality(scaled: &RawAccuracies, mode: Granularity) -> f64 {
    match mode {
        Granularity::Fine => 1.0 - scaled.forget_fine,
        Granularity::Coarse => 1.0 - (scaled.forget_fine + scaled.forget_coarse) / 2.0,
    }
}

pub fn utility(scaled: &RawAccuracies, mode: Granularity) -> f64 {
    match mode {
        Granularity::Fine => {
            (scaled.retain_fine + scaled.retain_coarse + scaled.forget_coarse) / 3.0
        }
        Granularity::Coarse => (scaled.retain_fine + scaled.retain_coarse) / 2.0,
    }
}

/// Harmonic mean `2QU / (Q + U)`, zero when `Q + U = 0`.
pub fn qu_score(q: f64, u: f64) -> f64 {
    if q + u == 0.0 {
        0.0
    } else {
        2.0 * q * u / (q + u)
    }
}

/// Per-dataset zero-shot accuracies of the original and unlearned models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSummary {
    /// (dataset, origin accuracy, unlearned accuracy)
    pub datasets: Vec<(String, f64, f64)>,
    pub macro_origin: f64,
    pub macro_unlearned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default)]
    pub method: Option<String>,
    pub mode: Granularity,
    pub clip_scaled: bool,
    pub raw: RawAccuracies,
    pub origin: RawAccuracies,
    pub scaled: RawAccuracies,
    pub quality: f64,
    pub utility: f64,
    pub qu: f64,
    #[serde(default)]
    pub zero_shot: Option<ZeroShotSummary>,
}

/// Composes a report from unlearned and original accuracies.
pub fn compose_report(
    raw: RawAccuracies,
    origin: RawAccuracies,
    mode: Granularity,
    clip: bool,
) -> Result<MetricReport> {
    let scaled = raw.map(&origin, |u, o| scaled_accuracy(u, o, clip))?;
    let q = quality(&scaled, mode);
    let u = utility(&scaled, mode);
    Ok(MetricReport {
        method: None,
        mode,
        clip_scaled: clip,
        raw,
        origin,
        scaled,
        quality: q,
        utility: u,
        qu: qu_score(q, u),
        zero_shot: None,
    })
}

/// Round half-up to `decimals` places. The value is first snapped to 1e-9 so
/// that decimal ties stored just below the tie (`11.845` as `11.8449999...`)
/// still round up.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let p = 10f64.powi(decimals);
    let snapped = (x * p * 1e9).round() / 1e9;
    (snapped + 0.5).floor() / p
}

/// Percentage with two decimals, half-up.
pub fn pct(x: f64) -> String {
    format!("{:.2}", round_half_up(x * 100.0, 2))
}

impl MetricReport {
    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = Some(method.into());
        self
    }

    /// Line-delimited `key=value` block; accuracies as fractions.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.method {
            let _ = writeln!(out, "method={m}");
        }
        let _ = writeln!(out, "mode={}", self.mode);
        let _ = writeln!(out, "clip_scaled={}", self.clip_scaled);
        for (prefix, acc) in [
            ("raw", &self.raw),
            ("origin", &self.origin),
            ("scaled", &self.scaled),
        ] {
            for key in RawAccuracies::KEYS {
                let _ = writeln!(out, "{prefix}.{key}={:?}", acc.get(key).unwrap_or(f64::NAN));
            }
        }
        let _ = writeln!(out, "quality={:?}", self.quality);
        let _ = writeln!(out, "utility={:?}", self.utility);
        let _ = writeln!(out, "qu={:?}", self.qu);
        if let Some(z) = &self.zero_shot {
            for (name, o, u) in &z.datasets {
                let _ = writeln!(out, "zero_shot.{name}.origin={o:?}");
                let _ = writeln!(out, "zero_shot.{name}.unlearned={u:?}");
            }
            let _ = writeln!(out, "zero_shot.macro.origin={:?}", z.macro_origin);
            let _ = writeln!(out, "zero_shot.macro.unlearned={:?}", z.macro_unlearned);
        }
        out
    }

    /// Inverse of [`MetricReport::to_text`].
    pub fn parse_text(text: &str, origin: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(origin, format!("line {}: expected key=value", lineno + 1))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::parse(origin, format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(origin, format!("`{k}` is not a number")))
        };
        let acc = |prefix: &str| -> Result<RawAccuracies> {
            Ok(RawAccuracies {
                forget_fine: num(&format!("{prefix}.forget.fine"))?,
                forget_coarse: num(&format!("{prefix}.forget.coarse"))?,
                retain_fine: num(&format!("{prefix}.retain.fine"))?,
                retain_coarse: num(&format!("{prefix}.retain.coarse"))?,
            })
        };
        let mode: Granularity = get("mode")?
            .parse()
            .map_err(|_| Error::parse(origin, "bad `mode`"))?;
        let clip_scaled: bool = get("clip_scaled")?
            .parse()
            .map_err(|_| Error::parse(origin, "bad `clip_scaled`"))?;

        let mut names: Vec<String> = Vec::new();
        for k in kv.keys() {
            if let Some(rest) = k.strip_prefix("zero_shot.") {
                if let Some(name) = rest.strip_suffix(".origin") {
                    if name != "macro" {
                        names.push(name.to_string());
                    }
                }
            }
        }
        let zero_shot = if kv.contains_key("zero_shot.macro.origin") {
            let mut datasets = Vec::new();
            for name in names {
                datasets.push((
                    name.clone(),
                    num(&format!("zero_shot.{name}.origin"))?,
                    num(&format!("zero_shot.{name}.unlearned"))?,
                ));
            }
            Some(ZeroShotSummary {
                datasets,
                macro_origin: num("zero_shot.macro.origin")?,
                macro_unlearned: num("zero_shot.macro.unlearned")?,
            })
        } else {
            None
        };
        Ok(MetricReport {
            method: kv.get("method").cloned(),
            mode,
            clip_scaled,
            raw: acc("raw")?,
            origin: acc("origin")?,
            scaled: acc("scaled")?,
            quality: num("quality")?,
            utility: num("utility")?,
            qu: num("qu")?,
            zero_shot,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))
    }

    /// Reads a report written as JSON (`.json`) or as a key=value block.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            MetricReport::from_json(&text, path)
        } else {
            MetricReport::parse_text(&text, path)
        }
    }
}

/// Forget and retain test records of a partition.
fn partition_records<'a>(
    records: impl IntoIterator<Item = &'a Record>,
    partition: &ClassPartition,
) -> (Vec<&'a Record>, Vec<&'a Record>) {
    let mut forget = Vec::new();
    let mut retain = Vec::new();
    for r in records {
        if partition.is_forget(r.fine.as_str()) {
            forget.push(r);
        } else if partition.is_retain(r.fine.as_str()) {
            retain.push(r);
        }
    }
    (forget, retain)
}

/// The four raw accuracies of a model on `records`. Fine accuracies classify
/// over every fine class of the taxonomy, coarse ones over every coarse class.
pub fn raw_accuracies<'a, M: SimilarityModel + ?Sized>(
    model: &M,
    records: impl IntoIterator<Item = &'a Record>,
    taxonomy: &Taxonomy,
    partition: &ClassPartition,
    prompts: &PromptSet,
) -> Result<RawAccuracies> {
    let (forget, retain) = partition_records(records, partition);
    if forget.is_empty() {
        return Err(Error::Evaluation(
            "no test records for the forget classes".into(),
        ));
    }
    if retain.is_empty() {
        return Err(Error::Evaluation(
            "no test records for the retained classes".into(),
        ));
    }
    let fine = taxonomy.fine_classes();
    let coarse = taxonomy.coarse_classes();
    Ok(RawAccuracies {
        forget_fine: accuracy(
            model,
            forget.iter().copied(),
            Granularity::Fine,
            fine,
            prompts,
        )?,
        forget_coarse: accuracy(
            model,
            forget.iter().copied(),
            Granularity::Coarse,
            coarse,
            prompts,
        )?,
        retain_fine: accuracy(
            model,
            retain.iter().copied(),
            Granularity::Fine,
            fine,
            prompts,
        )?,
        retain_coarse: accuracy(
            model,
            retain.iter().copied(),
            Granularity::Coarse,
            coarse,
            prompts,
        )?,
    })
}

/// Where the original model's accuracies come from.
pub enum Origin<'a, M: ?Sized> {
    Model(&'a M),
    Cached(RawAccuracies),
}

/// Evaluates the unlearned model on the test split of `manifest`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<M: SimilarityModel + ?Sized>(
    unlearned: &M,
    origin: Origin<'_, M>,
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    partition: &ClassPartition,
    mode: Granularity,
    clip: bool,
    prompts: &PromptSet,
) -> Result<MetricReport> {
    let test: Vec<&Record> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Evaluation("manifest has no test records".into()));
    }
    let raw = raw_accuracies(
        unlearned,
        test.iter().copied(),
        taxonomy,
        partition,
        prompts,
    )?;
    let origin = match origin {
        Origin::Model(m) => raw_accuracies(m, test.iter().copied(), taxonomy, partition, prompts)?,
        Origin::Cached(acc) => acc,
    };
    compose_report(raw, origin, mode, clip)
}

/// Accuracy of both models on every dataset of a zero-shot suite, each
/// classified over its own classes.
pub fn zero_shot_suite<M: SimilarityModel + ?Sized>(
    unlearned: &M,
    origin: &M,
    suite: &[LabeledSet],
    prompts: &PromptSet,
) -> Result<ZeroShotSummary> {
    if suite.is_empty() {
        return Err(Error::Evaluation("zero-shot suite is empty".into()));
    }
    let mut datasets = Vec::with_capacity(suite.len());
    for set in suite {
        let pairs = set.pairs();
        let o = labelled_accuracy(origin, &pairs, &set.classes, prompts)?;
        let u = labelled_accuracy(unlearned, &pairs, &set.classes, prompts)?;
        datasets.push((set.name.clone(), o, u));
    }
    let n = datasets.len() as f64;
    Ok(ZeroShotSummary {
        macro_origin: datasets.iter().map(|d| d.1).sum::<f64>() / n,
        macro_unlearned: datasets.iter().map(|d| d.2).sum::<f64>() / n,
        datasets,
    })
}

/// Per-class statistic used to rank memorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceStatistic {
    /// Zero-shot accuracy of the class's examples.
    Accuracy,
    /// Mean softmax probability assigned to the true class.
    MeanConfidence,
}

/// Lower bounds of the difficult and medium buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrataThresholds {
    pub difficult: f64,
    pub medium: f64,
}

impl Default for StrataThresholds {
    fn default() -> Self {
        StrataThresholds {
            difficult: 0.90,
            medium: 0.78,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyStrata {
    pub difficult: Vec<ClassId>,
    pub medium: Vec<ClassId>,
    pub easy: Vec<ClassId>,
    pub thresholds: StrataThresholds,
    pub statistic: ConfidenceStatistic,
    /// Per-class statistic behind the bucketing.
    pub scores: BTreeMap<ClassId, f64>,
}

/// Buckets `fine_classes` by how well the model recognizes them: at or above
/// `thresholds.difficult` is difficult (strongly memorized), at or above
/// `thresholds.medium` is medium, the rest easy. Classes without examples are
/// skipped with a warning.
pub fn stratify_by_confidence<M: SimilarityModel + ?Sized>(
    model: &M,
    fine_classes: &[ClassId],
    eval_data: &[(&[f64], &ClassId)],
    thresholds: StrataThresholds,
    statistic: ConfidenceStatistic,
    prompts: &PromptSet,
) -> Result<DifficultyStrata> {
    if fine_classes.len() < 2 {
        return Err(Error::DegenerateScope(fine_classes.len()));
    }
    let bank = ClassBank::build(model, fine_classes, prompts)?;
    let mut strata = DifficultyStrata {
        difficult: Vec::new(),
        medium: Vec::new(),
        easy: Vec::new(),
        thresholds,
        statistic,
        scores: BTreeMap::new(),
    };
    for (pos, class) in fine_classes.iter().enumerate() {
        let examples: Vec<&[f64]> = eval_data
            .iter()
            .filter(|(_, c)| *c == class)
            .map(|(x, _)| *x)
            .collect();
        if examples.is_empty() {
            log::warn!("class `{class}` has no evaluation records; left out of the strata");
            continue;
        }
        let mut total = 0.0;
        for x in &examples {
            let u = model.embed_input(x)?;
            total += match statistic {
                ConfidenceStatistic::Accuracy => f64::from(u8::from(bank.classify(&u) == class)),
                ConfidenceStatistic::MeanConfidence => bank.probabilities(&u)[pos],
            };
        }
        let score = total / examples.len() as f64;
        strata.scores.insert(class.clone(), score);
        if score >= thresholds.difficult {
            strata.difficult.push(class.clone());
        } else if score >= thresholds.medium {
            strata.medium.push(class.clone());
        } else {
            strata.easy.push(class.clone());
        }
    }
    Ok(strata)
}

/// Evaluates on an out-of-domain labelled set whose class names map onto
/// taxonomy fine classes through `name_mapping`.
#[allow(clippy::too_many_arguments)]
pub fn ood_evaluate<M: SimilarityModel + ?Sized>(
    unlearned: &M,
    origin: Origin<'_, M>,
    ood: &LabeledSet,
    name_mapping: &BTreeMap<ClassId, ClassId>,
    taxonomy: &Taxonomy,
    partition: &ClassPartition,
    mode: Granularity,
    clip: bool,
    prompts: &PromptSet,
) -> Result<MetricReport> {
    let unmapped: Vec<String> = ood
        .classes
        .iter()
        .filter(|c| {
            !name_mapping
                .get(*c)
                .is_some_and(|f| taxonomy.is_fine(f.as_str()))
        })
        .map(|c| c.to_string())
        .collect();
    if !unmapped.is_empty() {
        return Err(Error::Validation(format!(
            "out-of-domain classes without a taxonomy mapping: {}",
            unmapped.join(", ")
        )));
    }
    let records = ood
        .examples
        .iter()
        .enumerate()
        .map(|(i, (x, c))| {
            let fine = name_mapping[c].clone();
            Ok(Record {
                id: format!("{}/{i}", ood.name),
                input: Input::Vector(x.clone()),
                coarse: taxonomy.parent_of(fine.as_str())?.clone(),
                fine,
                split: Split::Test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(
        unlearned,
        origin,
        &DatasetManifest::new(records),
        taxonomy,
        partition,
        mode,
        clip,
        prompts,
    )
}

/// Column headers of the comparison table.
pub const TABLE_COLUMNS: [&str; 9] = [
    "Method",
    "Df coarse",
    "Df fine",
    "Dr coarse",
    "Dr fine",
    "Quality",
    "Utility",
    "Q-U",
    "Zero-shot",
];

fn table_rows(reports: &[MetricReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.method.clone().unwrap_or_else(|| format!("run{}", i + 1)),
                pct(r.raw.forget_coarse),
                pct(r.raw.forget_fine),
                pct(r.raw.retain_coarse),
                pct(r.raw.retain_fine),
                pct(r.quality),
                pct(r.utility),
                pct(r.qu),
                r.zero_shot
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |z| pct(z.macro_unlearned)),
            ]
        })
        .collect()
}

/// Aligned plain-text comparison table, one row per report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let rows = table_rows(reports);
    let widths: Vec<usize> = (0..TABLE_COLUMNS.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([TABLE_COLUMNS[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = widths[c]);
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(TABLE_COLUMNS.to_vec());
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Comma-separated version of [`render_table`].
pub fn render_csv(reports: &[MetricReport]) -> String {
    let mut out = TABLE_COLUMNS.join(",");
    out.push('\n');
    for row in table_rows(reports) {
        let escaped: Vec<String> = row
            .into_iter()
            .map(|c| {
                if c.contains([',', '"']) {
                    format!("\"{}\"", c.replace('"', "\"\""))
                } else {
                    c
                }
            })
            .collect();
        out.push_str(&escaped.join(","));
        out.push('\n');
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bar chart of Quality, Utility and Q-U per method, as SVG.
pub fn render_bar_chart(reports: &[MetricReport]) -> String {
    const COLORS: [&str; 3] = ["#4c72b0", "#55a868", "#c44e52"];
    const SERIES: [&str; 3] = ["Quality", "Utility", "Q-U"];
    let (bar, gap, left, top, plot_h) = (18.0, 24.0, 50.0, 30.0, 200.0);
    let group = 3.0 * bar + gap;
    let width = left + group * reports.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 60.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for tick in [0, 25, 50, 75, 100] {
        let y = top + plot_h * (1.0 - f64::from(tick) / 100.0);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
            width - 10.0,
            left - 6.0,
            y + 4.0
        );
    }
    for (i, r) in reports.iter().enumerate() {
        let x0 = left + gap / 2.0 + group * i as f64;
        for (s, value) in [r.quality, r.utility, r.qu].into_iter().enumerate() {
            let h = plot_h * value.clamp(0.0, 1.0);
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{bar}" height="{h}" fill="{}"><title>{} {}</title></rect>"#,
                x0 + bar * s as f64,
                top + plot_h - h,
                COLORS[s],
                SERIES[s],
                pct(value)
            );
        }
        let name = r.method.clone().unwrap_or_else(|| format!("run{}", i + 1));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + 1.5 * bar,
            top + plot_h + 16.0,
            xml_escape(&name)
        );
    }
    for (s, label) in SERIES.iter().enumerate() {
        let x = left + 90.0 * s as f64;
        let y = top + plot_h + 36.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{label}</text>"#,
            y - 9.0,
            COLORS[s],
            x + 14.0,
            y
        );
    }
    svg.push_str("</svg>\n");
    svg
}
