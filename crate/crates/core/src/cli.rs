//! Command-line front end: dataset building, toy pretraining, unlearning,
//! evaluation and report aggregation.
//!
//! Exit codes: 0 success, 3 training divergence, 2 any other failure
//! (validation, configuration, unreadable or missing files).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sha2::{Digest, Sha256};

use crate::config::{ConfigMap, DataSource, RequestSpec, RunConfig};
use crate::datasets::presets::request_preset;
use crate::datasets::{
    assemble_forget_dataset, build_breed_style, filter_compcars_style, generate_general_suite,
    generate_synthetic, load_prompts, CompcarsRules, DatasetManifest, LabeledSet, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    compose_report, evaluate, ood_evaluate, render_bar_chart, render_csv, render_table,
    zero_shot_suite, MetricReport, Origin, RawAccuracies,
};
use crate::model::{
    accuracy, load_external_checkpoint, restore, ExternalModel, PromptSet, ToyModel,
};
use crate::taxonomy::{
    resolve_request, ClassId, ClassPartition, Granularity, Taxonomy, UnlearnRequest,
};
use crate::trainer::{history_to_text, pretrain_toy, run_unlearning};

#[derive(Debug, Parser)]
#[command(
    name = "hier-unlearn",
    version,
    about = "Concept-level unlearning over class taxonomies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset or filter an existing manifest.
    BuildDataset {
        #[command(flatten)]
        common: Overrides,
        /// Builder applied to a manifest given by data.manifest.
        #[arg(long, value_enum, default_value_t = Builder::None)]
        builder: Builder,
        /// Training records kept per fine class by the breed builder.
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Also emit a flat general suite with this many classes (synthetic
        /// data only).
        #[arg(long, default_value_t = 0)]
        general_classes: usize,
    },
    /// Train a toy model from scratch on a manifest.
    Pretrain {
        #[command(flatten)]
        common: Overrides,
    },
    /// Unlearn the requested classes from a toy checkpoint.
    Unlearn {
        #[command(flatten)]
        common: Overrides,
    },
    /// Score an unlearned checkpoint against the original.
    Evaluate {
        #[command(flatten)]
        common: Overrides,
        /// The unlearned checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Row label in the report; defaults to the method name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Aggregate report files into a comparison table and chart.
    Report {
        /// Report files (`.txt` key=value or `.json`).
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Builder {
    None,
    Compcars,
    Breed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Flags shared by the run subcommands. Each maps onto a config key and
/// overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Method preset, `method[:toy|:full]`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Unlearning method, e.g. `hga_kl`, `ga`, `npo_kl`, `salun`, `task_vector`.
    #[arg(long)]
    pub method: Option<String>,
    /// Hinge margin.
    #[arg(long)]
    pub margin: Option<f64>,
    /// NPO inverse temperature.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Weight of the coarse-level KL term.
    #[arg(long = "alpha-c")]
    pub alpha_c: Option<f64>,
    /// Weight of the fine-level KL term.
    #[arg(long = "alpha-f")]
    pub alpha_f: Option<f64>,
    /// Task-vector negation scale.
    #[arg(long = "tv-scale")]
    pub tv_scale: Option<f64>,
    /// Fraction of parameters kept by the saliency mask.
    #[arg(long = "salun-fraction")]
    pub salun_fraction: Option<f64>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Forget-set batch size.
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Run seed; falls back to HIER_UNLEARN_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metric mode, `fine` or `coarse`.
    #[arg(long)]
    pub mode: Option<Granularity>,
    /// Clip scaled accuracies at 1; default depends on the mode.
    #[arg(long = "clip-scaled", value_enum)]
    pub clip_scaled: Option<Switch>,
    /// File of `unlearned.<key>=<pct>` and `origin.<key>=<pct>` lines.
    #[arg(long = "inject-raw")]
    pub inject_raw: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (tab-separated).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Taxonomy file (tab-separated).
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Base checkpoint (the model before unlearning).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated forget targets.
    #[arg(long)]
    pub targets: Option<String>,
    /// Granularity of `--targets`, `fine` or `coarse`.
    #[arg(long)]
    pub granularity: Option<Granularity>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    /// Config file values overlaid with flag values.
    pub fn to_map(&self) -> Result<ConfigMap> {
        let mut map = match &self.config {
            Some(p) => ConfigMap::load(p)?,
            None => ConfigMap::new(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            map.set(k.trim(), v.trim())?;
        }
        let show = |p: &PathBuf| p.display().to_string();
        let flags: [(&str, Option<String>); 21] = [
            ("preset", self.preset.clone()),
            ("method.name", self.method.clone()),
            ("method.margin", self.margin.map(|v| v.to_string())),
            ("method.beta", self.beta.map(|v| v.to_string())),
            ("method.alpha_c", self.alpha_c.map(|v| v.to_string())),
            ("method.alpha_f", self.alpha_f.map(|v| v.to_string())),
            ("method.tv_scale", self.tv_scale.map(|v| v.to_string())),
            (
                "method.salun_fraction",
                self.salun_fraction.map(|v| v.to_string()),
            ),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.lr", self.lr.map(|v| v.to_string())),
            ("train.batch_size", self.batch_size.map(|v| v.to_string())),
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("eval.mode", self.mode.map(|v| v.to_string())),
            (
                "eval.clip_scaled",
                self.clip_scaled
                    .map(|s| if s == Switch::On { "on" } else { "off" }.to_string()),
            ),
            ("eval.inject_raw", self.inject_raw.as_ref().map(show)),
            ("out", self.out.as_ref().map(show)),
            ("data.manifest", self.manifest.as_ref().map(show)),
            ("data.taxonomy", self.taxonomy.as_ref().map(show)),
            ("model.checkpoint", self.model.as_ref().map(show)),
            ("request.targets", self.targets.clone()),
            (
                "request.granularity",
                self.granularity.map(|g| g.to_string()),
            ),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                map.set(key, v)?;
            }
        }
        Ok(map)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(&self.to_map()?)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDataset {
            common,
            builder,
            per_class,
            general_classes,
        } => cmd_build_dataset(&common.resolve()?, builder, per_class, general_classes),
        Command::Pretrain { common } => cmd_pretrain(&common.resolve()?),
        Command::Unlearn { common } => cmd_unlearn(&common.resolve()?).map(|_| ()),
        Command::Evaluate {
            common,
            checkpoint,
            label,
        } => cmd_evaluate(&common.resolve()?, checkpoint.as_deref(), label.as_deref()).map(|_| ()),
        Command::Report { reports, out } => cmd_report(&reports, out.as_deref()).map(|_| ()),
    }
}

fn out_dir(config: &RunConfig) -> Result<&Path> {
    let dir = config
        .out
        .as_deref()
        .ok_or_else(|| Error::Validation("no output directory; pass --out".into()))?;
    std::fs::create_dir_all(dir)?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    info!("wrote {}", path.display());
    Ok(path)
}

/// Lowercase hex SHA-256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

fn load_data(config: &RunConfig) -> Result<(DatasetManifest, Taxonomy)> {
    match &config.data {
        Some(DataSource::Files { manifest, taxonomy }) => {
            let taxonomy = Taxonomy::load(taxonomy)?;
            let manifest = DatasetManifest::load(manifest)?;
            manifest.validate(&taxonomy)?;
            Ok((manifest, taxonomy))
        }
        Some(DataSource::Synth(spec)) => generate_synthetic(spec),
        None => Err(Error::Validation(
            "no data: set data.manifest and data.taxonomy, or synth.* keys".into(),
        )),
    }
}

fn partition_for(config: &RunConfig, taxonomy: &Taxonomy) -> Result<ClassPartition> {
    let request = match &config.request {
        Some(RequestSpec::Preset(name)) => request_preset(name)?,
        Some(RequestSpec::Targets {
            targets,
            granularity,
        }) => UnlearnRequest::new(targets.iter().map(String::as_str), *granularity),
        None => {
            return Err(Error::Validation(
                "no forget request: set request.targets or request.preset".into(),
            ))
        }
    };
    resolve_request(taxonomy, &request)
}

fn load_base(config: &RunConfig) -> Result<ExternalModel> {
    let path = config.checkpoint.as_deref().ok_or_else(|| {
        Error::Validation("no base checkpoint: set model.checkpoint or --model".into())
    })?;
    load_external_checkpoint(path, &config.checkpoint_format)
}

/// Every test-split record of a flat suite manifest, named after the file.
fn load_suite(path: &Path, split: Split) -> Result<LabeledSet> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "suite".into());
    LabeledSet::from_manifest(name, &DatasetManifest::load(path)?, split)
}

fn write_data(
    dir: &Path,
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    audit: &str,
) -> Result<()> {
    manifest.save(&dir.join("manifest.tsv"))?;
    taxonomy.save(&dir.join("taxonomy.tsv"))?;
    write(dir, "audit.txt", audit)?;
    Ok(())
}

pub fn cmd_build_dataset(
    config: &RunConfig,
    builder: Builder,
    per_class: usize,
    general_classes: usize,
) -> Result<()> {
    let dir = out_dir(config)?;
    let (manifest, taxonomy) = load_data(config)?;
    let synth = match &config.data {
        Some(DataSource::Synth(spec)) => Some(spec),
        _ => None,
    };
    match builder {
        Builder::None => write_data(dir, &manifest, &taxonomy, "")?,
        Builder::Compcars => {
            let model = load_base(config)?;
            let prompts = load_prompts(&config.prompts)?;
            let outcome = filter_compcars_style(
                &manifest,
                &taxonomy,
                &model,
                &prompts,
                &CompcarsRules::default(),
            )?;
            write_data(
                dir,
                &outcome.manifest,
                &outcome.taxonomy,
                &outcome.audit_text(),
            )?;
        }
        Builder::Breed => {
            let outcome = build_breed_style(&manifest, &taxonomy, per_class, config.train.seed)?;
            write_data(
                dir,
                &outcome.manifest,
                &outcome.taxonomy,
                &outcome.audit_text(),
            )?;
        }
    }
    if general_classes > 0 {
        let spec = synth
            .ok_or_else(|| Error::Validation("--general-classes needs synthetic data".into()))?;
        let (train, test) =
            generate_general_suite(spec.dim, general_classes, 40, 20, 4.0, 0.25, spec.seed)?;
        let mut records = train.to_manifest(Split::Train).records;
        records.extend(
            test.to_manifest(Split::Test)
                .records
                .into_iter()
                .map(|mut r| {
                    r.id = format!("{}-test", r.id);
                    r
                }),
        );
        DatasetManifest::new(records).save(&dir.join("general.tsv"))?;
    }
    write(dir, "resolved.cfg", config.to_text())?;
    println!("dataset written to {}", dir.display());
    Ok(())
}

pub fn cmd_pretrain(config: &RunConfig) -> Result<()> {
    let dir = out_dir(config)?;
    let (manifest, taxonomy) = load_data(config)?;
    let prompts = load_prompts(&config.prompts)?;
    let mut general: Option<LabeledSet> = None;
    for path in &config.pretrain_general {
        let set = load_suite(path, Split::Train)?;
        general = Some(match general {
            None => set,
            Some(mut g) => {
                g.examples.extend(set.examples);
                LabeledSet::new("general", g.examples)
            }
        });
    }
    let mut classes: Vec<ClassId> = taxonomy.fine_classes().to_vec();
    classes.extend(taxonomy.coarse_classes().iter().cloned());
    if let Some(g) = &general {
        classes.extend(
            g.classes
                .iter()
                .filter(|c| !classes.contains(c))
                .cloned()
                .collect::<Vec<_>>(),
        );
    }
    let mut toy = config.toy;
    toy.input_dim = manifest
        .records
        .first()
        .ok_or_else(|| Error::Validation("manifest has no records".into()))?
        .vector()?
        .len();
    let mut model = ToyModel::new(toy, &classes, prompts.templates(), config.train.seed)?;
    let losses = pretrain_toy(
        &mut model,
        &manifest,
        &taxonomy,
        general.as_ref(),
        &prompts,
        &config.pretrain,
    )?;
    let fine = taxonomy.fine_classes();
    let train_acc = accuracy(
        &model,
        manifest.split(Split::Train),
        Granularity::Fine,
        fine,
        &prompts,
    )?;
    let test_acc = accuracy(
        &model,
        manifest.split(Split::Test),
        Granularity::Fine,
        fine,
        &prompts,
    )?;
    let path = dir.join("model.bin");
    model.save(&path)?;
    let mut curve = String::from("# epoch\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(curve, "{}\t{l:?}", i + 1);
    }
    write(dir, "pretrain_loss.tsv", curve)?;
    write(dir, "resolved.cfg", config.to_text())?;
    println!(
        "pretrained {} classes: fine accuracy train {:.4} test {:.4}; checkpoint {} sha256 {}",
        classes.len(),
        train_acc,
        test_acc,
        path.display(),
        file_digest(&path)?
    );
    Ok(())
}

/// Paths and digest of a finished unlearning run.
#[derive(Debug, Clone)]
pub struct UnlearnOutputs {
    pub checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub history: PathBuf,
    pub resolved: PathBuf,
    pub digest: String,
}

pub fn cmd_unlearn(config: &RunConfig) -> Result<UnlearnOutputs> {
    let dir = out_dir(config)?;
    let (manifest, taxonomy) = load_data(config)?;
    let partition = partition_for(config, &taxonomy)?;
    let ExternalModel::Toy(base) = load_base(config)? else {
        return Err(Error::Validation(
            "unlearning needs a trainable checkpoint (format toy-v1)".into(),
        ));
    };
    let prompts = load_prompts(&config.prompts)?;
    let forget = assemble_forget_dataset(&manifest, &taxonomy, &partition, config.budget)?;
    info!(
        "unlearning {} with {} forget records",
        config.train.loss.method,
        forget.len()
    );
    // the resolved record goes first so a diverged run can still be replayed
    let resolved = write(dir, "resolved.cfg", config.to_text())?;
    let result = run_unlearning(&base, &forget, &prompts, &config.train)?;

    let mut selected = base.clone();
    restore(&mut selected, &result.selected_checkpoint)?;
    let checkpoint = dir.join("checkpoint.bin");
    selected.save(&checkpoint)?;
    let mut last = base;
    restore(&mut last, &result.final_model)?;
    let final_checkpoint = dir.join("final.bin");
    last.save(&final_checkpoint)?;
    let history = write(dir, "history.tsv", history_to_text(&result.history))?;
    let digest = file_digest(&checkpoint)?;
    write(
        dir,
        "checkpoint.sha256",
        format!("{digest}  checkpoint.bin\n"),
    )?;
    println!(
        "selected epoch {} ({:?}); checkpoint {} sha256 {}",
        result.selected_epoch,
        result.stop_reason,
        checkpoint.display(),
        digest
    );
    Ok(UnlearnOutputs {
        checkpoint,
        final_checkpoint,
        history,
        resolved,
        digest,
    })
}

fn parse_ood_map(path: &Path) -> Result<BTreeMap<ClassId, ClassId>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (from, to) = line.split_once('\t').ok_or_else(|| {
            Error::parse(
                path,
                format!("line {}: expected `ood_class<TAB>class`", lineno + 1),
            )
        })?;
        map.insert(ClassId::new(from.trim()), ClassId::new(to.trim()));
    }
    Ok(map)
}

pub fn cmd_evaluate(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    label: Option<&str>,
) -> Result<MetricReport> {
    let label = label
        .unwrap_or(config.train.loss.method.as_str())
        .to_string();
    let mode = config.eval.mode;
    let clip = config.eval.clip_scaled;
    let mut ood_report = None;
    let report = if let Some(path) = &config.eval.inject_raw {
        let text = std::fs::read_to_string(path)?;
        let raw = RawAccuracies::from_percent_lines(&text, "unlearned", path)?;
        let origin = RawAccuracies::from_percent_lines(&text, "origin", path)?;
        compose_report(raw, origin, mode, clip)?
    } else {
        let checkpoint = checkpoint.ok_or_else(|| {
            Error::Validation("no unlearned checkpoint; pass --checkpoint".into())
        })?;
        let (manifest, taxonomy) = load_data(config)?;
        let partition = partition_for(config, &taxonomy)?;
        let prompts: PromptSet = load_prompts(&config.prompts)?;
        let base = load_base(config)?;
        let unlearned = load_external_checkpoint(checkpoint, &config.checkpoint_format)?;
        let mut report = evaluate(
            &unlearned,
            Origin::Model(&base),
            &manifest,
            &taxonomy,
            &partition,
            mode,
            clip,
            &prompts,
        )?;
        if !config.eval.zero_shot.is_empty() {
            let suites = config
                .eval
                .zero_shot
                .iter()
                .map(|p| load_suite(p, Split::Test))
                .collect::<Result<Vec<_>>>()?;
            report.zero_shot = Some(zero_shot_suite(&unlearned, &base, &suites, &prompts)?);
        }
        if let (Some(ood), Some(map)) = (&config.eval.ood, &config.eval.ood_map) {
            let ood_set = load_suite(ood, Split::Test)?;
            let mapping = parse_ood_map(map)?;
            ood_report = Some(
                ood_evaluate(
                    &unlearned,
                    Origin::Model(&base),
                    &ood_set,
                    &mapping,
                    &taxonomy,
                    &partition,
                    mode,
                    clip,
                    &prompts,
                )?
                .with_method(label.clone()),
            );
        }
        report
    }
    .with_method(label);
    if let Some(dir) = config.out.as_deref() {
        std::fs::create_dir_all(dir)?;
        write(dir, "report.txt", report.to_text())?;
        write(dir, "report.json", report.to_json())?;
        if let Some(ood) = &ood_report {
            write(dir, "ood_report.txt", ood.to_text())?;
            write(dir, "ood_report.json", ood.to_json())?;
        }
        write(dir, "resolved.cfg", config.to_text())?;
    }
    print!("{}", report.to_text());
    if let Some(ood) = &ood_report {
        println!("# out-of-domain");
        print!("{}", ood.to_text());
    }
    Ok(report)
}

pub fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Validation("no report files given".into()));
    }
    let reports = paths
        .iter()
        .map(|p| MetricReport::load(p))
        .collect::<Result<Vec<_>>>()?;
    let table = render_table(&reports);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write(dir, "table.txt", &table)?;
        write(dir, "table.csv", render_csv(&reports))?;
        write(dir, "chart.svg", render_bar_chart(&reports))?;
    }
    print!("{table}");
    Ok(table)
}
