//! Run configuration: flat `key = value` files with section prefixes.
//!
//! Precedence, lowest first: built-in defaults, the config file, command-line
//! flags. When neither the file nor a flag sets `train.seed`, the
//! `HIER_UNLEARN_SEED` environment variable is used, then 0. A resolved
//! config materializes every default, so writing it back out and loading it
//! again reproduces the run exactly.
//!
//! ```text
//! # comments start with '#'
//! data.manifest = data/manifest.tsv
//! data.taxonomy = data/taxonomy.tsv
//! request.targets = f_0_0, f_1_1
//! method.name = hga_kl
//! train.epochs = 8
//! eval.mode = fine
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datasets::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::default_clip;
use crate::losses::{KlFineSupport, LossConfig, Method, Temperature};
use crate::model::ToyConfig;
use crate::taxonomy::Granularity;
use crate::trainer::{PretrainConfig, TrainConfig};

pub const SEED_ENV: &str = "HIER_UNLEARN_SEED";

/// Every key a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "preset",
    "out",
    "data.manifest",
    "data.taxonomy",
    "data.prompts",
    "synth.n_coarse",
    "synth.fine_per_coarse",
    "synth.dim",
    "synth.train_per_fine",
    "synth.test_per_fine",
    "synth.coarse_separation",
    "synth.fine_separation",
    "synth.noise",
    "synth.seed",
    "request.preset",
    "request.targets",
    "request.granularity",
    "model.checkpoint",
    "model.format",
    "model.hidden_dim",
    "model.embed_dim",
    "model.init_logit_scale",
    "model.text_init_norm",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.coarse_weight",
    "pretrain.general_weight",
    "pretrain.general",
    "method.name",
    "method.margin",
    "method.beta",
    "method.alpha_c",
    "method.alpha_f",
    "method.relabel_seed",
    "method.tv_scale",
    "method.salun_fraction",
    "method.temperature",
    "method.kl_fine_support",
    "train.preset",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.seed",
    "train.patience",
    "train.eval_every",
    "train.stop_level",
    "train.budget",
    "eval.mode",
    "eval.clip_scaled",
    "eval.zero_shot",
    "eval.ood",
    "eval.ood_map",
    "eval.inject_raw",
];

/// Unresolved key/value pairs in insertion-independent order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        ConfigMap::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut map = ConfigMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    origin,
                    format!("line {}: expected `key = value`", lineno + 1),
                )
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::parse(
                    origin,
                    format!("line {}: unknown key `{key}`", lineno + 1),
                ));
            }
            if map
                .entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::parse(
                    origin,
                    format!("line {}: duplicate key `{key}`", lineno + 1),
                ));
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ConfigMap::parse(&text, path)
    }

    /// Sets a key, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn paths(&self, key: &str) -> Vec<PathBuf> {
        list(self.get(key)).into_iter().map(PathBuf::from).collect()
    }
}

fn list(value: Option<&str>) -> Vec<String> {
    value
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn on_off(key: &str, value: &str) -> Result<Option<bool>> {
    match value.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" => Ok(Some(true)),
        "off" | "false" | "no" => Ok(Some(false)),
        "auto" => Ok(None),
        other => Err(Error::Config(format!(
            "`{key}` must be on, off or auto, got `{other}`"
        ))),
    }
}

/// Learning-rate preset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPreset {
    /// Desk-scale settings for the toy model.
    Toy,
    /// The method's full-scale learning rate.
    Full,
}

impl FromStr for TrainPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "toy" => Ok(TrainPreset::Toy),
            "full" => Ok(TrainPreset::Full),
            other => Err(Error::Config(format!(
                "train preset must be toy or full, got `{other}`"
            ))),
        }
    }
}

impl TrainPreset {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainPreset::Toy => "toy",
            TrainPreset::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files {
        manifest: PathBuf,
        taxonomy: PathBuf,
    },
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestSpec {
    /// A named request preset.
    Preset(String),
    Targets {
        targets: Vec<String>,
        granularity: Granularity,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub mode: Granularity,
    pub clip_scaled: bool,
    pub zero_shot: Vec<PathBuf>,
    pub ood: Option<PathBuf>,
    pub ood_map: Option<PathBuf>,
    pub inject_raw: Option<PathBuf>,
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub prompts: String,
    pub request: Option<RequestSpec>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_format: String,
    pub toy: ToyConfig,
    pub pretrain: PretrainConfig,
    /// Flat zero-shot manifests folded into pretraining.
    pub pretrain_general: Vec<PathBuf>,
    pub train_preset: TrainPreset,
    pub train: TrainConfig,
    /// Per-class cap on forget records; `None` uses them all.
    pub budget: Option<usize>,
    pub eval: EvalSettings,
    pub out: Option<PathBuf>,
}

/// Splits `preset = method[:toy|:full]`.
fn split_preset(value: &str) -> Result<(Method, Option<TrainPreset>)> {
    let (m, p) = match value.split_once(':') {
        Some((m, p)) => (m, Some(p.parse()?)),
        None => (value, None),
    };
    Ok((m.parse()?, p))
}

impl RunConfig {
    /// Resolves a key map against defaults. `env_seed` is the fallback seed
    /// source, normally the `HIER_UNLEARN_SEED` variable.
    pub fn resolve_with(map: &ConfigMap, env_seed: Option<&str>) -> Result<Self> {
        let data = resolve_data(map)?;

        let request = match (map.get("request.preset"), map.get("request.targets")) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either request.preset or request.targets, not both".into(),
                ))
            }
            (Some(p), None) => Some(RequestSpec::Preset(p.trim().to_string())),
            (None, Some(t)) => Some(RequestSpec::Targets {
                targets: list(Some(t)),
                granularity: map
                    .parsed("request.granularity")?
                    .unwrap_or(Granularity::Fine),
            }),
            (None, None) => None,
        };

        let (preset_method, preset_train) = match map.get("preset") {
            Some(v) => {
                let (m, p) = split_preset(v)?;
                (Some(m), p)
            }
            None => (None, None),
        };
        let named_method: Option<Method> = map.parsed("method.name")?;
        if let (Some(a), Some(b)) = (preset_method, named_method) {
            if a != b {
                return Err(Error::Config(format!(
                    "preset selects {a} but method.name is {b}"
                )));
            }
        }
        let method = named_method.or(preset_method).unwrap_or(Method::HgaKl);
        let named_train: Option<TrainPreset> = map.parsed("train.preset")?;
        if let (Some(a), Some(b)) = (preset_train, named_train) {
            if a != b {
                return Err(Error::Config(format!(
                    "preset selects {} but train.preset is {}",
                    a.as_str(),
                    b.as_str()
                )));
            }
        }
        let train_preset = named_train.or(preset_train).unwrap_or(TrainPreset::Toy);

        let seed = match map.parsed::<u64>("train.seed")? {
            Some(s) => s,
            None => match env_seed.map(str::trim).filter(|s| !s.is_empty()) {
                Some(s) => s.parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))
                })?,
                None => 0,
            },
        };

        let mut train = match train_preset {
            TrainPreset::Toy => TrainConfig::toy(method),
            TrainPreset::Full => TrainConfig::full_scale(method),
        };
        train.seed = seed;
        let mut loss = LossConfig::for_method(method);
        loss.relabel_seed = seed;
        if let Some(v) = map.parsed("method.margin")? {
            loss.margin = v;
        }
        if let Some(v) = map.parsed("method.beta")? {
            loss.beta = v;
        }
        if let Some(v) = map.parsed("method.alpha_c")? {
            loss.alpha_c = v;
        }
        if let Some(v) = map.parsed("method.alpha_f")? {
            loss.alpha_f = v;
        }
        if let Some(v) = map.parsed("method.relabel_seed")? {
            loss.relabel_seed = v;
        }
        if let Some(v) = map.parsed("method.tv_scale")? {
            loss.tv_scale = v;
        }
        if let Some(v) = map.parsed("method.salun_fraction")? {
            loss.salun_fraction = v;
        }
        if let Some(v) = map.parsed::<Temperature>("method.temperature")? {
            loss.temperature = v;
        }
        if let Some(v) = map.parsed::<KlFineSupport>("method.kl_fine_support")? {
            loss.kl_fine_support = v;
        }
        train.loss = loss;
        if let Some(v) = map.parsed("train.epochs")? {
            train.epochs = v;
        }
        if let Some(v) = map.parsed("train.batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = map.parsed("train.lr")? {
            train.learning_rate = v;
        }
        if let Some(v) = map.get("train.patience") {
            train.early_stop_patience = match v.trim().to_ascii_lowercase().as_str() {
                "none" | "inf" | "off" => None,
                n => Some(n.parse().map_err(|_| {
                    Error::Config(format!(
                        "`train.patience`: expected integer or none, got `{v}`"
                    ))
                })?),
            };
        }
        if let Some(v) = map.parsed("train.eval_every")? {
            train.eval_every = v;
        }
        if let Some(v) = map.parsed("train.stop_level")? {
            train.stop_level = v;
        }
        train.validate()?;

        let budget = match map.get("train.budget").map(str::trim) {
            None | Some("all") => None,
            Some(v) => Some(v.parse::<usize>().ok().filter(|b| *b >= 1).ok_or_else(|| {
                Error::Config(format!(
                    "`train.budget`: expected a positive integer or all, got `{v}`"
                ))
            })?),
        };

        let mut toy = ToyConfig::default();
        if let Some(DataSource::Synth(spec)) = &data {
            toy.input_dim = spec.dim;
        }
        if let Some(v) = map.parsed("model.hidden_dim")? {
            toy.hidden_dim = v;
        }
        if let Some(v) = map.parsed("model.embed_dim")? {
            toy.embed_dim = v;
        }
        if let Some(v) = map.parsed("model.init_logit_scale")? {
            toy.init_logit_scale = v;
        }
        if let Some(v) = map.parsed("model.text_init_norm")? {
            toy.text_init_norm = v;
        }

        let mut pretrain = PretrainConfig {
            seed,
            ..PretrainConfig::default()
        };
        if let Some(v) = map.parsed("pretrain.epochs")? {
            pretrain.epochs = v;
        }
        if let Some(v) = map.parsed("pretrain.batch_size")? {
            pretrain.batch_size = v;
        }
        if let Some(v) = map.parsed("pretrain.lr")? {
            pretrain.learning_rate = v;
        }
        if let Some(v) = map.parsed("pretrain.coarse_weight")? {
            pretrain.coarse_weight = v;
        }
        if let Some(v) = map.parsed("pretrain.general_weight")? {
            pretrain.general_weight = v;
        }

        let mode: Granularity = map.parsed("eval.mode")?.unwrap_or(Granularity::Fine);
        let clip_scaled = match map.get("eval.clip_scaled") {
            Some(v) => on_off("eval.clip_scaled", v)?,
            None => None,
        }
        .unwrap_or_else(|| default_clip(mode));
        let eval = EvalSettings {
            mode,
            clip_scaled,
            zero_shot: map.paths("eval.zero_shot"),
            ood: map.path("eval.ood"),
            ood_map: map.path("eval.ood_map"),
            inject_raw: map.path("eval.inject_raw"),
        };
        if eval.ood.is_some() != eval.ood_map.is_some() {
            return Err(Error::Config(
                "eval.ood and eval.ood_map must be given together".into(),
            ));
        }

        Ok(RunConfig {
            data,
            prompts: map.get("data.prompts").unwrap_or("compcars").to_string(),
            request,
            checkpoint: map.path("model.checkpoint"),
            checkpoint_format: map.get("model.format").unwrap_or("toy-v1").to_string(),
            toy,
            pretrain,
            pretrain_general: map.paths("pretrain.general"),
            train_preset,
            train,
            budget,
            eval,
            out: map.path("out"),
        })
    }

    /// Resolves using the process environment for the seed fallback.
    pub fn resolve(map: &ConfigMap) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve_with(map, env.as_deref())
    }

    /// Every setting as explicit keys; loading the result resolves to an
    /// equal config regardless of the environment.
    pub fn to_map(&self) -> ConfigMap {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let path = |p: &Path| p.display().to_string();
        let paths = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        match &self.data {
            Some(DataSource::Files { manifest, taxonomy }) => {
                put("data.manifest", path(manifest));
                put("data.taxonomy", path(taxonomy));
            }
            Some(DataSource::Synth(s)) => {
                put("synth.n_coarse", s.n_coarse.to_string());
                put("synth.fine_per_coarse", s.fine_per_coarse.to_string());
                put("synth.dim", s.dim.to_string());
                put("synth.train_per_fine", s.train_per_fine.to_string());
                put("synth.test_per_fine", s.test_per_fine.to_string());
                put(
                    "synth.coarse_separation",
                    format!("{:?}", s.coarse_separation),
                );
                put("synth.fine_separation", format!("{:?}", s.fine_separation));
                put(
                    "synth.noise",
                    s.per_class_noise
                        .iter()
                        .map(|n| format!("{n:?}"))
                        .collect::<Vec<_>>()
                        .join(", "),
                );
                put("synth.seed", s.seed.to_string());
            }
            None => {}
        }
        put("data.prompts", self.prompts.clone());
        match &self.request {
            Some(RequestSpec::Preset(p)) => put("request.preset", p.clone()),
            Some(RequestSpec::Targets {
                targets,
                granularity,
            }) => {
                put("request.targets", targets.join(", "));
                put("request.granularity", granularity.to_string());
            }
            None => {}
        }
        if let Some(c) = &self.checkpoint {
            put("model.checkpoint", path(c));
        }
        put("model.format", self.checkpoint_format.clone());
        put("model.hidden_dim", self.toy.hidden_dim.to_string());
        put("model.embed_dim", self.toy.embed_dim.to_string());
        put(
            "model.init_logit_scale",
            format!("{:?}", self.toy.init_logit_scale),
        );
        put(
            "model.text_init_norm",
            format!("{:?}", self.toy.text_init_norm),
        );
        put("pretrain.epochs", self.pretrain.epochs.to_string());
        put("pretrain.batch_size", self.pretrain.batch_size.to_string());
        put("pretrain.lr", format!("{:?}", self.pretrain.learning_rate));
        put(
            "pretrain.coarse_weight",
            format!("{:?}", self.pretrain.coarse_weight),
        );
        put(
            "pretrain.general_weight",
            format!("{:?}", self.pretrain.general_weight),
        );
        if !self.pretrain_general.is_empty() {
            put("pretrain.general", paths(&self.pretrain_general));
        }
        let l = &self.train.loss;
        put("method.name", l.method.as_str().to_string());
        put("method.margin", format!("{:?}", l.margin));
        put("method.beta", format!("{:?}", l.beta));
        put("method.alpha_c", format!("{:?}", l.alpha_c));
        put("method.alpha_f", format!("{:?}", l.alpha_f));
        put("method.relabel_seed", l.relabel_seed.to_string());
        put("method.tv_scale", format!("{:?}", l.tv_scale));
        put("method.salun_fraction", format!("{:?}", l.salun_fraction));
        put("method.temperature", l.temperature.to_string());
        put("method.kl_fine_support", l.kl_fine_support.to_string());
        let t = &self.train;
        put("train.preset", self.train_preset.as_str().to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", format!("{:?}", t.learning_rate));
        put("train.seed", t.seed.to_string());
        put(
            "train.patience",
            t.early_stop_patience
                .map_or("none".to_string(), |p| p.to_string()),
        );
        put("train.eval_every", t.eval_every.to_string());
        put("train.stop_level", t.stop_level.to_string());
        put(
            "train.budget",
            self.budget.map_or("all".to_string(), |b| b.to_string()),
        );
        put("eval.mode", self.eval.mode.to_string());
        put(
            "eval.clip_scaled",
            if self.eval.clip_scaled { "on" } else { "off" }.to_string(),
        );
        if !self.eval.zero_shot.is_empty() {
            put("eval.zero_shot", paths(&self.eval.zero_shot));
        }
        if let Some(p) = &self.eval.ood {
            put("eval.ood", path(p));
        }
        if let Some(p) = &self.eval.ood_map {
            put("eval.ood_map", path(p));
        }
        if let Some(p) = &self.eval.inject_raw {
            put("eval.inject_raw", path(p));
        }
        if let Some(p) = &self.out {
            put("out", path(p));
        }
        ConfigMap { entries: m }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration; every default materialized\n");
        out.push_str(&self.to_map().to_text());
        out
    }
}

fn resolve_data(map: &ConfigMap) -> Result<Option<DataSource>> {
    let synth_keys: Vec<&str> = KNOWN_KEYS
        .iter()
        .copied()
        .filter(|k| k.starts_with("synth.") && map.contains(k))
        .collect();
    match (map.path("data.manifest"), synth_keys.is_empty()) {
        (Some(_), false) => Err(Error::Config(
            "exactly one of data.manifest or synth.* may be given".into(),
        )),
        (Some(manifest), true) => {
            let taxonomy = map
                .path("data.taxonomy")
                .ok_or_else(|| Error::Config("data.manifest needs data.taxonomy".into()))?;
            Ok(Some(DataSource::Files { manifest, taxonomy }))
        }
        (None, false) => {
            let mut s = SynthSpec::default();
            if let Some(v) = map.parsed("synth.n_coarse")? {
                s.n_coarse = v;
            }
            if let Some(v) = map.parsed("synth.fine_per_coarse")? {
                s.fine_per_coarse = v;
            }
            if let Some(v) = map.parsed("synth.dim")? {
                s.dim = v;
            }
            if let Some(v) = map.parsed("synth.train_per_fine")? {
                s.train_per_fine = v;
            }
            if let Some(v) = map.parsed("synth.test_per_fine")? {
                s.test_per_fine = v;
            }
            if let Some(v) = map.parsed("synth.coarse_separation")? {
                s.coarse_separation = v;
            }
            if let Some(v) = map.parsed("synth.fine_separation")? {
                s.fine_separation = v;
            }
            if map.contains("synth.noise") {
                s.per_class_noise = list(map.get("synth.noise"))
                    .iter()
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| {
                            Error::Config(format!("`synth.noise`: cannot parse `{v}`"))
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            if let Some(v) = map.parsed("synth.seed")? {
                s.seed = v;
            }
            s.validate()?;
            Ok(Some(DataSource::Synth(s)))
        }
        (None, true) => {
            if map.contains("data.taxonomy") {
                return Err(Error::Config("data.taxonomy needs data.manifest".into()));
            }
            Ok(None)
        }
    }
}
