//! The standard desk-scale setup: a synthetic hierarchical dataset, a flat
//! general suite and a toy model pretrained on both.

use serde::{Deserialize, Serialize};

use crate::datasets::{
    assemble_forget_dataset, generate_general_suite, generate_synthetic, load_prompts,
    DatasetManifest, ForgetSet, LabeledSet, Split, SynthSpec,
};
use crate::error::Result;
use crate::eval::{evaluate, zero_shot_suite, MetricReport, Origin};
use crate::model::{accuracy, PromptSet, ToyConfig, ToyModel};
use crate::taxonomy::{
    resolve_request, ClassId, ClassPartition, Granularity, Taxonomy, UnlearnRequest,
};
use crate::trainer::{pretrain_toy, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub spec: SynthSpec,
    pub toy: ToyConfig,
    pub pretrain: PretrainConfig,
    pub general_classes: usize,
    pub general_train_per_class: usize,
    pub general_test_per_class: usize,
    pub general_separation: f64,
    pub general_noise: f64,
    pub model_seed: u64,
    /// Built-in prompt list name or template file.
    pub prompts: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            spec: SynthSpec::default(),
            toy: ToyConfig::default(),
            pretrain: PretrainConfig::default(),
            general_classes: 6,
            general_train_per_class: 40,
            general_test_per_class: 20,
            general_separation: 4.0,
            general_noise: 0.25,
            model_seed: 0,
            prompts: "compcars".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyScenario {
    pub config: ScenarioConfig,
    pub manifest: DatasetManifest,
    pub taxonomy: Taxonomy,
    pub general_train: LabeledSet,
    pub general_test: LabeledSet,
    pub prompts: PromptSet,
    /// The pretrained model, before any unlearning.
    pub model: ToyModel,
}

impl ToyScenario {
    /// Generates the data and an untrained model knowing every class.
    pub fn untrained(config: ScenarioConfig) -> Result<Self> {
        let (manifest, taxonomy) = generate_synthetic(&config.spec)?;
        let (general_train, general_test) = generate_general_suite(
            config.spec.dim,
            config.general_classes,
            config.general_train_per_class,
            config.general_test_per_class,
            config.general_separation,
            config.general_noise,
            config.spec.seed,
        )?;
        let prompts = load_prompts(&config.prompts)?;
        let mut classes: Vec<ClassId> = taxonomy.fine_classes().to_vec();
        classes.extend(taxonomy.coarse_classes().iter().cloned());
        classes.extend(general_train.classes.iter().cloned());
        let model = ToyModel::new(config.toy, &classes, prompts.templates(), config.model_seed)?;
        Ok(ToyScenario {
            config,
            manifest,
            taxonomy,
            general_train,
            general_test,
            prompts,
            model,
        })
    }

    /// Generates the data and pretrains the model.
    pub fn build(config: ScenarioConfig) -> Result<Self> {
        let mut s = ToyScenario::untrained(config)?;
        let general = (s.config.general_classes > 0).then_some(&s.general_train);
        pretrain_toy(
            &mut s.model,
            &s.manifest,
            &s.taxonomy,
            general,
            &s.prompts,
            &s.config.pretrain,
        )?;
        Ok(s)
    }

    pub fn partition(&self, request: &UnlearnRequest) -> Result<ClassPartition> {
        resolve_request(&self.taxonomy, request)
    }

    pub fn forget_set(
        &self,
        partition: &ClassPartition,
        per_class_budget: Option<usize>,
    ) -> Result<ForgetSet> {
        assemble_forget_dataset(&self.manifest, &self.taxonomy, partition, per_class_budget)
    }

    /// Fine accuracy of `model` over every fine class on one split.
    pub fn fine_accuracy(&self, model: &ToyModel, split: Split) -> Result<f64> {
        accuracy(
            model,
            self.manifest.split(split),
            Granularity::Fine,
            self.taxonomy.fine_classes(),
            &self.prompts,
        )
    }

    /// Test-split report of `unlearned` against the pretrained model, with
    /// the general suite as zero-shot section.
    pub fn evaluate(
        &self,
        unlearned: &ToyModel,
        partition: &ClassPartition,
        mode: Granularity,
        clip: bool,
    ) -> Result<MetricReport> {
        let mut report = evaluate(
            unlearned,
            Origin::Model(&self.model),
            &self.manifest,
            &self.taxonomy,
            partition,
            mode,
            clip,
            &self.prompts,
        )?;
        if self.config.general_classes > 0 {
            report.zero_shot = Some(zero_shot_suite(
                unlearned,
                &self.model,
                std::slice::from_ref(&self.general_test),
                &self.prompts,
            )?);
        }
        Ok(report)
    }
}
