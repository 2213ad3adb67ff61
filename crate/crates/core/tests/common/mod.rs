//! Fixtures shared by the integration test targets.

#![allow(dead_code)]

use hier_unlearn::datasets::{ForgetSet, SynthSpec};
use hier_unlearn::losses::{
    loss_cross_entropy, loss_ga, loss_gd, loss_hga, loss_kl_coarse, loss_kl_fine, loss_me,
    loss_npo, loss_relabel, ForgetBatch, KlFineSupport, LossOutput, Temperature,
};
use hier_unlearn::model::{ToyModel, Trainable};
use hier_unlearn::scenario::{ScenarioConfig, ToyScenario};
use hier_unlearn::taxonomy::{Granularity, UnlearnRequest};
use hier_unlearn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Forget classes of the pinned toy run: one fine class from each of two
/// coarse groups.
pub const PINNED_FORGET: [&str; 2] = ["f_0_0", "f_1_1"];

/// The pinned toy scenario: default synthetic spec and pretraining, seed 0.
pub fn pinned_scenario() -> ToyScenario {
    ToyScenario::build(ScenarioConfig::default()).expect("pinned scenario builds")
}

pub const FD_STEP: f64 = 1e-6;

/// A small untrained scenario whose unlearning model sits a little away from
/// the reference, so every KL term has a live gradient.
pub struct GradFixture {
    pub model: ToyModel,
    pub reference: ToyModel,
    pub batch: ForgetBatch,
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let config = ScenarioConfig {
        spec: SynthSpec {
            train_per_fine: 6,
            test_per_fine: 2,
            seed,
            ..SynthSpec::default()
        },
        model_seed: seed,
        ..ScenarioConfig::default()
    };
    let s = ToyScenario::untrained(config).unwrap();
    let partition = s
        .partition(&UnlearnRequest::fine(["f_0_0", "f_2_1"]))
        .unwrap();
    let forget: ForgetSet = s.forget_set(&partition, None).unwrap();
    let batch = ForgetBatch::whole(&forget, &s.prompts);
    let reference = s.model.clone();
    let mut model = s.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.parameters_mut() {
        *p += 0.05 * (rng.random::<f64>() - 0.5);
    }
    GradFixture {
        model,
        reference,
        batch,
    }
}

/// A fixed sample of coordinates from every block, plus the text table,
/// the template offsets and the logit scale at the tail of the layout.
pub fn probe_coordinates(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = (0..120).map(|_| rng.random_range(0..n)).collect();
    coords.extend((n.saturating_sub(400)..n).step_by(7));
    coords.push(n - 1);
    coords.sort_unstable();
    coords.dedup();
    coords
}

/// Relative error ||g_fd - g|| / ||g_fd|| of the analytic gradient against
/// central differences over the probe coordinates.
pub fn gradient_error<F>(fx: &mut GradFixture, loss: F) -> f64
where
    F: Fn(&ToyModel, &GradFixture) -> Result<LossOutput>,
{
    let analytic = loss(&fx.model, fx).unwrap();
    let coords = probe_coordinates(fx.model.num_parameters(), 11);
    let mut diff_sq = 0.0;
    let mut norm_sq = 0.0;
    for &i in &coords {
        let orig = fx.model.parameters()[i];
        fx.model.parameters_mut()[i] = orig + FD_STEP;
        let plus = loss(&fx.model, fx).unwrap().value;
        fx.model.parameters_mut()[i] = orig - FD_STEP;
        let minus = loss(&fx.model, fx).unwrap().value;
        fx.model.parameters_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        diff_sq += (numeric - analytic.grad[i]).powi(2);
        norm_sq += numeric.powi(2);
    }
    if norm_sq == 0.0 {
        return f64::INFINITY;
    }
    diff_sq.sqrt() / norm_sq.sqrt()
}

type LossFn = Box<dyn Fn(&ToyModel, &GradFixture) -> Result<LossOutput>>;

/// Every loss under test with a readable name.
pub fn gradient_cases() -> Vec<(String, LossFn)> {
    let mut cases: Vec<(String, LossFn)> = Vec::new();
    for t in [Temperature::LogitScale, Temperature::Raw] {
        for level in [Granularity::Fine, Granularity::Coarse] {
            cases.push((
                format!("ga {level} {t}"),
                Box::new(move |m, f| loss_ga(m, &f.batch, level, t)),
            ));
            cases.push((
                format!("gd {level} {t}"),
                Box::new(move |m, f| loss_gd(m, &f.batch, level, t)),
            ));
        }
        cases.push((
            format!("kl_coarse {t}"),
            Box::new(move |m, f| loss_kl_coarse(m, &f.reference, &f.batch, t)),
        ));
        for support in [
            KlFineSupport::ExcludeOwnLabel,
            KlFineSupport::ExcludeAllForget,
        ] {
            cases.push((
                format!("kl_fine {t} {support}"),
                Box::new(move |m, f| loss_kl_fine(m, &f.reference, &f.batch, t, support)),
            ));
        }
        for beta in [0.5, 2.0] {
            cases.push((
                format!("npo beta={beta} {t}"),
                Box::new(move |m, f| loss_npo(m, &f.reference, &f.batch, beta, t)),
            ));
        }
        cases.push((
            format!("me {t}"),
            Box::new(move |m, f| loss_me(m, &f.batch, t)),
        ));
        cases.push((
            format!("relabel {t}"),
            Box::new(move |m, f| loss_relabel(m, &f.batch, 5, t)),
        ));
    }
    // the rival argmax is unique at a random point, so the hinge is
    // differentiable there; m = 2 keeps every sample active
    for margin in [0.5, 2.0] {
        cases.push((
            format!("hga m={margin}"),
            Box::new(move |m, f| loss_hga(m, &f.batch, margin)),
        ));
    }
    cases.push((
        "cross_entropy".into(),
        Box::new(|m, f| {
            let scope = &f.batch.fine_scope;
            let labels: Vec<usize> = f
                .batch
                .records
                .iter()
                .map(|r| scope.iter().position(|c| *c == r.fine).unwrap())
                .collect();
            let xs: Vec<&[f64]> = f.batch.records.iter().map(|r| r.input.as_slice()).collect();
            loss_cross_entropy(
                m,
                &xs,
                &labels,
                scope,
                &f.batch.prompts,
                Temperature::LogitScale,
            )
        }),
    ));
    cases
}
