//! Property tests over metrics, taxonomy resolution, configuration records
//! and the loss functions on randomly drawn toy problems.

use hier_unlearn::config::{ConfigMap, RunConfig};
use hier_unlearn::datasets::SynthSpec;
use hier_unlearn::eval::{compose_report, qu_score, round_half_up, scaled_accuracy, RawAccuracies};
use hier_unlearn::losses::{
    loss_hga, loss_kl_coarse, loss_kl_fine, loss_npo, ForgetBatch, KlFineSupport, Temperature,
};
use hier_unlearn::model::{ToyModel, Trainable};
use hier_unlearn::scenario::{ScenarioConfig, ToyScenario};
use hier_unlearn::taxonomy::{resolve_request, Granularity, UnlearnRequest};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn accuracies() -> impl Strategy<Value = RawAccuracies> {
    (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b, c, d)| {
        RawAccuracies {
            forget_fine: a,
            forget_coarse: b,
            retain_fine: c,
            retain_coarse: d,
        }
    })
}

fn positive_accuracies() -> impl Strategy<Value = RawAccuracies> {
    (0.01f64..=1.0, 0.01f64..=1.0, 0.01f64..=1.0, 0.01f64..=1.0).prop_map(|(a, b, c, d)| {
        RawAccuracies {
            forget_fine: a,
            forget_coarse: b,
            retain_fine: c,
            retain_coarse: d,
        }
    })
}

fn mode() -> impl Strategy<Value = Granularity> {
    prop_oneof![Just(Granularity::Fine), Just(Granularity::Coarse)]
}

proptest! {
    #[test]
    fn clipped_scores_stay_in_the_unit_interval(
        raw in accuracies(),
        origin in positive_accuracies(),
        mode in mode(),
    ) {
        let r = compose_report(raw, origin, mode, true).unwrap();
        for v in [r.quality, r.utility, r.qu] {
            prop_assert!((0.0..=1.0).contains(&v), "{v} outside [0, 1]");
        }
        prop_assert!(r.qu <= r.quality.max(r.utility) + 1e-12);
        prop_assert!(r.qu <= 2.0 * r.quality.min(r.utility) + 1e-12);
        if mode == Granularity::Fine {
            prop_assert_eq!(r.quality + r.scaled.forget_fine, 1.0);
        }
        prop_assert!(r.qu >= r.quality.min(r.utility) - 1e-12);
    }

    #[test]
    fn unclipped_scaling_is_the_plain_ratio(u in 0.0f64..=1.0, o in 0.01f64..=1.0) {
        prop_assert_eq!(scaled_accuracy(u, o, false).unwrap(), u / o);
        prop_assert_eq!(scaled_accuracy(u, o, true).unwrap(), (u / o).min(1.0));
    }

    #[test]
    fn an_unchanged_model_scores_zero_quality_full_utility(origin in positive_accuracies(), mode in mode()) {
        for clip in [true, false] {
            let r = compose_report(origin, origin, mode, clip).unwrap();
            prop_assert_eq!(r.quality, 0.0);
            prop_assert_eq!(r.utility, 1.0);
            prop_assert_eq!(r.qu, 0.0);
        }
    }

    #[test]
    fn harmonic_mean_is_symmetric(q in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        prop_assert!((qu_score(q, u) - qu_score(u, q)).abs() <= 1e-15);
        prop_assert!((qu_score(q, q) - q).abs() <= 1e-15);
    }

    #[test]
    fn half_up_rounding_is_idempotent(x in -1000.0f64..1000.0, d in 0i32..4) {
        let once = round_half_up(x, d);
        prop_assert_eq!(round_half_up(once, d), once);
        prop_assert!((once - x).abs() <= 0.5 * 10f64.powi(-d) + 1e-9);
    }

    #[test]
    fn partitions_split_the_fine_classes(
        n_coarse in 2usize..6,
        per in 1usize..5,
        pick in proptest::collection::vec(any::<bool>(), 30),
        coarse in any::<bool>(),
    ) {
        let spec = SynthSpec { n_coarse, fine_per_coarse: per, ..SynthSpec::default() };
        let taxonomy = spec.taxonomy().unwrap();
        let level = if coarse { Granularity::Coarse } else { Granularity::Fine };
        let pool = taxonomy.classes(level);
        let targets: Vec<&str> = pool.iter().zip(&pick).filter(|(_, p)| **p).map(|(c, _)| c.as_str()).collect();
        let request = UnlearnRequest::new(targets.iter().copied(), level);
        let Ok(partition) = resolve_request(&taxonomy, &request) else {
            // empty or whole-level requests are rejected
            prop_assert!(targets.is_empty() || targets.len() == pool.len());
            return Ok(());
        };
        prop_assert_eq!(partition.forget_fine.len() + partition.retain_fine.len(), taxonomy.fine_classes().len());
        for f in taxonomy.fine_classes() {
            prop_assert!(partition.is_forget(f.as_str()) != partition.is_retain(f.as_str()));
            let parent = taxonomy.parent_of(f.as_str()).unwrap().as_str();
            let targeted = match level {
                Granularity::Fine => targets.contains(&f.as_str()),
                Granularity::Coarse => targets.contains(&parent),
            };
            prop_assert_eq!(partition.is_forget(f.as_str()), targeted);
        }
    }

    #[test]
    fn resolved_records_replay_to_the_same_config(
        lr in 1e-6f64..1.0,
        margin in 0.0f64..5.0,
        epochs in 1usize..20,
        seed in any::<u32>(),
        method in prop_oneof![Just("hga_kl"), Just("ga"), Just("npo_kl"), Just("salun"), Just("task_vector")],
    ) {
        let mut map = ConfigMap::new();
        map.set("method.name", method).unwrap();
        map.set("train.lr", format!("{lr:?}")).unwrap();
        map.set("method.margin", format!("{margin:?}")).unwrap();
        map.set("train.epochs", epochs.to_string()).unwrap();
        map.set("train.seed", seed.to_string()).unwrap();
        let first = RunConfig::resolve_with(&map, None).unwrap();
        let text = first.to_text();
        let replay = RunConfig::resolve_with(&ConfigMap::parse(&text, std::path::Path::new("r")).unwrap(), Some("7")).unwrap();
        prop_assert_eq!(replay.to_text(), text);
        prop_assert_eq!(replay.train.learning_rate, lr);
        prop_assert_eq!(replay.train.loss.margin, margin);
    }
}

fn small_problem(seed: u64) -> (ToyScenario, ToyModel, Vec<usize>) {
    let config = ScenarioConfig {
        spec: SynthSpec {
            train_per_fine: 3,
            test_per_fine: 1,
            seed,
            ..SynthSpec::default()
        },
        model_seed: seed,
        ..ScenarioConfig::default()
    };
    let s = ToyScenario::untrained(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = s.model.clone();
    for p in model.parameters_mut() {
        *p += 0.3 * (rng.random::<f64>() - 0.5);
    }
    let picks = (0..3).map(|_| rng.random_range(0..6)).collect();
    (s, model, picks)
}

fn nudged(model: &ToyModel, seed: u64) -> ToyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut m = model.clone();
    for p in m.parameters_mut() {
        *p += 0.05 * (rng.random::<f64>() - 0.5);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_keep_their_fixed_points(seed in 0u64..10_000, margin in 0.0f64..4.0, beta in 0.1f64..4.0) {
        let (s, model, picks) = small_problem(seed);
        let partition = s.partition(&UnlearnRequest::fine(["f_0_0", "f_1_2"])).unwrap();
        let forget = s.forget_set(&partition, None).unwrap();
        let batch = ForgetBatch::from_set(&forget, &picks, &s.prompts);
        let hinge = loss_hga(&model, &batch, margin).unwrap().value;
        prop_assert!(hinge >= 0.0);
        prop_assert!(loss_hga(&model, &batch, margin + 0.5).unwrap().value >= hinge);
        let moved = nudged(&model, seed);
        for t in [Temperature::LogitScale, Temperature::Raw] {
            prop_assert_eq!(loss_kl_coarse(&model, &model, &batch, t).unwrap().value, 0.0);
            prop_assert!(loss_kl_coarse(&moved, &model, &batch, t).unwrap().value > 0.0);
            for support in [KlFineSupport::ExcludeOwnLabel, KlFineSupport::ExcludeAllForget] {
                prop_assert_eq!(loss_kl_fine(&model, &model, &batch, t, support).unwrap().value, 0.0);
                prop_assert!(loss_kl_fine(&moved, &model, &batch, t, support).unwrap().value > 0.0);
            }
            let npo = loss_npo(&model, &model, &batch, beta, t).unwrap();
            prop_assert!((npo.value - 2.0 / beta * std::f64::consts::LN_2).abs() <= 1e-9);
        }
    }
}
