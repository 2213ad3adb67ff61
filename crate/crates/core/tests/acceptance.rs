//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use hier_unlearn::cli::cmd_unlearn;
use hier_unlearn::config::{ConfigMap, RunConfig};
use hier_unlearn::datasets::{ForgetSet, Split, SynthSpec};
use hier_unlearn::eval::{compose_report, RawAccuracies};
use hier_unlearn::losses::{
    loss_hga, loss_kl_coarse, loss_kl_fine, loss_me, loss_npo, ForgetBatch, KlFineSupport, Method,
    Temperature,
};
use hier_unlearn::model::{restore, snapshot, ToyModel, Trainable};
use hier_unlearn::scenario::{ScenarioConfig, ToyScenario};
use hier_unlearn::surgery::{
    apply_masked_update, apply_task_vector, compute_task_vector, mask_from_gradient,
};
use hier_unlearn::taxonomy::{Granularity, UnlearnRequest};
use hier_unlearn::trainer::{run_unlearning, sample_budget_sweep, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Raw accuracies in percent: forget coarse, forget fine, retain coarse,
/// retain fine, in table column order.
fn raw(df_coarse: f64, df_fine: f64, dr_coarse: f64, dr_fine: f64) -> RawAccuracies {
    RawAccuracies {
        forget_fine: df_fine / 100.0,
        forget_coarse: df_coarse / 100.0,
        retain_fine: dr_fine / 100.0,
        retain_coarse: dr_coarse / 100.0,
    }
}

const METRIC_TOLERANCE: f64 = 0.02 + 1e-9;

fn within(printed: f64, computed: f64) -> bool {
    (printed - computed * 100.0).abs() <= METRIC_TOLERANCE
}

fn fine_table_oracle() -> Outcome {
    let origin = raw(86.20, 93.40, 50.88, 65.55);
    // (name, raw row, quality, utility, q-u)
    let rows = [
        ("GA", raw(1.00, 0.00, 7.80, 1.57), 100.00, 6.30, 11.85),
        ("GDiff", raw(69.60, 0.00, 40.54, 9.30), 100.00, 58.21, 73.58),
        ("GA+KL", raw(77.40, 3.00, 41.28, 35.96), 96.79, 75.26, 84.68),
        (
            "Relabeling",
            raw(44.80, 43.80, 29.57, 45.64),
            53.10,
            59.91,
            56.30,
        ),
        (
            "SalUn",
            raw(47.80, 34.80, 30.49, 46.52),
            62.74,
            62.12,
            62.43,
        ),
        (
            "Task vector",
            raw(79.60, 36.60, 44.58, 62.38),
            60.81,
            91.71,
            73.13,
        ),
        (
            "NPO+KL",
            raw(88.00, 8.00, 49.33, 53.91),
            91.43,
            93.06,
            92.24,
        ),
        (
            "HGA+KL",
            raw(88.20, 2.00, 48.23, 54.56),
            97.86,
            92.68,
            95.20,
        ),
    ];
    for (name, row, q, u, qu) in rows {
        let r = compose_report(row, origin, Granularity::Fine, true).map_err(fail)?;
        ensure(
            within(q, r.quality) && within(u, r.utility) && within(qu, r.qu),
            || {
                format!(
                    "{name}: got ({:.4}, {:.4}, {:.4}), printed ({q}, {u}, {qu})",
                    r.quality * 100.0,
                    r.utility * 100.0,
                    r.qu * 100.0
                )
            },
        )?;
    }
    Ok(format!("{} rows within 0.02 points", rows.len()))
}

fn coarse_table_oracle() -> Outcome {
    let origin = raw(76.75, 80.25, 53.45, 67.32);
    let rows = [
        ("GA", raw(0.00, 0.00, 10.33, 29.07), 100.00, 31.25),
        ("NPO+KL", raw(8.25, 24.50, 55.03, 63.03), 79.36, 98.29),
        ("Task Vector", raw(8.75, 28.00, 55.45, 63.70), 76.85, 99.18),
        ("HGA+KL", raw(10.50, 8.00, 52.35, 60.09), 88.18, 93.60),
    ];
    for (name, row, q, u) in rows {
        let r = compose_report(row, origin, Granularity::Coarse, false).map_err(fail)?;
        ensure(within(q, r.quality) && within(u, r.utility), || {
            format!(
                "{name}: got ({:.4}, {:.4}), printed ({q}, {u})",
                r.quality * 100.0,
                r.utility * 100.0
            )
        })?;
    }
    Ok(format!("{} rows within 0.02 points", rows.len()))
}

/// Per-record batches of a small random toy problem.
fn invariant_problem(seed: u64) -> (ToyScenario, ForgetSet) {
    let config = ScenarioConfig {
        spec: SynthSpec {
            train_per_fine: 5,
            test_per_fine: 1,
            seed,
            ..SynthSpec::default()
        },
        model_seed: seed,
        ..ScenarioConfig::default()
    };
    let s = ToyScenario::untrained(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = s.taxonomy.fine_classes();
    let a = rng.random_range(0..fine.len());
    let b = (a + 1 + rng.random_range(0..fine.len() - 1)) % fine.len();
    let request = UnlearnRequest::fine([fine[a].as_str(), fine[b].as_str()]);
    let partition = s.partition(&request).unwrap();
    let forget = s.forget_set(&partition, None).unwrap();
    (s, forget)
}

fn perturbed(model: &ToyModel, seed: u64, scale: f64) -> ToyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    for p in m.parameters_mut() {
        *p += scale * (rng.random::<f64>() - 0.5);
    }
    m
}

fn loss_invariants() -> Outcome {
    let mut checks = 0usize;
    for seed in 0..100u64 {
        let (s, forget) = invariant_problem(seed);
        let model = perturbed(&s.model, seed + 1000, 0.2);
        let reference = model.clone();
        let moved = perturbed(&model, seed + 2000, 0.1);
        for i in 0..forget.len() {
            let batch = ForgetBatch::from_set(&forget, &[i], &s.prompts);
            let x = [batch.records[0].input.as_slice()];
            let sims = model
                .score_batch(&x, &batch.fine_scope, &s.prompts)
                .map_err(fail)?
                .sims;
            let own = batch
                .fine_scope
                .iter()
                .position(|c| *c == batch.records[0].fine)
                .unwrap();
            let best_other = sims
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != own)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            for m in [0.0, 0.5, 2.0] {
                let v = loss_hga(&model, &batch, m).map_err(fail)?.value;
                ensure(v >= 0.0, || format!("seed {seed}: hinge {v} < 0 at m={m}"))?;
            }
            if sims[own] < best_other {
                let v = loss_hga(&model, &batch, 0.0).map_err(fail)?.value;
                ensure(v == 0.0, || {
                    format!("seed {seed}: hinge {v} on a misclassified sample at m=0")
                })?;
            }
            for t in [Temperature::LogitScale, Temperature::Raw] {
                let kc = loss_kl_coarse(&model, &reference, &batch, t)
                    .map_err(fail)?
                    .value;
                ensure(kc == 0.0, || {
                    format!("seed {seed}: KL_c = {kc} at the reference")
                })?;
                for support in [
                    KlFineSupport::ExcludeOwnLabel,
                    KlFineSupport::ExcludeAllForget,
                ] {
                    let kf = loss_kl_fine(&model, &reference, &batch, t, support)
                        .map_err(fail)?
                        .value;
                    ensure(kf == 0.0, || {
                        format!("seed {seed}: KL_f = {kf} at the reference")
                    })?;
                }
            }
            for beta in [0.5, 1.0, 2.0] {
                let at_ref = loss_npo(&model, &reference, &batch, beta, Temperature::LogitScale)
                    .map_err(fail)?
                    .value;
                let expected = 2.0 / beta * std::f64::consts::LN_2;
                ensure((at_ref - expected).abs() <= 1e-9, || {
                    format!("seed {seed}: NPO {at_ref} at the reference, expected {expected}")
                })?;
                let away = loss_npo(&moved, &reference, &batch, beta, Temperature::LogitScale)
                    .map_err(fail)?
                    .value;
                ensure(away > 0.0, || {
                    format!("seed {seed}: NPO {away} not positive")
                })?;
            }
            checks += 1;
        }
        // identical class rows make every class embedding equal, so the
        // predicted distribution is exactly uniform
        let mut uniform = model.clone();
        let cfg = *uniform.config();
        let (d, h, e) = (cfg.input_dim, cfg.hidden_dim, cfg.embed_dim);
        let table = d * h + h + h * e + e;
        let classes = uniform.classes().len();
        let row: Vec<f64> = uniform.parameters()[table..table + e].to_vec();
        for c in 1..classes {
            uniform.parameters_mut()[table + c * e..table + (c + 1) * e].copy_from_slice(&row);
        }
        let me = loss_me(
            &uniform,
            &ForgetBatch::whole(&forget, &s.prompts),
            Temperature::LogitScale,
        )
        .map_err(fail)?
        .value;
        ensure(me.abs() <= 1e-12, || {
            format!("seed {seed}: ME = {me} at a uniform prediction")
        })?;
    }
    Ok(format!("100 seeds, {checks} per-sample batches"))
}

fn gradient_checks() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in [1, 2] {
        let mut fx = common::grad_fixture(seed);
        for (name, loss) in common::gradient_cases() {
            let rel = common::gradient_error(&mut fx, loss);
            ensure(rel < 1e-4, || {
                format!("seed {seed} {name}: relative error {rel:e}")
            })?;
            worst = worst.max(rel);
            count += 1;
        }
    }
    Ok(format!(
        "{count} loss/setting pairs, worst relative error {worst:.1e}"
    ))
}

fn surgery_algebra(s: &ToyScenario) -> Outcome {
    let origin = snapshot(&s.model, "origin");
    let n = origin.len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..5 {
        let scale = 10f64.powi(-trial - 1);
        let tuned_values: Vec<f64> = origin
            .values()
            .iter()
            .map(|p| p + scale * (rng.random::<f64>() - 0.5))
            .collect();
        let tuned = hier_unlearn::model::ParameterSnapshot::from_values(tuned_values, "tuned");
        let tv = compute_task_vector(&origin, &tuned).map_err(fail)?;
        let same = apply_task_vector(&origin, &tv, 0.0).map_err(fail)?;
        ensure(bitwise(same.values(), origin.values()), || {
            format!("trial {trial}: alpha=0 is not the identity")
        })?;
        let back = apply_task_vector(&origin, &tv, -1.0).map_err(fail)?;
        ensure(bitwise(back.values(), tuned.values()), || {
            format!("trial {trial}: alpha=-1 does not recover the tuned parameters")
        })?;
    }
    for quantile in [0.0, 0.5, 0.9, 0.99, 0.999, 1.0] {
        let grad: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mask = mask_from_gradient(&grad, quantile).map_err(fail)?;
        let selected = mask.mask.iter().filter(|b| **b).count();
        let wanted = (1.0 - quantile) * n as f64;
        ensure((selected as f64 - wanted).abs() <= 1.0, || {
            format!("quantile {quantile}: {selected} selected, wanted {wanted}")
        })?;
        let mut model = s.model.clone();
        let update: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        apply_masked_update(&mut model, &mask, &update).map_err(fail)?;
        for i in 0..n {
            let before = s.model.parameters()[i];
            let after = model.parameters()[i];
            if !mask.mask[i] {
                ensure(before.to_bits() == after.to_bits(), || {
                    format!("unmasked coordinate {i} changed")
                })?;
            }
        }
    }
    Ok(format!("{n} parameters, 5 task vectors, 6 mask quantiles"))
}

fn bitwise(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

struct ToyRun {
    forget_fine: f64,
    retain_fine_scaled: f64,
    forget_coarse_scaled: f64,
    epoch: usize,
}

fn toy_run(s: &ToyScenario, method: Method) -> Result<ToyRun, String> {
    let partition = s
        .partition(&UnlearnRequest::fine(common::PINNED_FORGET))
        .map_err(fail)?;
    let forget = s.forget_set(&partition, None).map_err(fail)?;
    let result =
        run_unlearning(&s.model, &forget, &s.prompts, &TrainConfig::toy(method)).map_err(fail)?;
    let mut unlearned = s.model.clone();
    restore(&mut unlearned, &result.selected_checkpoint).map_err(fail)?;
    let r = s
        .evaluate(&unlearned, &partition, Granularity::Fine, true)
        .map_err(fail)?;
    Ok(ToyRun {
        forget_fine: r.raw.forget_fine,
        retain_fine_scaled: r.scaled.retain_fine,
        forget_coarse_scaled: r.scaled.forget_coarse,
        epoch: result.selected_epoch,
    })
}

fn toy_end_to_end(s: &ToyScenario) -> Outcome {
    let pretrained = s.fine_accuracy(&s.model, Split::Test).map_err(fail)?;
    ensure(pretrained >= 0.95, || {
        format!("pretrained fine accuracy {pretrained:.4} < 0.95")
    })?;
    let r = toy_run(s, Method::HgaKl)?;
    let detail = format!(
        "pretrained {pretrained:.4}; epoch {}: forget fine {:.4}, retain fine scaled {:.4}, forget coarse scaled {:.4}",
        r.epoch, r.forget_fine, r.retain_fine_scaled, r.forget_coarse_scaled
    );
    ensure(
        r.forget_fine <= 0.10 && r.retain_fine_scaled >= 0.80 && r.forget_coarse_scaled >= 0.80,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn toy_collapse(s: &ToyScenario) -> Outcome {
    let hga = toy_run(s, Method::HgaKl)?;
    let ga = toy_run(s, Method::Ga)?;
    let margin = hga.retain_fine_scaled - ga.retain_fine_scaled;
    let detail = format!(
        "retain fine scaled: HGA_KL {:.4} (epoch {}), GA {:.4} (epoch {}); margin {margin:.4}, need >= 0.2",
        hga.retain_fine_scaled, hga.epoch, ga.retain_fine_scaled, ga.epoch
    );
    ensure(margin >= 0.2, || detail.clone())?;
    Ok(detail)
}

fn budget_monotonicity(s: &ToyScenario) -> Outcome {
    let partition = s
        .partition(&UnlearnRequest::fine(common::PINNED_FORGET))
        .map_err(fail)?;
    let forget = s.forget_set(&partition, None).map_err(fail)?;
    let sweep = sample_budget_sweep(
        &s.model,
        &forget,
        &s.prompts,
        &TrainConfig::toy(Method::HgaKl),
        &[2, 8, 20],
        |m| s.evaluate(m, &partition, Granularity::Fine, true),
    )
    .map_err(fail)?;
    let q: Vec<(usize, f64)> = sweep.iter().map(|(b, r)| (*b, r.quality)).collect();
    let detail = q
        .iter()
        .map(|(b, v)| format!("Q({b}) = {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(q.windows(2).all(|w| w[1].1 >= w[0].1 - 0.05), || {
        detail.clone()
    })?;
    Ok(detail)
}

fn determinism(s: &ToyScenario) -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let root = dir.path();
    s.manifest.save(&root.join("manifest.tsv")).map_err(fail)?;
    s.taxonomy.save(&root.join("taxonomy.tsv")).map_err(fail)?;
    s.model.save(&root.join("base.bin")).map_err(fail)?;
    let mut compared = 0;
    for method in ["hga_kl", "salun", "relabel", "task_vector"] {
        let mut map = ConfigMap::new();
        let path = |name: &str| root.join(name).display().to_string();
        map.set("data.manifest", path("manifest.tsv"))
            .map_err(fail)?;
        map.set("data.taxonomy", path("taxonomy.tsv"))
            .map_err(fail)?;
        map.set("model.checkpoint", path("base.bin"))
            .map_err(fail)?;
        map.set("request.targets", common::PINNED_FORGET.join(","))
            .map_err(fail)?;
        map.set("method.name", method).map_err(fail)?;
        map.set("train.seed", "11").map_err(fail)?;
        map.set("out", path(&format!("{method}-a"))).map_err(fail)?;
        let first = RunConfig::resolve_with(&map, None).map_err(fail)?;
        let a = cmd_unlearn(&first).map_err(fail)?;
        // the second run replays the resolved record written by the first
        let mut replay = ConfigMap::load(&a.resolved).map_err(fail)?;
        replay
            .set("out", path(&format!("{method}-b")))
            .map_err(fail)?;
        let b = cmd_unlearn(&RunConfig::resolve_with(&replay, Some("999")).map_err(fail)?)
            .map_err(fail)?;
        for (x, y) in [
            (&a.checkpoint, &b.checkpoint),
            (&a.final_checkpoint, &b.final_checkpoint),
            (&a.history, &b.history),
        ] {
            ensure(same_bytes(x, y), || {
                format!("{method}: {} differs between runs", x.display())
            })?;
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} artifact pairs byte-identical across 4 methods"
    ))
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn main() {
    let started = Instant::now();
    let scenario = common::pinned_scenario();
    type Check<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Check> = vec![
        (
            "metric oracle, fine table rows",
            Box::new(fine_table_oracle),
        ),
        (
            "metric oracle, coarse table rows",
            Box::new(coarse_table_oracle),
        ),
        ("loss invariants over 100 seeds", Box::new(loss_invariants)),
        ("gradient checks", Box::new(gradient_checks)),
        ("surgery algebra", Box::new(|| surgery_algebra(&scenario))),
        (
            "toy end-to-end unlearning",
            Box::new(|| toy_end_to_end(&scenario)),
        ),
        (
            "toy GA collapse vs HGA_KL",
            Box::new(|| toy_collapse(&scenario)),
        ),
        (
            "sample-budget monotonicity",
            Box::new(|| budget_monotonicity(&scenario)),
        ),
        ("determinism", Box::new(|| determinism(&scenario))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {}: {status} [{name}] {detail} ({:.2}s)",
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        criteria.len() - failures,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
