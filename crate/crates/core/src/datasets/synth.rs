//! Synthetic hierarchical data for desk-scale runs.
//!
//! Coarse cluster centres sit on a sphere of radius `coarse_separation`; each
//! fine centre is its parent centre plus a random offset of norm
//! `fine_separation`; records are the fine centre plus isotropic Gaussian
//! noise. Every class draws from its own ChaCha stream so output does not
//! depend on generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Input, LabeledSet, Record, Split};
use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, Taxonomy, TaxonomyEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_coarse: usize,
    pub fine_per_coarse: usize,
    pub dim: usize,
    pub train_per_fine: usize,
    pub test_per_fine: usize,
    pub coarse_separation: f64,
    pub fine_separation: f64,
    /// Per-fine-class noise standard deviation. A single entry applies to all
    /// classes; otherwise one entry per fine class in taxonomy order.
    pub per_class_noise: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_coarse: 4,
            fine_per_coarse: 3,
            dim: 64,
            train_per_fine: 100,
            test_per_fine: 30,
            coarse_separation: 4.0,
            fine_separation: 2.0,
            per_class_noise: vec![0.25],
            seed: 0,
        }
    }
}

// stream ids: 0 for centres, 1.. for per-class record streams
const CENTRE_STREAM: u64 = 0;
const SHIFTED_STREAM_BASE: u64 = 1 << 32;
const GENERAL_STREAM_BASE: u64 = 1 << 40;

impl SynthSpec {
    pub fn n_fine(&self) -> usize {
        self.n_coarse * self.fine_per_coarse
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("synthetic spec: {m}")));
        if self.n_coarse < 1 || self.fine_per_coarse < 1 || self.dim < 1 {
            return fail("class counts and dimension must be positive");
        }
        if !(self.coarse_separation > 0.0 && self.fine_separation > 0.0) {
            return fail("separations must be positive");
        }
        if self.fine_separation >= self.coarse_separation {
            return fail("fine_separation must be smaller than coarse_separation");
        }
        if self.per_class_noise.len() != 1 && self.per_class_noise.len() != self.n_fine() {
            return fail("per_class_noise needs 1 entry or one per fine class");
        }
        if self.per_class_noise.iter().any(|n| !(*n >= 0.0)) {
            return fail("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn noise_for(&self, fine_index: usize) -> f64 {
        if self.per_class_noise.len() == 1 {
            self.per_class_noise[0]
        } else {
            self.per_class_noise[fine_index]
        }
    }

    pub fn fine_id(coarse: usize, fine: usize) -> ClassId {
        ClassId::new(format!("f_{coarse}_{fine}"))
    }

    pub fn coarse_id(coarse: usize) -> ClassId {
        ClassId::new(format!("c_{coarse}"))
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let mut entries = Vec::new();
        for c in 0..self.n_coarse {
            for f in 0..self.fine_per_coarse {
                entries.push(TaxonomyEntry {
                    fine: SynthSpec::fine_id(c, f),
                    coarse: SynthSpec::coarse_id(c),
                    fine_display: format!("fine class {c}.{f}"),
                    coarse_display: format!("coarse class {c}"),
                });
            }
        }
        Taxonomy::from_entries(entries)
    }

    /// Fine-class centres in taxonomy order.
    pub fn fine_centres(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, CENTRE_STREAM);
        let mut centres = Vec::with_capacity(self.n_fine());
        for _ in 0..self.n_coarse {
            let parent = scaled(random_unit(&mut rng, self.dim), self.coarse_separation);
            for _ in 0..self.fine_per_coarse {
                let offset = scaled(random_unit(&mut rng, self.dim), self.fine_separation);
                centres.push(parent.iter().zip(&offset).map(|(a, b)| a + b).collect());
            }
        }
        centres
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

fn sample_around(rng: &mut ChaCha8Rng, centre: &[f64], noise: f64) -> Vec<f64> {
    centre
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + noise * z
        })
        .collect()
}

/// Generates a manifest and its taxonomy from a spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(DatasetManifest, Taxonomy)> {
    spec.validate()?;
    let taxonomy = spec.taxonomy()?;
    let centres = spec.fine_centres();
    let mut records =
        Vec::with_capacity(spec.n_fine() * (spec.train_per_fine + spec.test_per_fine));
    for (idx, fine) in taxonomy.fine_classes().iter().enumerate() {
        let coarse = taxonomy.parent_of(fine.as_str())?.clone();
        let noise = spec.noise_for(idx);
        let mut rng = stream(spec.seed, idx as u64 + 1);
        for (split, count) in [
            (Split::Train, spec.train_per_fine),
            (Split::Test, spec.test_per_fine),
        ] {
            for i in 0..count {
                records.push(Record {
                    id: format!("{fine}/{split}/{i}"),
                    input: Input::Vector(sample_around(&mut rng, &centres[idx], noise)),
                    fine: fine.clone(),
                    coarse: coarse.clone(),
                    split,
                });
            }
        }
    }
    Ok((DatasetManifest::new(records), taxonomy))
}

/// Test records drawn from the same centres with noise multiplied by
/// `noise_factor`; a distribution-shifted evaluation split.
pub fn generate_shifted_split(
    spec: &SynthSpec,
    noise_factor: f64,
    per_fine: usize,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if !(noise_factor >= 0.0) {
        return Err(Error::Validation(
            "noise factor must be non-negative".into(),
        ));
    }
    let taxonomy = spec.taxonomy()?;
    let centres = spec.fine_centres();
    let mut records = Vec::new();
    for (idx, fine) in taxonomy.fine_classes().iter().enumerate() {
        let coarse = taxonomy.parent_of(fine.as_str())?.clone();
        let mut rng = stream(spec.seed, SHIFTED_STREAM_BASE + idx as u64);
        for i in 0..per_fine {
            records.push(Record {
                id: format!("{fine}/shifted/{i}"),
                input: Input::Vector(sample_around(
                    &mut rng,
                    &centres[idx],
                    spec.noise_for(idx) * noise_factor,
                )),
                fine: fine.clone(),
                coarse: coarse.clone(),
                split: Split::Test,
            });
        }
    }
    Ok(DatasetManifest::new(records))
}

/// Flat classes `g_0 .. g_{n-1}` unrelated to the taxonomy, returned as
/// (train, test) sets.
pub fn generate_general_suite(
    dim: usize,
    n_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<(LabeledSet, LabeledSet)> {
    if n_classes < 2 || dim == 0 || !(separation > 0.0) || !(noise >= 0.0) {
        return Err(Error::Validation(
            "general suite needs >= 2 classes and positive scales".into(),
        ));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..n_classes {
        let class = ClassId::new(format!("g_{k}"));
        let mut rng = stream(seed, GENERAL_STREAM_BASE + k as u64);
        let centre = scaled(random_unit(&mut rng, dim), separation);
        for _ in 0..train_per_class {
            train.push((sample_around(&mut rng, &centre, noise), class.clone()));
        }
        for _ in 0..test_per_class {
            test.push((sample_around(&mut rng, &centre, noise), class.clone()));
        }
    }
    Ok((
        LabeledSet::new("general", train),
        LabeledSet::new("general", test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_spec() {
        let spec = SynthSpec::default();
        let (m, tax) = generate_synthetic(&spec).unwrap();
        assert_eq!(tax.fine_classes().len(), 12);
        assert_eq!(tax.coarse_classes().len(), 4);
        assert_eq!(m.split(Split::Train).count(), 1200);
        assert_eq!(m.split(Split::Test).count(), 360);
        m.validate(&tax).unwrap();
        assert_eq!(tax.parent_of("f_2_1").unwrap().as_str(), "c_2");
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = SynthSpec {
            train_per_fine: 3,
            test_per_fine: 1,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap().0;
        let b = generate_synthetic(&spec).unwrap().0;
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthSpec { seed: 1, ..spec })
            .unwrap()
            .0;
        assert_ne!(a, c);
    }

    #[test]
    fn centre_geometry() {
        let spec = SynthSpec::default();
        let centres = spec.fine_centres();
        let mut rng = stream(spec.seed, CENTRE_STREAM);
        let parent = scaled(random_unit(&mut rng, spec.dim), spec.coarse_separation);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&parent) - 4.0).abs() < 1e-12);
        let off: Vec<f64> = centres[0].iter().zip(&parent).map(|(a, b)| a - b).collect();
        assert!((norm(&off) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_records_sit_on_centres() {
        let spec = SynthSpec {
            per_class_noise: vec![0.0],
            train_per_fine: 2,
            test_per_fine: 0,
            ..SynthSpec::default()
        };
        let (m, _) = generate_synthetic(&spec).unwrap();
        let centres = spec.fine_centres();
        assert_eq!(m.records[0].vector().unwrap(), centres[0].as_slice());
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SynthSpec {
                fine_separation: 5.0,
                ..SynthSpec::default()
            },
            SynthSpec {
                coarse_separation: 0.0,
                ..SynthSpec::default()
            },
            SynthSpec {
                per_class_noise: vec![0.1, 0.2],
                ..SynthSpec::default()
            },
        ] {
            assert!(generate_synthetic(&bad).is_err());
        }
    }

    #[test]
    fn general_suite_is_disjoint_from_taxonomy() {
        let (train, test) = generate_general_suite(64, 5, 4, 2, 4.0, 0.2, 9).unwrap();
        assert_eq!(train.classes.len(), 5);
        assert_eq!(test.examples.len(), 10);
        assert!(train.classes.iter().all(|c| c.as_str().starts_with("g_")));
    }
}
