use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureSplit, LabeledSplit, MultiDomainDataset, SourceDomain, TargetDomain};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One domain of the ring family: `K` class clusters on the unit circle,
/// rotated, translated and blurred with isotropic Gaussian noise.
/// Labels cycle `i mod K` over the samples of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub noise_sigma: f64,
    pub class_count: usize,
    pub samples_train: usize,
    pub samples_test: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("domain {}: {msg}", self.name)));
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if self.class_count < 2 {
            return fail(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.samples_train == 0 || self.samples_test == 0 {
            return fail("train and test splits must be non-empty".into());
        }
        if !self.rotation_deg.is_finite() || !self.translation.iter().all(|t| t.is_finite()) {
            return fail("rotation and translation must be finite".into());
        }
        Ok(())
    }
}

/// Analytic class mean of class `k` in a domain.
pub fn ring_center(k: usize, class_count: usize, rotation_deg: f64, translation: [f64; 2]) -> [f64; 2] {
    let angle = 2.0 * PI * k as f64 / class_count as f64 + rotation_deg.to_radians();
    [angle.cos() + translation[0], angle.sin() + translation[1]]
}

fn sample_split(spec: &DomainSpec, n: usize, rng: &mut ChaCha8Rng) -> LabeledSplit {
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.class_count;
        let [cx, cy] = ring_center(k, spec.class_count, spec.rotation_deg, spec.translation);
        data.push(cx + noise.sample(rng));
        data.push(cy + noise.sample(rng));
        y.push(k);
    }
    LabeledSplit {
        x: Tensor::matrix(n, 2, data).expect("n x 2"),
        y,
    }
}

/// `specs[..N]` become labeled sources, the last spec is the target. Each
/// domain draws from its own seed; the target discards its training labels.
pub fn generate_ring_domains(specs: &[DomainSpec]) -> Result<MultiDomainDataset> {
    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least one source and one target domain, got {} specs",
            specs.len()
        )));
    }
    for s in specs {
        s.validate()?;
    }
    let k = specs[0].class_count;
    if let Some(bad) = specs.iter().find(|s| s.class_count != k) {
        return Err(Error::Config(format!(
            "domain {} has {} classes, expected {k}",
            bad.name, bad.class_count
        )));
    }
    let (target_spec, source_specs) = specs.split_last().expect("len >= 2");
    let sources = source_specs
        .iter()
        .map(|spec| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            SourceDomain {
                spec: spec.clone(),
                train: sample_split(spec, spec.samples_train, &mut rng),
                test: sample_split(spec, spec.samples_test, &mut rng),
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(target_spec.seed);
    let train = sample_split(target_spec, target_spec.samples_train, &mut rng);
    let test = sample_split(target_spec, target_spec.samples_test, &mut rng);
    let ds = MultiDomainDataset {
        num_classes: k,
        input_dim: 2,
        sources,
        target: TargetDomain {
            spec: target_spec.clone(),
            train: FeatureSplit { x: train.x },
            test,
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Compact description of a ring benchmark; expands into one
/// [`DomainSpec`] per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingBenchmark {
    pub class_count: usize,
    pub source_rotations_deg: Vec<f64>,
    pub target_rotation_deg: f64,
    pub translation: [f64; 2],
    pub noise_sigma: f64,
    pub samples_train: usize,
    pub samples_test: usize,
    /// Domain `i` uses seed `seed + i`.
    pub seed: u64,
}

impl RingBenchmark {
    /// Four sources at 0°, 20°, 40°, 60° and a target at 80°.
    pub fn ring5() -> Self {
        Self {
            class_count: 3,
            source_rotations_deg: vec![0.0, 20.0, 40.0, 60.0],
            target_rotation_deg: 80.0,
            translation: [0.0, 0.0],
            noise_sigma: 0.25,
            samples_train: 500,
            samples_test: 200,
            seed: 1000,
        }
    }

    pub fn specs(&self) -> Vec<DomainSpec> {
        let rotations = self
            .source_rotations_deg
            .iter()
            .copied()
            .chain(std::iter::once(self.target_rotation_deg));
        let n_sources = self.source_rotations_deg.len();
        rotations
            .enumerate()
            .map(|(i, rot)| DomainSpec {
                name: if i == n_sources {
                    "target".into()
                } else {
                    format!("source{i}")
                },
                rotation_deg: rot,
                translation: self.translation,
                noise_sigma: self.noise_sigma,
                class_count: self.class_count,
                samples_train: self.samples_train,
                samples_test: self.samples_test,
                seed: self.seed + i as u64,
            })
            .collect()
    }

    pub fn generate(&self) -> Result<MultiDomainDataset> {
        generate_ring_domains(&self.specs())
    }
}

impl Default for RingBenchmark {
    fn default() -> Self {
        Self::ring5()
    }
}
