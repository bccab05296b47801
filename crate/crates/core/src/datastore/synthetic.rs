//! Gaussian-cluster stand-in for frozen-encoder features.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, EmbeddingDataset, EmbeddingRecord};
use crate::seed;

/// Every class is an isotropic Gaussian around a random unit-norm mean.
/// `sigma` is the expected norm of the noise vector, so each coordinate has
/// standard deviation `sigma / sqrt(d_in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 30,
            per_class: 100,
            d_in: 512,
            sigma: 0.35,
        }
    }
}

/// Unit-norm class centres used by [`gen_synthetic`] for this seed.
pub fn class_means(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed, &[0]);
    (0..spec.n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.d_in)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<EmbeddingDataset, DataError> {
    if spec.n_classes < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 classes, got {}",
            spec.n_classes
        )));
    }
    if spec.d_in == 0 || spec.per_class == 0 {
        return Err(DataError::Config(
            "d_in and per_class must be positive".into(),
        ));
    }
    if !spec.sigma.is_finite() || spec.sigma <= 0.0 {
        return Err(DataError::Config(format!(
            "spread must be positive, got {}",
            spec.sigma
        )));
    }
    let means = class_means(spec, seed);
    let mut rng = seed::rng(seed, &[1]);
    let scale = spec.sigma / (spec.d_in as f64).sqrt();
    let mut records = Vec::with_capacity(spec.n_classes * spec.per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let vector = mean
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + scale * z) as f32
                })
                .collect();
            records.push(EmbeddingRecord {
                label: c as u32,
                vector,
            });
        }
    }
    let names = (0..spec.n_classes).map(|c| format!("class_{c:02}")).collect();
    EmbeddingDataset::new(
        spec.d_in,
        names,
        records,
        format!(
            "synthetic: {} classes x {} per class, d_in {}, sigma {}, seed {seed}",
            spec.n_classes, spec.per_class, spec.d_in, spec.sigma
        ),
    )
}
