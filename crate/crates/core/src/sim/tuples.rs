//! Synthetic training tuples for the toy trainer.
//!
//! Places are random anchor feature maps; a sample of a place is its anchor
//! plus per-entry gaussian noise. A tuple draws a query and its positives
//! from one place and negatives from others.

use crate::netvlad::FeatureMap;
use crate::train::{FeatureTuple, TupleDataset};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleDatasetConfig {
    pub seed: u64,
    pub places: usize,
    /// Feature-map geometry fed to the aggregation layer.
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub train_tuples: usize,
    pub validation_tuples: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Per-entry gaussian noise around the place anchor.
    pub sample_noise: f64,
    /// Fraction of hard tuples; mixing difficulties keeps some tuples
    /// satisfiable while others stay a lasting gradient source.
    #[serde(default)]
    pub hard_fraction: f64,
    /// Noise level of hard tuples; `sample_noise` is used when absent.
    #[serde(default)]
    pub hard_sample_noise: Option<f64>,
    /// Hard samples blend this much of a fixed confuser place into the
    /// anchor. Confusable-but-consistent structure stays learnable, unlike
    /// plain noise.
    #[serde(default)]
    pub confuser_mix: f64,
}

impl Default for TupleDatasetConfig {
    fn default() -> Self {
        TupleDatasetConfig {
            seed: 0,
            places: 12,
            width: 3,
            height: 3,
            channels: 16,
            train_tuples: 64,
            validation_tuples: 200,
            positives: 6,
            negatives: 6,
            sample_noise: 0.4,
            hard_fraction: 0.5,
            hard_sample_noise: None,
            confuser_mix: 0.55,
        }
    }
}

fn random_map(
    width: usize,
    height: usize,
    channels: usize,
    rng: &mut ChaCha12Rng,
) -> FeatureMap {
    let data = (0..width * height * channels)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    FeatureMap::new(width, height, channels, data).expect("consistent shape")
}

/// Deterministic synthetic dataset of feature tuples.
pub fn generate_tuples(cfg: &TupleDatasetConfig) -> TupleDataset {
    use rand::Rng;
    assert!(cfg.places >= 2, "need at least two places for negatives");
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let anchors: Vec<FeatureMap> = (0..cfg.places)
        .map(|_| random_map(cfg.width, cfg.height, cfg.channels, &mut rng))
        .collect();

    let sample = |place: usize, hard: bool, rng: &mut ChaCha12Rng| -> FeatureMap {
        let noise = if hard {
            cfg.hard_sample_noise.unwrap_or(cfg.sample_noise)
        } else {
            cfg.sample_noise
        };
        let beta = if hard { cfg.confuser_mix } else { 0.0 };
        let confuser = &anchors[(place + 1) % cfg.places];
        let mut map = anchors[place].clone();
        for (i, v) in map.data_mut().iter_mut().enumerate() {
            let g: f64 = StandardNormal.sample(rng);
            *v = (1.0 - beta) * *v + beta * confuser.data()[i] + noise * g;
        }
        map
    };
    let make_tuple = |rng: &mut ChaCha12Rng| -> FeatureTuple {
        let place = rng.random_range(0..cfg.places);
        let hard = rng.random_range(0.0..1.0) < cfg.hard_fraction;
        let mut negatives = Vec::with_capacity(cfg.negatives);
        while negatives.len() < cfg.negatives {
            let other = rng.random_range(0..cfg.places);
            if other != place {
                negatives.push(sample(other, hard, rng));
            }
        }
        FeatureTuple {
            query: sample(place, hard, rng),
            positives: (0..cfg.positives).map(|_| sample(place, hard, rng)).collect(),
            negatives,
        }
    };

    TupleDataset {
        train: (0..cfg.train_tuples).map(|_| make_tuple(&mut rng)).collect(),
        validation: (0..cfg.validation_tuples)
            .map(|_| make_tuple(&mut rng))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_shaped() {
        let cfg = TupleDatasetConfig::default();
        let a = generate_tuples(&cfg);
        let b = generate_tuples(&cfg);
        assert_eq!(a.train.len(), cfg.train_tuples);
        assert_eq!(a.validation.len(), cfg.validation_tuples);
        assert_eq!(a.train[0].positives.len(), cfg.positives);
        assert_eq!(a.train[0].negatives.len(), cfg.negatives);
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.query, y.query);
        }
    }
}
