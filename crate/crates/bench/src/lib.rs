//! Seeded inputs shared by the benchmarks.

use simcal_core::calibration::LayerPools;
use simcal_core::pairs::{sample_pairs, ExclusionPolicy, LabeledPair, SamplerConfig, WindowRef};
use simcal_core::synthetic::{PlantedCorpus, PlantedSpec};
use simcal_core::{Weighting, XorShift64Star};

pub fn gaussian_rows(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = XorShift64Star::new(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.next_gaussian()).collect())
        .collect()
}

/// `x` and a noisy monotone transform of it, with ties in `y`.
pub fn correlated_lists(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = XorShift64Star::new(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
    let y = x
        .iter()
        .map(|v| (v + rng.next_gaussian()).round())
        .collect();
    (x, y)
}

pub struct PlantedGrid {
    pub pools: Vec<(WindowRef, LayerPools)>,
    pub pairs: Vec<LabeledPair>,
    pub layers: usize,
}

pub fn planted_grid(pairs_per_class: usize, seed: u64) -> PlantedGrid {
    let corpus = PlantedCorpus::generate(PlantedSpec {
        seed,
        ..PlantedSpec::default()
    })
    .expect("default planted spec is valid");
    let pairs = sample_pairs(
        &corpus.sampler_windows(),
        &SamplerConfig {
            window: 8,
            stride: 4,
            positives: pairs_per_class,
            negatives: pairs_per_class,
            seed,
            exclusion: ExclusionPolicy::None,
        },
    )
    .expect("planted corpus has enough windows");
    let pools = corpus
        .windows
        .iter()
        .map(|w| {
            let p = LayerPools::from_activations(&w.activations, &Weighting::ALL)
                .expect("planted activations are non-empty");
            (w.reference.clone(), p)
        })
        .collect();
    PlantedGrid {
        pools,
        pairs,
        layers: corpus.spec.layers,
    }
}
