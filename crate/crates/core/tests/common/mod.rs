#![allow(dead_code)]

use std::collections::BTreeMap;

use fedgnn::graph::{
    assemble_multilayer, rewire_layer, Band, ConnectivityMatrix, Coupling, PatientSample, Region, RegionAtlas,
};
use fedgnn::model::{FeatureScheme, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_atlas(rng: &mut ChaCha8Rng, n: usize) -> RegionAtlas {
    RegionAtlas::new(
        (0..n)
            .map(|i| Region {
                id: format!("r{i:02}"),
                position: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            })
            .collect(),
    )
    .unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, band: Band, n: usize) -> ConnectivityMatrix {
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let x = rng.gen_range(0.0..1.0);
            values[i * n + j] = x;
            values[j * n + i] = x;
        }
    }
    ConnectivityMatrix::new(band, n, values).unwrap()
}

/// Random multilayer sample with `n` regions and `layers` bands.
pub fn toy_sample(seed: u64, n: usize, layers: usize, k: usize, percentile: f64) -> PatientSample {
    let mut rng = rng(seed);
    let atlas = random_atlas(&mut rng, n);
    let graphs = Band::ALL[..layers]
        .iter()
        .map(|&b| rewire_layer(&random_matrix(&mut rng, b, n), &atlas, k, percentile).unwrap())
        .collect();
    let graph = assemble_multilayer(graphs, Coupling::AdjacentReplica).unwrap();
    PatientSample::new(format!("toy{seed}"), "hosp-0", rng.gen_range(1..=42), graph).unwrap()
}

pub fn toy_config(n: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        regions: n,
        bands: layers,
        feature_scheme: FeatureScheme::OneHotPlusStrength,
        ..ModelConfig::default()
    }
}

pub fn matrices_of(sample_seed: u64, n: usize) -> (RegionAtlas, BTreeMap<Band, ConnectivityMatrix>) {
    let mut rng = rng(sample_seed);
    let atlas = random_atlas(&mut rng, n);
    let m = Band::ALL.iter().map(|&b| (b, random_matrix(&mut rng, b, n))).collect();
    (atlas, m)
}
