//! Synthetic cohort generation and patient splits.
//!
//! Each patient has a latent severity `s` in `[0, 1]`. Band coherence falls
//! off with inter-electrode distance, is scaled by a band gain that moves with
//! `s` (up in the slow bands, down in alpha1 and beta1, up in alpha2) and is
//! depressed over a randomly chosen lesioned hemisphere. The NIHSS label is a
//! planted linear function of the per-band top-k mean coherence plus Gaussian
//! noise, calibrated on a pilot population so that labels centre near 21.5.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, PatientRecord};
use crate::graph::{Band, ConnectivityMatrix, RegionAtlas};
use crate::seed::derive_seed;

pub const NIHSS_MIN: u8 = 1;
pub const NIHSS_MAX: u8 = 42;

#[derive(Debug, Error, PartialEq)]
pub enum DatagenError {
    #[error("invalid cohort configuration: {0}")]
    Config(String),
    #[error("could not draw a patient with label in {lo}..={hi} after {attempts} attempts")]
    Rejection { lo: u8, hi: u8, attempts: usize },
}

pub type Result<T> = std::result::Result<T, DatagenError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_patients: usize,
    /// Relative hospital sizes; turned into counts by largest remainder.
    pub shard_proportions: Vec<f64>,
    /// Explicit hospital sizes. Overrides the proportions and must sum to `n_patients`.
    pub shard_sizes: Option<Vec<usize>>,
    /// Fraction of each hospital drawn from its own label quartile.
    pub heterogeneity: f64,
    pub seed: u64,
    pub bands: Vec<Band>,
    pub label_noise: f64,
    pub top_k: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 72,
            shard_proportions: vec![0.35, 0.30, 0.20, 0.15],
            shard_sizes: None,
            heterogeneity: 0.5,
            seed: 0,
            bands: Band::ALL.to_vec(),
            label_noise: 2.5,
            top_k: 10,
        }
    }
}

impl CohortConfig {
    pub fn resolved_shard_sizes(&self) -> Result<Vec<usize>> {
        let sizes = match &self.shard_sizes {
            Some(s) => {
                if s.iter().sum::<usize>() != self.n_patients {
                    return Err(DatagenError::Config(format!(
                        "shard sizes sum to {} but the cohort has {} patients",
                        s.iter().sum::<usize>(),
                        self.n_patients
                    )));
                }
                s.clone()
            }
            None => largest_remainder(&self.shard_proportions, self.n_patients)?,
        };
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(DatagenError::Config("every hospital needs at least one patient".into()));
        }
        Ok(sizes)
    }

    fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(DatagenError::Config("cohort must have at least one patient".into()));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(DatagenError::Config(format!("heterogeneity {} outside [0, 1]", self.heterogeneity)));
        }
        if self.bands.is_empty() {
            return Err(DatagenError::Config("no bands requested".into()));
        }
        if self.top_k == 0 {
            return Err(DatagenError::Config("top_k must be positive".into()));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return Err(DatagenError::Config("label_noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Integer apportionment of `n` by `weights`; ties in the remainder go to the earlier shard.
pub fn largest_remainder(weights: &[f64], n: usize) -> Result<Vec<usize>> {
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(DatagenError::Config("shard proportions must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Gain at zero severity and its change per unit severity.
fn band_profile(band: Band) -> (f64, f64) {
    match band {
        Band::Delta => (0.30, 0.40),
        Band::Theta => (0.35, 0.30),
        Band::Alpha1 => (0.70, -0.45),
        Band::Alpha2 => (0.35, 0.35),
        Band::Beta1 => (0.55, -0.30),
    }
}

const DECAY_LENGTH: f64 = 0.7;
const EDGE_NOISE: f64 = 0.03;
const LESION_DEPTH: f64 = 0.35;
const PILOT_SIZE: usize = 256;
const LABEL_CENTRE: f64 = 21.5;
const LABEL_SPREAD: f64 = 11.0;
const MAX_ATTEMPTS: usize = 20_000;

fn coherence_matrices(atlas: &RegionAtlas, bands: &[Band], severity: f64, rng: &mut ChaCha8Rng) -> BTreeMap<Band, ConnectivityMatrix> {
    let v = atlas.len();
    let left_lesion = rng.gen_bool(0.5);
    let lesioned: Vec<bool> = atlas
        .regions()
        .iter()
        .map(|r| if left_lesion { r.position[1] > 0.15 } else { r.position[1] < -0.15 })
        .collect();
    let noise = Normal::new(0.0, EDGE_NOISE).unwrap();
    let community = Normal::new(0.0, 0.08).unwrap();
    let mut out = BTreeMap::new();
    for &band in bands {
        let (g0, slope) = band_profile(band);
        let gain = (g0 + slope * severity).clamp(0.05, 0.95);
        let z: Vec<f64> = (0..v).map(|_| community.sample(rng)).collect();
        let mut m = vec![0.0; v * v];
        for i in 0..v {
            for j in i + 1..v {
                let mut c = gain * (-atlas.distance(i, j) / DECAY_LENGTH).exp() + z[i] * z[j] + noise.sample(rng);
                if lesioned[i] || lesioned[j] {
                    c *= 1.0 - LESION_DEPTH * severity;
                }
                let c = c.clamp(0.0, 1.0);
                m[i * v + j] = c;
                m[j * v + i] = c;
            }
        }
        out.insert(band, ConnectivityMatrix::new(band, v, m).expect("generated matrix is valid"));
    }
    out
}

/// Mean of the `k` largest upper-triangle entries.
pub fn top_k_mean(m: &ConnectivityMatrix, k: usize) -> f64 {
    let mut vals = m.upper_triangle();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = k.min(vals.len()).max(1);
    vals[..k].iter().sum::<f64>() / k as f64
}

/// Linear map from per-band top-k mean coherence to the noise-free NIHSS score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub intercept: f64,
    pub coefficients: BTreeMap<Band, f64>,
    pub top_k: usize,
    pub noise_sigma: f64,
    /// Least-squares fit of the noise-free score on severity, used to aim
    /// rejection sampling at a label range.
    pub severity_intercept: f64,
    pub severity_slope: f64,
}

impl PlantedModel {
    pub fn score(&self, matrices: &BTreeMap<Band, ConnectivityMatrix>) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .map(|(b, c)| c * top_k_mean(&matrices[b], self.top_k))
                .sum::<f64>()
    }

    fn calibrate(atlas: &RegionAtlas, config: &CohortConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x9170]));
        let mut weight_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x3e16]));
        let mut severities = Vec::with_capacity(PILOT_SIZE);
        let mut feats: Vec<Vec<f64>> = Vec::with_capacity(PILOT_SIZE);
        for _ in 0..PILOT_SIZE {
            let s: f64 = rng.gen();
            let m = coherence_matrices(atlas, &config.bands, s, &mut rng);
            severities.push(s);
            feats.push(config.bands.iter().map(|b| top_k_mean(&m[b], config.top_k)).collect());
        }
        let nb = config.bands.len();
        let mean_sd = |j: usize| {
            let xs: Vec<f64> = feats.iter().map(|f| f[j]).collect();
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            (mu, sd.max(1e-9))
        };
        let stats: Vec<(f64, f64)> = (0..nb).map(mean_sd).collect();
        let raw: Vec<f64> = config
            .bands
            .iter()
            .map(|b| band_profile(*b).1.signum() * weight_rng.gen_range(0.5..1.5))
            .collect();
        let z: Vec<f64> = feats
            .iter()
            .map(|f| (0..nb).map(|j| raw[j] * (f[j] - stats[j].0) / stats[j].1).sum())
            .collect();
        let zmu = z.iter().sum::<f64>() / z.len() as f64;
        let zsd = (z.iter().map(|x| (x - zmu).powi(2)).sum::<f64>() / z.len() as f64).sqrt().max(1e-9);
        let coefficients: BTreeMap<Band, f64> = config
            .bands
            .iter()
            .enumerate()
            .map(|(j, b)| (*b, LABEL_SPREAD * raw[j] / (stats[j].1 * zsd)))
            .collect();
        let intercept = LABEL_CENTRE - LABEL_SPREAD * zmu / zsd
            - config.bands.iter().enumerate().map(|(j, b)| coefficients[b] * stats[j].0).sum::<f64>();
        let scores: Vec<f64> = z.iter().map(|zi| LABEL_CENTRE + LABEL_SPREAD * (zi - zmu) / zsd).collect();
        let smu = severities.iter().sum::<f64>() / PILOT_SIZE as f64;
        let ymu = scores.iter().sum::<f64>() / PILOT_SIZE as f64;
        let sxy: f64 = severities.iter().zip(&scores).map(|(s, y)| (s - smu) * (y - ymu)).sum();
        let sxx: f64 = severities.iter().map(|s| (s - smu).powi(2)).sum();
        let slope = sxy / sxx;
        Self {
            intercept,
            coefficients,
            top_k: config.top_k,
            noise_sigma: config.label_noise,
            severity_intercept: ymu - slope * smu,
            severity_slope: slope,
        }
    }
}

/// Inclusive label range assigned to hospital `j` of `n` under heterogeneity.
pub fn quartile_range(j: usize, n: usize) -> (u8, u8) {
    let span = f64::from(NIHSS_MAX);
    let lo = 1 + (span * j as f64 / n as f64).floor() as u8;
    let hi = (span * (j + 1) as f64 / n as f64).floor() as u8;
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub config: CohortConfig,
    pub shard_sizes: Vec<usize>,
    pub hospitals: Vec<String>,
    pub planted: PlantedModel,
    pub label_histogram: BTreeMap<u8, usize>,
}

struct Draw {
    label: u8,
    matrices: BTreeMap<Band, ConnectivityMatrix>,
}

fn draw_patient(
    atlas: &RegionAtlas,
    config: &CohortConfig,
    planted: &PlantedModel,
    stream: u64,
    range: Option<(u8, u8)>,
) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xd4a7, stream]));
    let noise = Normal::new(0.0, config.label_noise.max(f64::MIN_POSITIVE)).unwrap();
    let (s_lo, s_hi) = match range {
        None => (0.0, 1.0),
        Some((lo, hi)) => {
            let a = (f64::from(lo) - 0.5 - planted.severity_intercept) / planted.severity_slope;
            let b = (f64::from(hi) + 0.5 - planted.severity_intercept) / planted.severity_slope;
            let (a, b) = (a.min(b) - 0.1, a.max(b) + 0.1);
            (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0).max(a.clamp(0.0, 1.0) + 1e-6))
        }
    };
    let attempts = if range.is_some() { MAX_ATTEMPTS } else { 1 };
    for _ in 0..attempts {
        let s = rng.gen_range(s_lo..=s_hi.min(1.0));
        let matrices = coherence_matrices(atlas, &config.bands, s, &mut rng);
        let eps = if config.label_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let label = (planted.score(&matrices) + eps).round().clamp(f64::from(NIHSS_MIN), f64::from(NIHSS_MAX)) as u8;
        match range {
            Some((lo, hi)) if !(lo..=hi).contains(&label) => continue,
            _ => return Ok(Draw { label, matrices }),
        }
    }
    let (lo, hi) = range.unwrap();
    Err(DatagenError::Rejection { lo, hi, attempts })
}

/// Generate a cohort over the default 31-region atlas.
pub fn generate_cohort(config: &CohortConfig) -> Result<(Dataset, CohortManifest)> {
    generate_cohort_with_atlas(config, RegionAtlas::default_31())
}

pub fn generate_cohort_with_atlas(config: &CohortConfig, atlas: RegionAtlas) -> Result<(Dataset, CohortManifest)> {
    config.validate()?;
    if atlas.len() < 2 {
        return Err(DatagenError::Config("atlas needs at least two regions".into()));
    }
    let sizes = config.resolved_shard_sizes()?;
    let planted = PlantedModel::calibrate(&atlas, config);
    let hospitals: Vec<String> = (0..sizes.len()).map(|i| format!("hosp-{i}")).collect();

    let mut stream = 0u64;
    let mut members: Vec<Vec<Draw>> = (0..sizes.len()).map(|_| Vec::new()).collect();
    for (j, &n) in sizes.iter().enumerate() {
        let restricted = (config.heterogeneity * n as f64).round() as usize;
        let range = quartile_range(j, sizes.len());
        for _ in 0..restricted {
            members[j].push(draw_patient(&atlas, config, &planted, stream, Some(range))?);
            stream += 1;
        }
    }
    let free_counts: Vec<usize> = sizes.iter().zip(&members).map(|(n, m)| n - m.len()).collect();
    let total_free: usize = free_counts.iter().sum();
    let mut pool = Vec::with_capacity(total_free);
    for _ in 0..total_free {
        pool.push(draw_patient(&atlas, config, &planted, stream, None)?);
        stream += 1;
    }
    // Deal the unrestricted patients in label order so every hospital gets a
    // similar label mix.
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&i| (pool[i].label, i));
    let mut assigned = vec![0usize; sizes.len()];
    let mut target_of = vec![0usize; pool.len()];
    for (k, &i) in order.iter().enumerate() {
        let progress = (k + 1) as f64 / total_free as f64;
        let j = (0..sizes.len())
            .filter(|&j| assigned[j] < free_counts[j])
            .max_by(|&a, &b| {
                let da = free_counts[a] as f64 * progress - assigned[a] as f64;
                let db = free_counts[b] as f64 * progress - assigned[b] as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .expect("capacity remains while patients remain");
        assigned[j] += 1;
        target_of[i] = j;
    }
    let mut pool: Vec<Option<Draw>> = pool.into_iter().map(Some).collect();
    for i in 0..pool.len() {
        let d = pool[i].take().unwrap();
        members[target_of[i]].push(d);
    }

    let mut patients = Vec::with_capacity(config.n_patients);
    for (j, group) in members.into_iter().enumerate() {
        for d in group {
            patients.push(PatientRecord {
                id: format!("p{:03}", patients.len()),
                hospital: hospitals[j].clone(),
                label: d.label,
                matrices: d.matrices,
            });
        }
    }
    let mut label_histogram = BTreeMap::new();
    for p in &patients {
        *label_histogram.entry(p.label).or_insert(0) += 1;
    }
    let manifest = CohortManifest {
        config: config.clone(),
        shard_sizes: sizes,
        hospitals,
        planted,
        label_histogram,
    };
    Ok((Dataset { atlas, patients }, manifest))
}

/// Draw `k` indices stratified by label quartile. Quartile groups are formed
/// by label rank (ties by index); the `k mod 4` extra picks go to quartiles
/// chosen by the seed. Returns `(selected, rest)`, both sorted.
pub fn stratified_sample(labels: &[(usize, u8)], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if k > n {
        return Err(DatagenError::Config(format!("cannot hold out {k} of {n} patients")));
    }
    let mut ranked = labels.to_vec();
    ranked.sort_by_key(|&(i, l)| (l, i));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for (r, &(i, _)) in ranked.iter().enumerate() {
        groups[r * 4 / n.max(1)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5417]));
    let mut quota = vec![k / 4; 4];
    let mut extra: Vec<usize> = (0..4).collect();
    extra.shuffle(&mut rng);
    for &q in extra.iter().take(k % 4) {
        quota[q] += 1;
    }
    // Move any quota a group cannot fill to the next group with room.
    for q in 0..4 {
        while quota[q] > groups[q].len() {
            quota[q] -= 1;
            let to = (0..4).find(|&g| quota[g] < groups[g].len()).expect("k <= n leaves room");
            quota[to] += 1;
        }
    }
    let mut selected = Vec::with_capacity(k);
    for (g, group) in groups.iter_mut().enumerate() {
        group.shuffle(&mut rng);
        selected.extend_from_slice(&group[..quota[g]]);
    }
    selected.sort_unstable();
    let mut rest: Vec<usize> = labels.iter().map(|&(i, _)| i).filter(|i| selected.binary_search(i).is_err()).collect();
    rest.sort_unstable();
    Ok((selected, rest))
}

/// Stratified test hold-out over a whole cohort (indices into `labels`).
pub fn hold_out_test(labels: &[u8], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let indexed: Vec<(usize, u8)> = labels.iter().copied().enumerate().collect();
    stratified_sample(&indexed, k, seed)
}

/// Validation size: 10% of the training pool, rounded up.
pub fn validation_size(train: usize) -> usize {
    (train as f64 * 0.1).ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub id: String,
    pub members: Vec<usize>,
}

fn validate_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

/// Group `indices` by their hospital tag; shards come out in tag order.
pub fn partition_realistic(hospitals: &[String], indices: &[usize]) -> Result<Vec<Shard>> {
    let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by.entry(hospitals[i].as_str()).or_default().push(i);
    }
    by.into_iter()
        .map(|(h, members)| {
            if !validate_id(h) {
                return Err(DatagenError::Config(format!("hospital id `{h}` must match [a-z0-9-]+")));
            }
            Ok(Shard { id: h.to_string(), members })
        })
        .collect()
}

/// Label-balanced equal-size shards: sort by label and deal round-robin.
pub fn partition_idealized(labels: &[u8], indices: &[usize], n_shards: usize) -> Result<Vec<Shard>> {
    if n_shards == 0 || n_shards > indices.len() {
        return Err(DatagenError::Config(format!(
            "cannot split {} patients into {n_shards} shards",
            indices.len()
        )));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_by_key(|&i| (labels[i], i));
    let mut shards: Vec<Shard> = (0..n_shards)
        .map(|j| Shard {
            id: format!("shard-{j}"),
            members: Vec::new(),
        })
        .collect();
    for (pos, i) in sorted.into_iter().enumerate() {
        shards[pos % n_shards].members.push(i);
    }
    for s in &mut shards {
        s.members.sort_unstable();
    }
    Ok(shards)
}

/// Test, validation and training indices for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
    pub train: Vec<usize>,
}

pub fn split_cohort(labels: &[u8], test_size: usize, seed: u64) -> Result<Split> {
    let (test, pool) = hold_out_test(labels, test_size, seed)?;
    let indexed: Vec<(usize, u8)> = pool.iter().map(|&i| (i, labels[i])).collect();
    let (validation, train) = stratified_sample(&indexed, validation_size(pool.len()), derive_seed(seed, &[0x7a1]))?;
    Ok(Split { test, validation, train })
}
