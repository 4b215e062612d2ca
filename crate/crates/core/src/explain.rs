//! Edge Shapley attributions, node centrality and model similarity.
//!
//! The explained edges of a multilayer graph are its intra-layer, non-loop
//! edges. Self-loops and inter-layer couplings stay in every coalition, so the
//! empty coalition is still a valid forward pass.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{MultilayerGraph, PatientSample, Provenance};
use crate::model::{forward, EdgeIndex, FeatureScheme, GraphInput, ModelError, ModelParameters, PredictionContext};
use crate::seed::derive_seed;

pub const EXACT_EDGE_LIMIT: usize = 20;
pub const DEFAULT_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{edges} explained edges exceed the exact-enumeration limit of {limit}; use the Monte Carlo estimator")]
    TooManyEdges { edges: usize, limit: usize },
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// f(S) over coalitions of explained edges, given as presence flags.
pub trait EdgeValueFunction: Sync {
    fn num_edges(&self) -> usize;
    fn value(&self, present: &[bool]) -> Result<f64>;
}

/// Value function from a closure.
pub struct FnValue<F> {
    edges: usize,
    f: F,
}

impl<F: Fn(&[bool]) -> f64 + Sync> FnValue<F> {
    pub fn new(edges: usize, f: F) -> Self {
        Self { edges, f }
    }
}

impl<F: Fn(&[bool]) -> f64 + Sync> EdgeValueFunction for FnValue<F> {
    fn num_edges(&self) -> usize {
        self.edges
    }
    fn value(&self, present: &[bool]) -> Result<f64> {
        Ok((self.f)(present))
    }
}

/// Caches f(S); safe to share across threads.
pub struct Memoized<'a, V: EdgeValueFunction + ?Sized> {
    inner: &'a V,
    cache: Mutex<HashMap<Vec<bool>, f64>>,
}

impl<'a, V: EdgeValueFunction + ?Sized> Memoized<'a, V> {
    pub fn new(inner: &'a V) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl<V: EdgeValueFunction + ?Sized> EdgeValueFunction for Memoized<'_, V> {
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }
    fn value(&self, present: &[bool]) -> Result<f64> {
        if let Some(v) = self.cache.lock().unwrap().get(present) {
            return Ok(*v);
        }
        let v = self.inner.value(present)?;
        self.cache.lock().unwrap().insert(present.to_vec(), v);
        Ok(v)
    }
}

/// One explainable edge of a multilayer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedEdge {
    pub layer: usize,
    pub u: usize,
    pub v: usize,
    pub weight: f64,
    pub provenance: Provenance,
}

/// Intra-layer non-loop edges, ordered by (layer, u, v).
pub fn explained_edges(graph: &MultilayerGraph) -> Vec<ExplainedEdge> {
    let mut out: Vec<ExplainedEdge> = graph
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            layer.edges.iter().filter(|e| e.u != e.v).map(move |e| ExplainedEdge {
                layer: l,
                u: e.u.min(e.v),
                v: e.u.max(e.v),
                weight: e.weight,
                provenance: e.provenance,
            })
        })
        .collect();
    out.sort_by_key(|e| (e.layer, e.u, e.v));
    out
}

/// Eval-mode prediction of a trained model with only a subset of edges present.
/// Node features are those of the full graph.
pub struct GnnValueFunction<'a> {
    params: &'a ModelParameters,
    graph: &'a MultilayerGraph,
    base: GraphInput,
    edges: Vec<ExplainedEdge>,
    lookup: HashMap<(usize, usize, usize), usize>,
}

impl<'a> GnnValueFunction<'a> {
    pub fn new(params: &'a ModelParameters, sample: &'a PatientSample, scheme: FeatureScheme) -> Self {
        let edges = explained_edges(&sample.graph);
        let lookup = edges.iter().enumerate().map(|(i, e)| ((e.layer, e.u, e.v), i)).collect();
        Self {
            params,
            graph: &sample.graph,
            base: GraphInput::from_sample(sample, scheme),
            edges,
            lookup,
        }
    }

    pub fn edges(&self) -> &[ExplainedEdge] {
        &self.edges
    }
}

impl EdgeValueFunction for GnnValueFunction<'_> {
    fn num_edges(&self) -> usize {
        self.edges.len()
    }

    fn value(&self, present: &[bool]) -> Result<f64> {
        if present.len() != self.edges.len() {
            return Err(ExplainError::LengthMismatch {
                expected: self.edges.len(),
                actual: present.len(),
            });
        }
        let edges = EdgeIndex::from_graph_filtered(self.graph, |layer, u, v| {
            self.lookup
                .get(&(layer, u.min(v), u.max(v)))
                .map_or(true, |&i| present[i])
        });
        let input = GraphInput {
            features: self.base.features.clone(),
            edges,
            label: self.base.label,
        };
        Ok(forward(&input, self.params, PredictionContext::eval())?)
    }
}

fn shapley_weights(n: usize) -> Vec<f64> {
    // w(s) = s! (n−s−1)! / n! = 1 / (n · C(n−1, s))
    let mut binom = vec![1.0f64; n];
    for s in 1..n {
        binom[s] = binom[s - 1] * (n - s) as f64 / s as f64;
    }
    binom.iter().map(|b| 1.0 / (n as f64 * b)).collect()
}

/// Exact Shapley values by enumerating all 2^n coalitions.
pub fn exact_shapley(vf: &(impl EdgeValueFunction + ?Sized)) -> Result<Vec<f64>> {
    let n = vf.num_edges();
    if n > EXACT_EDGE_LIMIT {
        return Err(ExplainError::TooManyEdges {
            edges: n,
            limit: EXACT_EDGE_LIMIT,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let values = (0..1usize << n)
        .into_par_iter()
        .map(|mask| {
            let present: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            vf.value(&present)
        })
        .collect::<Result<Vec<f64>>>()?;
    let w = shapley_weights(n);
    Ok((0..n)
        .map(|i| {
            let bit = 1usize << i;
            (0..1usize << n)
                .filter(|m| m & bit == 0)
                .map(|m| w[m.count_ones() as usize] * (values[m | bit] - values[m]))
                .sum()
        })
        .collect())
}

/// Monte Carlo Shapley estimates from `m` sampled coalitions per edge.
///
/// Each coalition of the other edges is drawn by picking its size uniformly
/// from `0..n` and then a uniform subset of that size, which makes every
/// marginal contribution an unbiased sample of the Shapley value. Edge `i`
/// uses its own stream seeded from `(seed, i)`.
pub fn mc_shapley(vf: &(impl EdgeValueFunction + ?Sized), m: usize, seed: u64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(ExplainError::Invalid("sample count must be at least 1".into()));
    }
    let n = vf.num_edges();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut total = 0.0;
            let mut present = vec![false; n];
            for _ in 0..m {
                present.iter_mut().for_each(|p| *p = false);
                let size = rng.gen_range(0..n);
                for k in sample(&mut rng, others.len(), size) {
                    present[others[k]] = true;
                }
                let without = vf.value(&present)?;
                present[i] = true;
                let with = vf.value(&present)?;
                total += with - without;
            }
            Ok(total / m as f64)
        })
        .collect()
}

/// Mean absolute attribution per incident edge: Σ_{e∋v} |φ(e)| / deg(v).
/// Nodes without incident edges get 0.
pub fn node_centrality(num_nodes: usize, edges: &[(usize, usize)], phi: &[f64]) -> Result<Vec<f64>> {
    if edges.len() != phi.len() {
        return Err(ExplainError::LengthMismatch {
            expected: edges.len(),
            actual: phi.len(),
        });
    }
    let mut mass = vec![0.0; num_nodes];
    let mut degree = vec![0usize; num_nodes];
    for (&(u, v), p) in edges.iter().zip(phi) {
        if u >= num_nodes || v >= num_nodes {
            return Err(ExplainError::Invalid(format!("edge ({u}, {v}) outside {num_nodes} nodes")));
        }
        for x in [u, v] {
            mass[x] += p.abs();
            degree[x] += 1;
        }
    }
    Ok(mass
        .iter()
        .zip(&degree)
        .map(|(m, &d)| if d == 0 { 0.0 } else { m / d as f64 })
        .collect())
}

/// 1 − ‖u − v‖ / (‖u‖ + ‖v‖), with 1 for two zero vectors.
pub fn model_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ExplainError::LengthMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let norm = |x: &mut dyn Iterator<Item = f64>| x.map(|a| a * a).sum::<f64>().sqrt();
    let nu = norm(&mut u.iter().copied());
    let nv = norm(&mut v.iter().copied());
    if nu + nv == 0.0 {
        return Ok(1.0);
    }
    let d = norm(&mut u.iter().zip(v).map(|(a, b)| a - b));
    Ok((1.0 - d / (nu + nv)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub groups: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Mean over all off-diagonal pairs.
    pub mean: f64,
    /// Mean over off-diagonal pairs inside each group with at least two models.
    pub group_means: BTreeMap<String, f64>,
}

impl SimilarityMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise similarity of labelled flat parameter vectors.
pub fn similarity_matrix(models: &[(String, String, Vec<f64>)]) -> Result<SimilarityMatrix> {
    if models.len() < 2 {
        return Err(ExplainError::Invalid("need at least two models".into()));
    }
    let n = models.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = model_similarity(&models[i].2, &models[j].2)?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    let pair_mean = |members: &[usize]| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += values[i][j];
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    };
    let all: Vec<usize> = (0..n).collect();
    let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, m) in models.iter().enumerate() {
        by_group.entry(m.1.clone()).or_default().push(i);
    }
    let group_means = by_group
        .iter()
        .filter_map(|(g, members)| pair_mean(members).map(|m| (g.clone(), m)))
        .collect();
    Ok(SimilarityMatrix {
        labels: models.iter().map(|m| m.0.clone()).collect(),
        groups: models.iter().map(|m| m.1.clone()).collect(),
        mean: pair_mean(&all).unwrap(),
        values,
        group_means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Exact,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttribution {
    pub layer: usize,
    pub band: String,
    pub u: usize,
    pub v: usize,
    pub region_u: String,
    pub region_v: String,
    pub provenance: Provenance,
    pub weight: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAttribution {
    pub vertex: usize,
    pub region: String,
    pub centrality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub patient: String,
    pub estimator: Estimator,
    pub samples: Option<usize>,
    pub seed: u64,
    pub f_full: f64,
    pub f_empty: f64,
    pub efficiency_residual: f64,
    pub edges: Vec<EdgeAttribution>,
    pub nodes: Vec<NodeAttribution>,
}

fn provenance_label(p: Provenance) -> &'static str {
    match p {
        Provenance::Structural => "structural",
        Provenance::Functional => "functional",
        Provenance::SelfLoop => "self-loop",
        Provenance::Both => "both",
    }
}

impl ShapleyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,band,u,v,region_u,region_v,provenance,weight,phi\n");
        for e in &self.edges {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.layer,
                e.band,
                e.u,
                e.v,
                e.region_u,
                e.region_v,
                provenance_label(e.provenance),
                e.weight,
                e.phi
            ));
        }
        out
    }
}

/// Explain one patient's prediction. Exact enumeration is used when the
/// graph has at most [`EXACT_EDGE_LIMIT`] explained edges, otherwise `m`
/// Monte Carlo samples per edge.
pub fn explain_sample(
    params: &ModelParameters,
    sample: &PatientSample,
    regions: &[String],
    scheme: FeatureScheme,
    m: usize,
    seed: u64,
) -> Result<ShapleyReport> {
    let vf = GnnValueFunction::new(params, sample, scheme);
    let n = vf.num_edges();
    if regions.len() != sample.graph.num_vertices() {
        return Err(ExplainError::Invalid("region names do not match the graph".into()));
    }
    let memo = Memoized::new(&vf);
    let (estimator, phi) = if n <= EXACT_EDGE_LIMIT {
        (Estimator::Exact, exact_shapley(&memo)?)
    } else {
        (Estimator::Mc, mc_shapley(&memo, m, seed)?)
    };
    let f_full = memo.value(&vec![true; n])?;
    let f_empty = memo.value(&vec![false; n])?;
    let efficiency_residual = (phi.iter().sum::<f64>() - (f_full - f_empty)).abs();
    let pairs: Vec<(usize, usize)> = vf.edges().iter().map(|e| (e.u, e.v)).collect();
    let centrality = node_centrality(regions.len(), &pairs, &phi)?;
    let edges = vf
        .edges()
        .iter()
        .zip(&phi)
        .map(|(e, &p)| EdgeAttribution {
            layer: e.layer,
            band: sample.graph.layers[e.layer].band.label().to_string(),
            u: e.u,
            v: e.v,
            region_u: regions[e.u].clone(),
            region_v: regions[e.v].clone(),
            provenance: e.provenance,
            weight: e.weight,
            phi: p,
        })
        .collect();
    let nodes = centrality
        .iter()
        .enumerate()
        .map(|(i, &c)| NodeAttribution {
            vertex: i,
            region: regions[i].clone(),
            centrality: c,
        })
        .collect();
    Ok(ShapleyReport {
        patient: sample.patient_id.clone(),
        estimator,
        samples: (estimator == Estimator::Mc).then_some(m),
        seed,
        f_full,
        f_empty,
        efficiency_residual,
        edges,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_function_recovers_weights() {
        let w = [0.5, -1.0, 2.0];
        let vf = FnValue::new(3, |s: &[bool]| s.iter().zip(&w).filter(|(p, _)| **p).map(|(_, w)| w).sum());
        let phi = exact_shapley(&vf).unwrap();
        for (p, w) in phi.iter().zip(&w) {
            assert!((p - w).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_is_zero() {
        let vf = FnValue::new(4, |_: &[bool]| 3.7);
        assert!(exact_shapley(&vf).unwrap().iter().all(|&p| p == 0.0));
        assert!(mc_shapley(&vf, 17, 3).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn guard_on_edge_count() {
        let vf = FnValue::new(21, |_: &[bool]| 0.0);
        assert!(matches!(exact_shapley(&vf), Err(ExplainError::TooManyEdges { edges: 21, .. })));
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(model_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(model_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap(), 0.0);
        assert!((model_similarity(&[3.0, 0.0], &[0.0, 4.0]).unwrap() - (1.0 - 5.0 / 7.0)).abs() < 1e-15);
        assert_eq!(model_similarity(&[0.0], &[0.0]).unwrap(), 1.0);
        assert!(model_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn centrality_examples() {
        // star: hub 0, leaves 1..=3, only (0,1) attributed
        let edges = [(0, 1), (0, 2), (0, 3)];
        let c = node_centrality(5, &edges, &[0.6, 0.0, 0.0]).unwrap();
        for (a, b) in c.iter().zip([0.2, 0.6, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let c = node_centrality(4, &edges, &[-0.5, -0.5, -0.5]).unwrap();
        assert_eq!(&c[..4], &[0.5, 0.5, 0.5, 0.5]);
    }
}
