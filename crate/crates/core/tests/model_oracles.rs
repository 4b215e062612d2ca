mod common;

use fedgnn::autodiff::Tensor;
use fedgnn::graph::{
    assemble_multilayer, Band, Coupling, LayerEdge, LayerGraph, MultilayerGraph, PatientSample, Provenance,
};
use fedgnn::model::{
    attention_normalize, attention_scores, forward, node_features, EdgeIndex, FeatureScheme, GraphInput, ModelConfig,
    ModelParameters, PredictionContext,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn row(t: &Tensor, r: usize) -> Vec<f64> {
    (0..t.cols()).map(|c| t.get(r, c)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense reference: full N×N attention matrices with edge multiplicities.
fn dense_forward(input: &GraphInput, params: &ModelParameters) -> f64 {
    let config = params.config();
    let n = input.edges.num_nodes;
    let mut adj = vec![vec![0.0f64; n]; n];
    for (&s, &d) in input.edges.src.iter().zip(input.edges.dst.iter()) {
        adj[d][s] += 1.0;
    }
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| row(&input.features, i)).collect();
    for layer in 0..config.gat_layers {
        let d_in = h[0].len();
        let mut heads = Vec::new();
        for head in 0..config.heads {
            let w = params.attention_weight(layer, head);
            let a = params.attention_vector(layer, head);
            let value = params.value_weight(layer, head);
            let a: Vec<f64> = (0..a.rows()).map(|r| a.get(r, 0)).collect();
            let score = |v: usize, u: usize| -> f64 {
                let pair: Vec<f64> = h[v].iter().chain(&h[u]).copied().collect();
                let hidden: Vec<f64> = (0..w.rows()).map(|r| leaky(dot(&row(w, r), &pair), config.negative_slope)).collect();
                dot(&a, &hidden)
            };
            let transformed: Vec<Vec<f64>> = h
                .iter()
                .map(|x| (0..value.rows()).map(|r| dot(&row(value, r), x)).collect())
                .collect();
            let mut out = vec![vec![0.0; config.hidden]; n];
            for v in 0..n {
                let logits: Vec<f64> = (0..n).map(|u| if adj[v][u] > 0.0 { score(v, u) } else { f64::NEG_INFINITY }).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = (0..n).map(|u| adj[v][u] * (logits[u] - m).exp()).collect();
                let z: f64 = weights.iter().sum();
                for u in 0..n {
                    for k in 0..config.hidden {
                        out[v][k] += weights[u] / z * transformed[u][k];
                    }
                }
            }
            assert_eq!(transformed[0].len(), config.hidden);
            assert_eq!(d_in * 2, w.cols());
            heads.push(out);
        }
        h = if layer + 1 == config.gat_layers {
            (0..n)
                .map(|v| (0..config.hidden).map(|k| heads.iter().map(|o| o[v][k]).sum::<f64>() / config.heads as f64).collect())
                .collect()
        } else {
            (0..n)
                .map(|v| heads.iter().flat_map(|o| o[v].iter().map(|x| x.max(0.0))).collect())
                .collect()
        };
    }
    let pooled: Vec<f64> = (0..config.hidden).map(|k| h.iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
    let readout = params.readout_weight();
    let raw = dot(&row(readout, 0), &pooled) + params.readout_bias();
    config.output_offset + config.output_scale * raw
}

#[test]
fn forward_matches_dense_reference() {
    for seed in [21, 22, 23] {
        let sample = common::toy_sample(seed, 5, 2, 1, 80.0);
        let config = common::toy_config(5, 2);
        let params = ModelParameters::init(&config, seed);
        let input = GraphInput::from_sample(&sample, config.feature_scheme);
        let fast = forward(&input, &params, PredictionContext::eval()).unwrap();
        let dense = dense_forward(&input, &params);
        assert!((fast - dense).abs() < 1e-9 * dense.abs().max(1.0), "seed {seed}: {fast} vs {dense}");
    }
}

fn path_graph() -> MultilayerGraph {
    let edges = vec![
        LayerEdge { u: 0, v: 0, weight: 1.0, provenance: Provenance::SelfLoop },
        LayerEdge { u: 0, v: 1, weight: 0.4, provenance: Provenance::Structural },
        LayerEdge { u: 1, v: 1, weight: 1.0, provenance: Provenance::SelfLoop },
        LayerEdge { u: 1, v: 2, weight: 0.7, provenance: Provenance::Structural },
        LayerEdge { u: 2, v: 2, weight: 1.0, provenance: Provenance::SelfLoop },
    ];
    let layer = LayerGraph { band: Band::Alpha1, num_vertices: 3, edges, retention_ratio: 2.0 / 3.0 };
    assemble_multilayer(vec![layer], Coupling::AdjacentReplica).unwrap()
}

#[test]
fn attention_scores_match_direct_formula() {
    let config = ModelConfig { regions: 3, bands: 1, ..ModelConfig::default() };
    let params = ModelParameters::init(&config, 13);
    let graph = path_graph();
    let sample = PatientSample::new("p", "h", 7, graph.clone()).unwrap();
    let x = node_features(&sample, config.feature_scheme);
    let edges = EdgeIndex::from_graph(&graph);
    for head in 0..config.heads {
        let scores = attention_scores(&params, 0, head, &x, &edges).unwrap();
        let w = params.attention_weight(0, head);
        let a = params.attention_vector(0, head);
        for (i, (&s, &d)) in edges.src.iter().zip(edges.dst.iter()).enumerate() {
            let pair: Vec<f64> = row(&x, d).into_iter().chain(row(&x, s)).collect();
            let expected: f64 = (0..w.rows())
                .map(|r| a.get(r, 0) * leaky(dot(&row(w, r), &pair), 0.2))
                .sum();
            assert!((scores[i] - expected).abs() < 1e-12, "edge {s}->{d}");
        }
        let alpha = attention_normalize(&scores, &edges).unwrap();
        let mut sums = [0.0; 3];
        for (&d, a) in edges.dst.iter().zip(&alpha) {
            sums[d] += a;
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }
}

#[test]
fn strengths_match_naive_sums() {
    let sample = common::toy_sample(9, 31, 3, 3, 99.0);
    let x = node_features(&sample, FeatureScheme::OneHotPlusStrength);
    let g = &sample.graph;
    let (v, l) = (g.num_vertices(), g.num_layers());
    let mut raw = vec![vec![0.0; v]; l];
    for (li, layer) in g.layers.iter().enumerate() {
        for vertex in 0..v {
            raw[li][vertex] = layer
                .edges
                .iter()
                .filter(|e| e.u == vertex || e.v == vertex)
                .map(|e| e.weight)
                .sum();
        }
    }
    let all: Vec<f64> = raw.iter().flatten().copied().collect();
    let (lo, hi) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));
    for li in 0..l {
        for vertex in 0..v {
            let r = g.replica(li, vertex);
            for c in 0..v {
                assert_eq!(x.get(r, c), if c == vertex { 1.0 } else { 0.0 });
            }
            for c in 0..l {
                let expected = if c == li { (raw[li][vertex] - lo) / (hi - lo) } else { 0.0 };
                assert!((x.get(r, v + c) - expected).abs() < 1e-12);
            }
        }
    }
    let onehot = node_features(&sample, FeatureScheme::OneHotRegion);
    assert_eq!(onehot.shape(), &[93, 31]);
}

#[test]
fn eval_mode_ignores_dropout_and_is_deterministic() {
    let sample = common::toy_sample(4, 8, 3, 2, 90.0);
    let with = common::toy_config(8, 3);
    let without = ModelConfig { dropout: 0.0, ..with.clone() };
    let params = ModelParameters::init(&with, 4);
    let same = ModelParameters::unflatten(&without, &params.flatten()).unwrap();
    let input = GraphInput::from_sample(&sample, with.feature_scheme);
    let a = forward(&input, &params, PredictionContext::eval()).unwrap();
    let b = forward(&input, &same, PredictionContext::eval()).unwrap();
    let c = forward(&input, &params, PredictionContext::eval()).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(a.to_bits(), c.to_bits());
    let t1 = forward(&input, &params, PredictionContext::train(1)).unwrap();
    let t1b = forward(&input, &params, PredictionContext::train(1)).unwrap();
    assert_eq!(t1.to_bits(), t1b.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prediction_is_invariant_to_vertex_relabelling(seed in any::<u64>(), n in 4usize..9, layers in 1usize..4) {
        let sample = common::toy_sample(seed, n, layers, 2, 85.0);
        let config = common::toy_config(n, layers);
        let params = ModelParameters::init(&config, seed ^ 1);
        let input = GraphInput::from_sample(&sample, config.feature_scheme);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut common::rng(seed ^ 2));
        let replicas = n * layers;
        let map = |r: usize| (r / n) * n + perm[r % n];
        let d = input.features.cols();
        let mut features = vec![0.0; replicas * d];
        for r in 0..replicas {
            for c in 0..d {
                features[map(r) * d + c] = input.features.get(r, c);
            }
        }
        let mut order: Vec<usize> = (0..input.edges.len()).collect();
        order.shuffle(&mut common::rng(seed ^ 3));
        let src = order.iter().map(|&i| map(input.edges.src[i])).collect();
        let dst = order.iter().map(|&i| map(input.edges.dst[i])).collect();
        let permuted = GraphInput {
            features: Tensor::matrix(replicas, d, features).unwrap(),
            edges: EdgeIndex::new(src, dst, replicas).unwrap(),
            label: input.label,
        };
        let a = forward(&input, &params, PredictionContext::eval()).unwrap();
        let b = forward(&permuted, &params, PredictionContext::eval()).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn flat_round_trip_is_bitwise(seed in any::<u64>(), hidden in 1usize..6, heads in 1usize..4, layers in 1usize..4) {
        let config = ModelConfig { hidden, heads, gat_layers: layers, regions: 5, bands: 2, ..ModelConfig::default() };
        let mut rng = common::rng(seed);
        let flat: Vec<f64> = (0..config.parameter_count()).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let params = ModelParameters::unflatten(&config, &flat).unwrap();
        let back = params.flatten();
        prop_assert!(flat.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.len(), config.parameter_count());
        prop_assert!(ModelParameters::unflatten(&config, &flat[1..]).is_err());
    }

    #[test]
    fn attention_sums_to_one(seed in any::<u64>()) {
        let sample = common::toy_sample(seed, 7, 2, 2, 80.0);
        let config = common::toy_config(7, 2);
        let params = ModelParameters::init(&config, seed);
        let input = GraphInput::from_sample(&sample, config.feature_scheme);
        let scores = attention_scores(&params, 0, 0, &input.features, &input.edges).unwrap();
        let alpha = attention_normalize(&scores, &input.edges).unwrap();
        let mut sums = vec![0.0; input.edges.num_nodes];
        for (&d, a) in input.edges.dst.iter().zip(&alpha) {
            sums[d] += a;
        }
        prop_assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }
}
