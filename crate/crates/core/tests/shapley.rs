mod common;

use std::time::Instant;

use fedgnn::explain::{
    exact_shapley, explain_sample, mc_shapley, EdgeValueFunction, Estimator, FnValue, GnnValueFunction, Memoized,
};
use fedgnn::graph::PatientSample;
use fedgnn::model::{ModelConfig, ModelParameters};
use itertools::Itertools;
use proptest::prelude::*;

const N: usize = 5;
const L: usize = 2;

/// First toy sample with exactly `edges` explained edges.
fn instance(edges: usize) -> (PatientSample, ModelConfig) {
    let config = common::toy_config(N, L);
    for seed in 0..500 {
        let s = common::toy_sample(seed, N, L, 1, 90.0);
        let params = ModelParameters::init(&config, 0);
        if GnnValueFunction::new(&params, &s, config.feature_scheme).num_edges() == edges {
            return (s, config);
        }
    }
    panic!("no toy sample with {edges} explained edges");
}

fn table(vf: &(impl EdgeValueFunction + ?Sized)) -> Vec<f64> {
    let n = vf.num_edges();
    (0..1usize << n)
        .map(|mask| vf.value(&(0..n).map(|i| mask >> i & 1 == 1).collect::<Vec<_>>()).unwrap())
        .collect()
}

/// Average marginal contribution over all n! orderings.
fn permutation_shapley(values: &[f64], n: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n];
    let mut count = 0.0;
    for order in (0..n).permutations(n) {
        let mut mask = 0usize;
        for &i in &order {
            phi[i] += values[mask | 1 << i] - values[mask];
            mask |= 1 << i;
        }
        count += 1.0;
    }
    phi.iter().map(|p| p / count).collect()
}

/// Wraps a value function with `extra` edges it never looks at.
struct WithNullEdges<'a, V: EdgeValueFunction + ?Sized> {
    inner: &'a V,
    extra: usize,
}

impl<V: EdgeValueFunction + ?Sized> EdgeValueFunction for WithNullEdges<'_, V> {
    fn num_edges(&self) -> usize {
        self.inner.num_edges() + self.extra
    }

    fn value(&self, present: &[bool]) -> fedgnn::explain::Result<f64> {
        self.inner.value(&present[..self.inner.num_edges()])
    }
}

#[test]
fn gnn_exact_values_satisfy_the_axioms() {
    let (sample, config) = instance(6);
    for seed in 0..3 {
        let params = ModelParameters::init(&config, seed);
        let vf = GnnValueFunction::new(&params, &sample, config.feature_scheme);
        let n = vf.num_edges();
        let values = table(&vf);
        let phi = exact_shapley(&vf).unwrap();

        let residual = (phi.iter().sum::<f64>() - (values[(1 << n) - 1] - values[0])).abs();
        assert!(residual < 1e-9, "efficiency residual {residual}");

        let oracle = permutation_shapley(&values, n);
        for (a, b) in phi.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs permutation oracle {b}");
        }

        let padded = WithNullEdges { inner: &vf, extra: 2 };
        let phi = exact_shapley(&padded).unwrap();
        assert_eq!(&phi[n..], &[0.0, 0.0]);
        for (a, b) in phi[..n].iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn explain_report_uses_the_exact_estimator_on_small_graphs() {
    let (sample, config) = instance(8);
    let params = ModelParameters::init(&config, 4);
    let regions: Vec<String> = (0..N).map(|i| format!("r{i:02}")).collect();
    let report = explain_sample(&params, &sample, &regions, config.feature_scheme, 100, 0).unwrap();
    assert_eq!(report.estimator, Estimator::Exact);
    assert_eq!(report.samples, None);
    assert_eq!(report.edges.len(), 8);
    assert!(report.efficiency_residual < 1e-9);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn mc_estimates_converge_to_exact_values() {
    let start = Instant::now();
    let (sample, config) = instance(8);
    let params = ModelParameters::init(&config, 2);
    let vf = GnnValueFunction::new(&params, &sample, config.feature_scheme);
    let memo = Memoized::new(&vf);
    let exact = exact_shapley(&memo).unwrap();
    let range = exact.iter().cloned().fold(f64::MIN, f64::max) - exact.iter().cloned().fold(f64::MAX, f64::min);
    assert!(range > 0.0);

    let estimate = mc_shapley(&memo, 10_000, 0).unwrap();
    for (i, (e, x)) in estimate.iter().zip(&exact).enumerate() {
        assert!((e - x).abs() < 0.05 * range, "edge {i}: {e} vs exact {x} (range {range})");
    }

    let runs: Vec<Vec<f64>> = (0..50).map(|seed| mc_shapley(&memo, 100, 1000 + seed).unwrap()).collect();
    for i in 0..exact.len() {
        let xs: Vec<f64> = runs.iter().map(|r| r[i]).collect();
        let mean = xs.iter().sum::<f64>() / 50.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 49.0;
        let se = (var / 50.0).sqrt();
        assert!((mean - exact[i]).abs() <= 2.0 * se, "edge {i}: mean {mean} exact {} se {se}", exact[i]);
    }
    assert!(memo.evaluations() <= 1 << 8);
    assert!(start.elapsed().as_secs() < 120);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn constant_functions_get_nothing(n in 1usize..9, c in -50.0f64..50.0) {
        let vf = FnValue::new(n, move |_: &[bool]| c);
        prop_assert!(exact_shapley(&vf).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn additive_functions_recover_their_weights(w in prop::collection::vec(-10.0f64..10.0, 1..11), c in -5.0f64..5.0) {
        let weights = w.clone();
        let vf = FnValue::new(w.len(), move |s: &[bool]| {
            c + s.iter().zip(&weights).filter(|(p, _)| **p).map(|(_, w)| w).sum::<f64>()
        });
        let phi = exact_shapley(&vf).unwrap();
        for (p, w) in phi.iter().zip(&w) {
            prop_assert!((p - w).abs() < 1e-10, "{} vs {}", p, w);
        }
    }

    #[test]
    fn exact_values_match_the_permutation_oracle(values in prop::collection::vec(-1.0f64..1.0, 32), null in 0usize..5) {
        // edge `null` is made a null player by copying values across its bit
        let mut values = values;
        for mask in 0..32usize {
            if mask >> null & 1 == 1 {
                values[mask] = values[mask & !(1 << null)];
            }
        }
        let v = values.clone();
        let vf = FnValue::new(5, move |s: &[bool]| {
            v[s.iter().enumerate().filter(|(_, p)| **p).map(|(i, _)| 1usize << i).sum::<usize>()]
        });
        let phi = exact_shapley(&vf).unwrap();
        prop_assert_eq!(phi[null], 0.0);
        let oracle = permutation_shapley(&values, 5);
        for (a, b) in phi.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((phi.iter().sum::<f64>() - (values[31] - values[0])).abs() < 1e-12);
    }
}
