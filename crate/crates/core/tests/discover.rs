use std::collections::BTreeSet;

use nalgebra::DMatrix;

use neucept::rng::{rng_from, std_normal};
use neucept::selection::{
    discover_matrix, neucept_discover, statistic_lasso, statistic_marginal, DiscoverConfig, LassoParams,
};
use neucept::synthetic::{generate_spec, linear_gaussian_case, synth_trace};
use neucept::trace::{ActivationTrace, LayerMatrix};

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng_from(seed);
    DMatrix::from_fn(n, p, |_, _| std_normal(&mut r))
}

#[test]
fn aggregated_runs_control_fdr_on_linear_benchmark() {
    let cfg = DiscoverConfig::new(0.2, 5);
    let trials = 12;
    let (mut fdp, mut power) = (0.0, 0.0);
    for t in 0..trials {
        let case = linear_gaussian_case(200, 30, 3.5, 0.0, 500, 500 + t).unwrap();
        let sel = discover_matrix(&case.x, &case.y, 0.2, &cfg, t).unwrap().selected;
        let truth: BTreeSet<_> = case.support.iter().copied().collect();
        let hits = sel.iter().filter(|j| truth.contains(j)).count();
        fdp += (sel.len() - hits) as f64 / sel.len().max(1) as f64;
        power += hits as f64 / 30.0;
    }
    let (fdr, power) = (fdp / trials as f64, power / trials as f64);
    assert!(fdr <= 0.25, "aggregated FDR {fdr}");
    assert!(power >= 0.5, "aggregated power {power}");
}

/// With a single relevant neuron, knockoff+ can never select anything at
/// q < 1 because its false-discovery estimate is at least 1/1. The offset-0
/// rule recovers the neuron.
#[test]
fn single_relevant_neuron() {
    let runs = 20;
    let mut found = 0;
    for seed in 0..runs {
        let x = gaussian(300, 10, 100 + seed);
        let y: Vec<f64> = x.column(0).iter().map(|v| 2.0 * v).collect();
        let mut cfg = DiscoverConfig::new(0.2, seed);
        cfg.repetitions = 10;
        let plus = discover_matrix(&x, &y, 0.2, &cfg, 0).unwrap();
        assert!(plus.selected.is_empty());
        cfg.offset = 0;
        if discover_matrix(&x, &y, 0.2, &cfg, 0).unwrap().selected.contains(&0) {
            found += 1;
        }
    }
    assert!(found as f64 >= 0.9 * runs as f64, "found {found}/{runs}");
}

#[test]
fn lasso_ranks_true_feature_first() {
    let mut first = 0;
    for seed in 0..100 {
        let x = gaussian(200, 10, 1000 + seed);
        let xk = gaussian(200, 10, 2000 + seed);
        let mut r = rng_from(3000 + seed);
        let y: Vec<f64> = x.column(0).iter().map(|v| 3.0 * v + std_normal(&mut r)).collect();
        let w = statistic_lasso(&x, &xk, &y, &LassoParams::default()).unwrap().w;
        let best = (0..10).fold(0, |b, j| if w[j] > w[b] { j } else { b });
        first += (best == 0) as usize;
    }
    assert!(first >= 95, "true feature ranked first in {first}/100");
}

#[test]
fn null_marginal_signs_are_balanced() {
    let (mut pos, mut nonzero) = (0usize, 0usize);
    for seed in 0..40 {
        let x = gaussian(200, 25, 4000 + seed);
        let xk = gaussian(200, 25, 5000 + seed);
        let y: Vec<f64> = gaussian(200, 1, 6000 + seed).iter().copied().collect();
        for w in statistic_marginal(&x, &xk, &y).unwrap().w {
            if w != 0.0 {
                nonzero += 1;
                pos += (w > 0.0) as usize;
            }
        }
    }
    // two-sided binomial test at 5% via the normal approximation
    let z = (pos as f64 - nonzero as f64 / 2.0) / (nonzero as f64 / 4.0).sqrt();
    assert!(z.abs() < 1.96, "sign imbalance z = {z}");
}

#[test]
fn selection_precision_on_critical_path_network() {
    let q = 0.2;
    let (mut precision, mut layers) = (0.0, 0);
    for seed in 0..8 {
        let spec = generate_spec(&[24, 20, 16, 2], &[8, 8, 8], 4, seed).unwrap();
        let (_, trace) = synth_trace(&spec, 1000, seed + 50).unwrap();
        let report = neucept_discover(&trace, &spec.hidden_layer_ids(), &DiscoverConfig::new(q, seed)).unwrap();
        assert!(report.failures.is_empty());
        for r in &report.results {
            if r.selected.is_empty() {
                continue;
            }
            let crit = &spec.critical_sets[spec.layer_index(&r.layer_id).unwrap()];
            let hits = r.selected.iter().filter(|j| crit.contains(j)).count();
            precision += hits as f64 / r.selected.len() as f64;
            layers += 1;
        }
    }
    let precision = precision / layers as f64;
    assert!(precision >= 1.0 - q - 0.05, "precision {precision}");
}

#[test]
fn layer_order_only_permutes_results() {
    let mut r = rng_from(8);
    let n = 200;
    let a = gaussian(n, 6, 9);
    let b = gaussian(n, 5, 10);
    let y: Vec<f64> = (0..n).map(|i| a[(i, 0)] + b[(i, 1)] + 0.5 * std_normal(&mut r)).collect();
    let trace = ActivationTrace::new(
        vec![LayerMatrix::new("a", a).unwrap(), LayerMatrix::new("b", b).unwrap()],
        y,
        None,
        None,
        vec![true; n],
    )
    .unwrap();
    let cfg = DiscoverConfig::new(0.3, 4);
    let ab = neucept_discover(&trace, &["a".into(), "b".into()], &cfg).unwrap();
    let ba = neucept_discover(&trace, &["b".into(), "a".into()], &cfg).unwrap();
    assert_eq!(ab.results[0], ba.results[1]);
    assert_eq!(ab.results[1], ba.results[0]);
}
