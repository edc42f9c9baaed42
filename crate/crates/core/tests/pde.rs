use std::sync::Arc;

use hidden_drift::market::{AffineVol, DiscretePrior, LocalVol, MarketSpec, PriorSpec, TimeGrid};
use hidden_drift::pde::*;
use hidden_drift::timefn::VecFn;
use nalgebra::{dvector, DMatrix};

fn heat(sigma: f64) -> MarkovEmbedding<f64> {
    MarkovEmbedding::custom(
        dvector![0.0],
        1,
        1.0,
        Arc::new(AffineVol::scalar(sigma)),
        Arc::new(|_: &[f64], _, out: &mut [f64]| out[0] = 0.0),
        Arc::new(|_: &[f64], _, _: &LocalVol<f64>, out: &mut DMatrix<f64>| out[(0, 0)] = 1.0),
        Arc::new(|y: &[f64]| y[0]),
    )
}

#[test]
fn heat_equation_matches_gaussian_convolution() {
    let sigma = 0.5;
    let mut errors = Vec::new();
    for (nodes, steps) in [(201, 50), (401, 100)] {
        let cfg = FdConfig {
            nodes: vec![nodes],
            time_steps: steps,
            bounds: Some(vec![(-6.0, 6.0)]),
            ..FdConfig::default()
        };
        let v = solve_cauchy_fd(&heat(sigma), &|y: &[f64]| (-y[0] * y[0]).exp(), &cfg).unwrap();
        let s = 1.0 + 2.0 * sigma * sigma;
        let worst = (0..=40)
            .map(|i| {
                let y = -2.0 + 0.1 * i as f64;
                let exact = (-y * y / s).exp() / s.sqrt();
                (v.value(&[y], 0.0).unwrap() - exact).abs()
            })
            .fold(0.0, f64::max);
        errors.push(worst);
    }
    assert!(errors[1] < 1e-4, "{errors:?}");
    assert!(errors[1] < errors[0] / 3.0, "{errors:?}");
}

/// Two atoms `0` and `0.2` with `σ = 0.2`: the squared mixture likelihood has
/// `E_*[(½y₁ + ½y₂)²] = ¼y₁² + ½y₁y₂ + ¼y₂² e^{T-t}`.
fn two_atoms() -> (MarketSpec<f64>, MarkovEmbedding<f64>, f64) {
    let prior = PriorSpec::Discrete(DiscretePrior {
        atoms: vec![VecFn::constant(dvector![0.0]), VecFn::constant(dvector![0.2])],
        probs: vec![0.5, 0.5],
    });
    let spec = MarketSpec::single_stock(0.2, 1.0, prior);
    let grid = TimeGrid::new(1.0, 1.0 / 64.0).unwrap();
    let emb = MarkovEmbedding::build(&spec, EmbeddingKind::FinitePaths, &grid).unwrap();
    (spec, emb, (3.0 + 1f64.exp()) / 4.0)
}

fn exact_value(y: &[f64], t: f64, g: f64) -> f64 {
    (0.25 * y[0] * y[0] + 0.5 * y[0] * y[1] + 0.25 * y[1] * y[1] * (1.0 - t).exp()) / g
}

#[test]
fn finite_paths_quadratic_claim_is_reproduced() {
    let (_, emb, g) = two_atoms();
    let claim = move |y: &[f64]| {
        let z = 0.5 * y[0] + 0.5 * y[1];
        z * z / g
    };
    let cfg = FdConfig { nodes: vec![201, 201], time_steps: 64, ..FdConfig::default() };
    let v = solve_cauchy_fd(&emb, &claim, &cfg).unwrap();
    assert_eq!(v.log_scale, vec![true, true]);
    for (y, t) in [([1.0, 1.0], 0.0), ([1.0, 0.5], 0.0), ([1.0, 2.0], 0.5)] {
        let exact = exact_value(&y, t, g);
        let fd = v.value(&y, t).unwrap();
        assert!((fd / exact - 1.0).abs() < 2e-3, "{y:?} {fd} {exact}");
    }
    let grad = v.gradient(&[1.0, 1.0], 0.0).unwrap();
    let exact = [(0.5 + 0.5) / g, (0.5 + 0.5 * 1f64.exp()) / g];
    for d in 0..2 {
        assert!((grad[d] / exact[d] - 1.0).abs() < 5e-3, "{d} {} {}", grad[d], exact[d]);
    }
}

#[test]
fn feynman_kac_agrees_with_exact_value_and_slope() {
    let (_, emb, g) = two_atoms();
    let claim = move |y: &[f64]| {
        let z = 0.5 * y[0] + 0.5 * y[1];
        z * z / g
    };
    let opts = FkOptions { n_inner: 20_000, seed: 3, steps: 32 };
    let value = feynman_kac_value(&emb, &claim, &[1.0, 1.0], 0.0, opts).unwrap();
    assert!((value.mean - 1.0).abs() < 4.0 * value.se, "{value:?}");
    let grad = feynman_kac_gradient(&emb, &claim, &[1.0, 1.0], 0.0, opts).unwrap();
    let exact = (0.5 + 0.5 * 1f64.exp()) / g;
    assert!((grad[1].mean - exact).abs() < 4.0 * grad[1].se + 1e-3, "{:?}", grad[1]);
}

#[test]
fn strategy_is_loading_times_gradient() {
    let (_, emb, g) = two_atoms();
    let claim = move |y: &[f64]| {
        let z = 0.5 * y[0] + 0.5 * y[1];
        z * z / g
    };
    let cfg = FdConfig { nodes: vec![101, 101], time_steps: 32, ..FdConfig::default() };
    let vf = ValueFunction::Grid(solve_cauchy_fd(&emb, &claim, &cfg).unwrap());
    let pi = extract_strategy(&emb, &vf, &[1.0, 1.0], 0.0, 2.0).unwrap();
    let grad = vf.gradient(&[1.0, 1.0], 0.0).unwrap();
    // only the second atom loads on the returns: L = (0, y₂ θ₂ q)
    assert!((pi[0] - 2.0 * 0.2 * 25.0 * grad[1]).abs() < 1e-10);
}

#[test]
fn points_outside_the_grid_are_rejected() {
    let cfg = FdConfig {
        nodes: vec![21],
        time_steps: 4,
        bounds: Some(vec![(-1.0, 1.0)]),
        ..FdConfig::default()
    };
    let v = solve_cauchy_fd(&heat(0.3), &|y: &[f64]| y[0], &cfg).unwrap();
    assert!(v.value(&[1.5], 0.0).is_err());
    assert!(v.value(&[0.5], 1.5).is_err());
    let (_, emb, _) = two_atoms();
    let cfg = FdConfig { nodes: vec![11, 11], time_steps: 2, ..FdConfig::default() };
    let v = solve_cauchy_fd(&emb, &|y: &[f64]| y[0], &cfg).unwrap();
    assert!(v.value(&[-1.0, 1.0], 0.0).is_err());
}

#[test]
fn too_many_dimensions_are_refused() {
    let prior = PriorSpec::Discrete(DiscretePrior {
        atoms: (0..4).map(|i| VecFn::constant(dvector![0.05 * i as f64])).collect(),
        probs: vec![0.25; 4],
    });
    let spec = MarketSpec::single_stock(0.2, 1.0, prior);
    let grid = TimeGrid::new(1.0, 0.25).unwrap();
    let emb = MarkovEmbedding::build(&spec, EmbeddingKind::FinitePaths, &grid).unwrap();
    let cfg = FdConfig { nodes: vec![5; 4], time_steps: 2, ..FdConfig::default() };
    assert!(solve_cauchy_fd(&emb, &|_: &[f64]| 1.0, &cfg).is_err());
}
