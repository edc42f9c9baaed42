use std::sync::Arc;

use hidden_drift::harness::McEstimate;
use hidden_drift::market::*;
use hidden_drift::timefn::{MatFn, VecFn};
use nalgebra::{dmatrix, dvector, DMatrix};
use proptest::prelude::*;

fn atom(theta: f64) -> PriorSpec<f64> {
    PriorSpec::Discrete(DiscretePrior {
        atoms: vec![VecFn::constant(dvector![theta])],
        probs: vec![1.0],
    })
}

fn two_atoms() -> PriorSpec<f64> {
    PriorSpec::Discrete(DiscretePrior {
        atoms: vec![VecFn::constant(dvector![0.0]), VecFn::constant(dvector![0.2])],
        probs: vec![0.5, 0.5],
    })
}

fn terminal(bundle: &PathBundle<f64>) -> Vec<f64> {
    bundle.paths.iter().map(|p| p.terminal_excess()[0]).collect()
}

#[test]
fn zero_drift_terminal_return_has_mean_zero() {
    let spec = MarketSpec::single_stock(0.2, 1.0, atom(0.0));
    let bundle = simulate_paths(&spec, 1.0 / 1024.0, 100_000, 1, Measure::P).unwrap();
    let est = McEstimate::from_samples("r", &terminal(&bundle)).unwrap();
    assert!(est.within(0.0, 3.0, 0.0), "{est:?}");
}

#[test]
fn driftless_return_has_variance_sigma_squared() {
    let spec = MarketSpec::single_stock(0.2, 1.0, two_atoms());
    let bundle = simulate_paths(&spec, 1.0 / 64.0, 40_000, 2, Measure::PStar).unwrap();
    let r = terminal(&bundle);
    let mean = McEstimate::from_samples("r", &r).unwrap();
    assert!(mean.within(0.0, 3.0, 0.0), "{mean:?}");
    let sq: Vec<f64> = r.iter().map(|x| x * x).collect();
    let var = McEstimate::from_samples("r2", &sq).unwrap();
    assert!(var.within(0.04, 3.0, 0.0), "{var:?}");
    assert!(bundle.paths.iter().all(|p| p.drift.is_none()));
}

#[test]
fn same_seed_same_bundle() {
    let spec = MarketSpec::single_stock(0.2, 1.0, two_atoms());
    let a = simulate_paths(&spec, 0.125, 50, 9, Measure::P).unwrap();
    let b = simulate_paths(&spec, 0.125, 50, 9, Measure::P).unwrap();
    let c = simulate_paths(&spec, 0.125, 50, 10, Measure::P).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.paths[0].excess, c.paths[0].excess);
}

#[test]
fn non_divisible_step_is_rejected() {
    let spec = MarketSpec::single_stock(0.2, 1.0, two_atoms());
    assert!(simulate_paths(&spec, 0.3, 10, 1, Measure::P).is_err());
}

// The relative spread of the realised variance is √(2/K); K = 2¹³ keeps 95% of
// paths inside 5%.
const QV_STEPS: usize = 8192;

fn qv_hits(spec: &MarketSpec<f64>, exact: f64) -> f64 {
    let bundle = simulate_paths(spec, 1.0 / QV_STEPS as f64, 200, 3, Measure::PStar).unwrap();
    let qv = quadratic_variation(&bundle).unwrap();
    let hits = qv
        .iter()
        .filter(|p| (p.last().unwrap()[(0, 0)] / exact - 1.0).abs() < 0.05)
        .count();
    hits as f64 / qv.len() as f64
}

#[test]
fn quadratic_variation_recovers_integrated_variance() {
    let spec = MarketSpec::single_stock(0.2, 1.0, two_atoms());
    assert!(qv_hits(&spec, 0.04) >= 0.95);

    // σ(t) = 0.1 + 0.1t; the exact left-point grid sum of σ² is the oracle.
    let vol = AffineVol(MatFn::affine(dmatrix![0.1], dmatrix![0.1]));
    let spec = MarketSpec::new(1, 1.0, Arc::new(vol), two_atoms());
    let k = QV_STEPS;
    let exact: f64 = (0..k)
        .map(|j| {
            let t = j as f64 / k as f64;
            (0.1 + 0.1 * t).powi(2) / k as f64
        })
        .sum();
    assert!(qv_hits(&spec, exact) >= 0.95);
}

#[test]
fn single_step_variation_is_one_outer_product() {
    let spec = MarketSpec::new(
        2,
        1.0,
        Arc::new(AffineVol::constant(dmatrix![0.2, 0.0; 0.05, 0.3])),
        PriorSpec::Discrete(DiscretePrior {
            atoms: vec![VecFn::constant(dvector![0.0, 0.1])],
            probs: vec![1.0],
        }),
    );
    let bundle = simulate_paths(&spec, 1.0, 3, 4, Measure::P).unwrap();
    let qv = quadratic_variation(&bundle).unwrap();
    for (p, q) in bundle.paths.iter().zip(&qv) {
        let d = nalgebra::DVector::from_vec(p.increment(0));
        assert!((&q[1] - &d * d.transpose()).amax() < 1e-15);
        assert_eq!(q[0], DMatrix::zeros(2, 2));
    }
}

#[test]
fn discount_factors_examples() {
    let zero = discount_factors(&[0.0; 5], 0.25);
    assert!(zero.iter().all(|b| *b == 1.0));
    let flat = discount_factors(&[0.05; 1025], 1.0 / 1024.0);
    assert!((flat[1024] - 0.05f64.exp()).abs() < 1e-12);

    let spec = MarketSpec::single_stock(0.2, 1.0, two_atoms())
        .with_rate(Arc::new(AffineRate { level: 0.0, slope: 0.1 }));
    let bundle = simulate_paths(&spec, 1.0 / 4096.0, 2, 5, Measure::P).unwrap();
    let b = rate_integral(&bundle);
    // left-point sum of 0.1 t is 0.05 (1 - dt)
    let exact = (0.05f64 * (1.0 - 1.0 / 4096.0)).exp();
    assert!((b[0][4096] - exact).abs() < 1e-12, "{}", b[0][4096]);
    assert!((b[0][4096] - 0.05f64.exp()).abs() < 2e-5);
}

#[test]
fn increments_are_uncorrelated_with_the_past_under_pstar() {
    let spec = MarketSpec::single_stock(0.2, 1.0, two_atoms())
        .with_drift_map(DriftMap::ReturnReverting { speed: 0.5 });
    let bundle = simulate_paths(&spec, 1.0 / 64.0, 20_000, 6, Measure::PStar).unwrap();
    let k = 32;
    let products: Vec<f64> = bundle
        .paths
        .iter()
        .map(|p| p.excess_at(k)[0].tanh() * p.increment(k)[0])
        .collect();
    let est = McEstimate::from_samples("corr", &products).unwrap();
    assert!(est.within(0.0, 3.0, 0.0), "{est:?}");
}

#[test]
fn coupled_paths_converge_at_order_one_half() {
    let vol = ReturnLinkedVol {
        base: MatFn::constant(dmatrix![0.3]),
        sensitivity: 0.5,
    };
    let spec = MarketSpec::new(1, 1.0, Arc::new(vol), two_atoms());
    let grid = TimeGrid::new(1.0, 1.0 / 16.0).unwrap();
    let sim = Simulator::new(&spec, grid, Measure::P).unwrap();
    let levels = [1, 2, 4, 8, 64];
    let mut err = [0.0; 4];
    let n = 2000;
    for i in 0..n {
        let paths = sim.coupled(11, i, &levels).unwrap();
        let fine = paths[4].terminal_excess()[0];
        for l in 0..4 {
            err[l] += (paths[l].terminal_excess()[0] - fine).abs() / n as f64;
        }
    }
    let ratio = (err[0] / err[3]).powf(1.0 / 3.0);
    assert!((1.2..=1.8).contains(&ratio), "{err:?} {ratio}");
}

#[test]
fn csv_and_cache_round_trip() {
    let spec = MarketSpec::single_stock(0.2, 1.0, two_atoms());
    let bundle = simulate_paths(&spec, 0.25, 3, 7, Measure::P).unwrap();
    let mut bin = Vec::new();
    write_cache(&bundle, &mut bin).unwrap();
    assert_eq!(&bin[..CACHE_MAGIC.len()], CACHE_MAGIC);
    let back: PathBundle<f64> = read_cache(bin.as_slice()).unwrap();
    assert_eq!(back, bundle);
    let mut csv = Vec::new();
    write_paths_csv(&bundle, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 5);
    let mut corrupt = bin.clone();
    corrupt[0] ^= 1;
    assert!(read_cache::<f64, _>(corrupt.as_slice()).is_err());
}

#[test]
fn prices_follow_the_exponential_map() {
    let spec = MarketSpec::single_stock(0.2, 1.0, atom(0.1)).with_initial_prices(vec![100.0]);
    let grid = TimeGrid::new(1.0, 0.25).unwrap();
    let sim = Simulator::new(&spec, grid, Measure::P).unwrap();
    let path = sim.path(1, 0).unwrap();
    let s = prices(&spec, &grid, sim.vol_field(), &path).unwrap();
    assert_eq!(s[0], 100.0);
    assert!(s.iter().all(|p| *p > 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_is_uniform_and_ends_at_the_horizon(steps in 1usize..200, horizon in 0.1f64..5.0) {
        let g = TimeGrid::<f64>::with_steps(horizon, steps).unwrap();
        prop_assert!((g.time(steps) - horizon).abs() <= 1e-12 * horizon);
        let t = g.times();
        for w in t.windows(2) {
            prop_assert!((w[1] - w[0] - g.dt()).abs() < 1e-12);
        }
    }

    #[test]
    fn bundles_are_reproducible(seed in any::<u64>(), theta in -0.3f64..0.3) {
        let spec = MarketSpec::single_stock(0.25, 1.0, atom(theta));
        let a = simulate_paths(&spec, 0.125, 4, seed, Measure::P).unwrap();
        let b = simulate_paths(&spec, 0.125, 4, seed, Measure::P).unwrap();
        prop_assert_eq!(&a, &b);
        for p in &a.paths {
            prop_assert_eq!(p.excess_at(0)[0], 0.0);
            prop_assert!(p.drift_at(0).unwrap()[0] == theta);
        }
    }
}
