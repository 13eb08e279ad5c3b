mod common;

use common::*;
use rand::Rng;
use roadfiber::detect::{prominence_scan, Reach};
use roadfiber::sim::gaussian_chain;
use roadfiber::track::{innovation_std, predict, update, MotionModel, StateEstimate};
use roadfiber::Polarity;

#[test]
fn smoother_matches_batch_posterior() {
    let mut rng = rng(11);
    for _ in 0..20 {
        let nodes = rng.random_range(5..=30);
        let (sigma_tddot, sigma_z) = (rng.random_range(0.001..0.01), rng.random_range(0.01..0.1));
        let mean0 = [rng.random_range(0.0..100.0), rng.random_range(0.03..0.12)];
        let std0 = [1.0, 0.05];
        let chain = gaussian_chain(&mut rng, nodes, (0.5, 5.0), mean0, std0, sigma_tddot, sigma_z);
        let model = MotionModel::new(sigma_tddot, sigma_z).unwrap();
        let (_, smoothed) = filter_and_smooth(mean0, std0, &chain.dxs, &chain.measurements, &model);
        let oracle = batch_posterior(mean0, std0, &chain.dxs, &chain.measurements, sigma_tddot, sigma_z);
        for (s, (m, c)) in smoothed.iter().zip(oracle.means.iter().zip(&oracle.covs)) {
            assert!((s.mean[0] - m[0]).abs() < 1e-8 && (s.mean[1] - m[1]).abs() < 1e-8);
            for (i, j) in [(0, 0), (0, 1), (1, 1)] {
                assert!((s.cov[(i, j)] - c[i][j]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn last_filtered_state_is_the_batch_marginal() {
    let mut rng = rng(12);
    let chain = gaussian_chain(&mut rng, 12, (1.0, 1.0), [5.0, 0.07], [1.0, 0.05], 0.005, 0.05);
    let model = MotionModel::default();
    let (filtered, _) = filter_and_smooth([5.0, 0.07], [1.0, 0.05], &chain.dxs, &chain.measurements, &model);
    let oracle = batch_posterior([5.0, 0.07], [1.0, 0.05], &chain.dxs, &chain.measurements, 0.005, 0.05);
    let last = filtered.last().unwrap();
    assert!((last.mean[0] - oracle.means[11][0]).abs() < 1e-9);
    assert!((last.mean[1] - oracle.means[11][1]).abs() < 1e-9);
}

#[test]
fn normalized_innovations_are_consistent() {
    let mut rng = rng(13);
    let model = MotionModel::new(0.005, 0.05).unwrap();
    let mut nis = Vec::new();
    for _ in 0..10 {
        let chain = gaussian_chain(&mut rng, 40, (0.8, 1.2), [0.0, 0.07], [1.0, 0.05], 0.005, 0.05);
        let mut state = StateEstimate::new([0.0, 0.07], [[1.0, 0.0], [0.0, 0.0025]], 0);
        for (k, &z) in chain.measurements.iter().enumerate() {
            let pred = if k == 0 { state } else { predict(&state, chain.dxs[k - 1], &model).unwrap() };
            let s = innovation_std(&pred, &model);
            nis.push(((z - pred.time()) / s).powi(2));
            state = update(&pred, z, &model).unwrap();
        }
    }
    let mean = nis.iter().sum::<f64>() / nis.len() as f64;
    assert!(nis.len() >= 100);
    assert!((0.5..=2.0).contains(&mean), "mean NIS {mean}");
}

#[test]
fn prominence_matches_brute_force() {
    let mut rng = rng(21);
    for _ in 0..10 {
        let x = random_series(&mut rng, 2000);
        let found = prominence_scan(&x, 250.0, Reach::Unbounded, Polarity::Peak);
        assert!(same_extrema(&found, &brute_force_peaks(&x, x.len())));
        let found = prominence_scan(&x, 250.0, Reach::Bounded(0.5), Polarity::Peak);
        assert!(same_extrema(&found, &brute_force_peaks(&x, 125)));
    }
}

#[test]
fn valley_scan_is_peak_scan_of_negation() {
    let mut rng = rng(22);
    let x = random_series(&mut rng, 3000);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let valleys = prominence_scan(&x, 250.0, Reach::Bounded(0.5), Polarity::Valley);
    assert!(same_extrema(&valleys, &brute_force_peaks(&neg, 125)));
}
