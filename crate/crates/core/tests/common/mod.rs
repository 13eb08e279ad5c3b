//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadfiber::detect::Extremum;
use roadfiber::track::{predict, rts_smooth, update, MotionModel, StateEstimate};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact joint posterior of a linear-Gaussian chain with a scalar
/// acceleration disturbance per step, computed by conditioning the joint
/// prior of all states on all measurements at once.
pub struct BatchPosterior {
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<[[f64; 2]; 2]>,
}

pub fn batch_posterior(
    mean0: [f64; 2],
    std0: [f64; 2],
    dxs: &[f64],
    z: &[f64],
    sigma_tddot: f64,
    sigma_z: f64,
) -> BatchPosterior {
    let n = z.len();
    assert_eq!(dxs.len() + 1, n);
    // States are a linear map of the independent sources [x0 (2), w_1..w_{n-1}].
    let sources = 2 + dxs.len();
    let mut map = DMatrix::<f64>::zeros(2 * n, sources);
    let mut offset = DVector::<f64>::zeros(2 * n);
    map[(0, 0)] = 1.0;
    map[(1, 1)] = 1.0;
    offset[0] = mean0[0];
    offset[1] = mean0[1];
    for k in 1..n {
        let dx = dxs[k - 1];
        for j in 0..sources {
            map[(2 * k, j)] = map[(2 * k - 2, j)] + dx * map[(2 * k - 1, j)];
            map[(2 * k + 1, j)] = map[(2 * k - 1, j)];
        }
        offset[2 * k] = offset[2 * k - 2] + dx * offset[2 * k - 1];
        offset[2 * k + 1] = offset[2 * k - 1];
        map[(2 * k, 1 + k)] += 0.5 * dx * dx;
        map[(2 * k + 1, 1 + k)] += dx;
    }
    let mut source_cov = DMatrix::<f64>::zeros(sources, sources);
    source_cov[(0, 0)] = std0[0] * std0[0];
    source_cov[(1, 1)] = std0[1] * std0[1];
    for j in 2..sources {
        source_cov[(j, j)] = sigma_tddot * sigma_tddot;
    }
    let prior = &map * &source_cov * map.transpose();
    let mut h = DMatrix::<f64>::zeros(n, 2 * n);
    for k in 0..n {
        h[(k, 2 * k)] = 1.0;
    }
    let s = &h * &prior * h.transpose() + DMatrix::<f64>::identity(n, n) * (sigma_z * sigma_z);
    let gain = &prior * h.transpose() * s.clone().cholesky().expect("innovation covariance is PD").inverse();
    let residual = DVector::from_column_slice(z) - &h * &offset;
    let mean = &offset + &gain * residual;
    let cov = &prior - &gain * &h * &prior;
    BatchPosterior {
        means: (0..n).map(|k| [mean[2 * k], mean[2 * k + 1]]).collect(),
        covs: (0..n)
            .map(|k| {
                [[cov[(2 * k, 2 * k)], cov[(2 * k, 2 * k + 1)]], [cov[(2 * k + 1, 2 * k)], cov[(2 * k + 1, 2 * k + 1)]]]
            })
            .collect(),
    }
}

/// Forward filter over every node (the first is updated from the prior
/// without a prediction), then the backward pass.
pub fn filter_and_smooth(
    mean0: [f64; 2],
    std0: [f64; 2],
    dxs: &[f64],
    z: &[f64],
    model: &MotionModel,
) -> (Vec<StateEstimate>, Vec<StateEstimate>) {
    let prior = StateEstimate::new(mean0, [[std0[0] * std0[0], 0.0], [0.0, std0[1] * std0[1]]], 0);
    let mut filtered = Vec::with_capacity(z.len());
    for (k, &zk) in z.iter().enumerate() {
        let pred = if k == 0 { prior } else { predict(&filtered[k - 1], dxs[k - 1], model).unwrap() };
        filtered.push(update(&pred, zk, model).unwrap());
    }
    let smoothed = rts_smooth(&filtered, model, dxs).unwrap().states;
    (filtered, smoothed)
}

/// Brute-force peaks and prominences: plateaus report their middle sample,
/// and each side's reference is the minimum up to the first strictly higher
/// sample, limited to `reach` samples.
pub fn brute_force_peaks(x: &[f64], reach: usize) -> Vec<(usize, f64)> {
    let n = x.len();
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let mut e = s;
        while e + 1 < n && x[e + 1] == x[s] {
            e += 1;
        }
        if s > 0 && e + 1 < n && x[s - 1] < x[s] && x[e + 1] < x[e] {
            let i = (s + e) / 2;
            let mut left = x[i];
            for j in (i.saturating_sub(reach)..i).rev() {
                if x[j] > x[i] {
                    break;
                }
                left = left.min(x[j]);
            }
            let mut right = x[i];
            for j in i + 1..=(i + reach).min(n - 1) {
                if x[j] > x[i] {
                    break;
                }
                right = right.min(x[j]);
            }
            out.push((i, x[i] - left.max(right)));
        }
        s = e + 1;
    }
    out
}

/// Random series mixing smooth bumps, noise and quantization (to create ties
/// and plateaus).
pub fn random_series(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let step = [0.0, 0.5, 1.0][rng.random_range(0..3)];
    let mut level = 0.0;
    (0..n)
        .map(|i| {
            level += rng.random_range(-1.0..1.0);
            let v = level + 5.0 * (i as f64 / 37.0).sin() + rng.random_range(-2.0..2.0);
            if step > 0.0 { (v / step).round() * step } else { v }
        })
        .collect()
}

pub fn same_extrema(found: &[Extremum], oracle: &[(usize, f64)]) -> bool {
    found.len() == oracle.len()
        && found.iter().zip(oracle).all(|(e, &(i, p))| e.index == i && e.prominence == p)
}
