//! Physics-based synthetic DAS recordings with exact ground truth.
//!
//! A scene is a set of sensors with known calibration, vehicles with
//! piecewise-linear trajectories, and road features that excite wheel
//! impulses. [`synthesize`] renders it into a [`ChannelMatrix`](crate::ChannelMatrix).

mod drive;
mod kernel;
mod layout;
mod scene;
mod traffic;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use drive::{driving_test, jittered_trajectory, lane_lateral_m, DriveSpec, DrivingTest};
pub use kernel::{gauge_average, gauge_averaged_kernel, gauge_peak, quasistatic_kernel, FiberGeometry, PointField};
pub use layout::{generate_layout, Layout, LayoutSpec, SpoolSpec};
pub use scene::{
    synthesize, Arrival, GroundTruth, SceneConfig, SpoolSegment, TapInjection, Trajectory, VehicleSpec, WheelModel,
};
pub use traffic::{crosstalk_traffic, fleet_vehicle, random_traffic, Traffic, TrafficSpec};

/// Lateral position of the fiber relative to the road centerline (right edge).
pub const FIBER_LATERAL_M: f64 = -5.0;

/// A draw from the tracking state-space model itself: states `[t, t_dot]`
/// and noisy arrival-time measurements at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianChain {
    /// Spacing between node `k` and `k + 1`.
    pub dxs: Vec<f64>,
    pub states: Vec<[f64; 2]>,
    pub measurements: Vec<f64>,
}

/// Sample a chain of `nodes` states. The first state is drawn from
/// `N(mean0, diag(std0^2))`; later states follow the constant-slowness model
/// with acceleration noise `sigma_tddot`, and each is observed with noise `sigma_z`.
pub fn gaussian_chain(
    rng: &mut impl Rng,
    nodes: usize,
    dx_range: (f64, f64),
    mean0: [f64; 2],
    std0: [f64; 2],
    sigma_tddot: f64,
    sigma_z: f64,
) -> GaussianChain {
    let normal = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
    let mut s = [mean0[0] + std0[0] * normal(rng), mean0[1] + std0[1] * normal(rng)];
    let mut states = Vec::with_capacity(nodes);
    let mut dxs = Vec::with_capacity(nodes.saturating_sub(1));
    for k in 0..nodes {
        if k > 0 {
            let dx = dx_range.0 + (dx_range.1 - dx_range.0) * rng.random::<f64>();
            let w = sigma_tddot * normal(rng);
            s = [s[0] + dx * s[1] + 0.5 * dx * dx * w, s[1] + dx * w];
            dxs.push(dx);
        }
        states.push(s);
    }
    let measurements = states.iter().map(|s| s[0] + sigma_z * normal(rng)).collect();
    GaussianChain { dxs, states, measurements }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{CalibrationTable, ChannelCalibration, Direction};

    fn strip(t: &[f64]) -> CalibrationTable {
        CalibrationTable::new(
            t.iter().enumerate().map(|(k, &tk)| ChannelCalibration::coupled(k, 100.0 + k as f64, tk).unwrap()).collect(),
        )
        .unwrap()
    }

    fn single(weight: f64, speed: f64) -> SceneConfig {
        let mut scene = SceneConfig::quiet(strip(&[1000.0, -2000.0, 1500.0, 800.0]), 1.0, 30.0);
        scene.vehicles.push((
            VehicleSpec::new(weight, 2.8, "car").unwrap(),
            Trajectory::constant_speed(2.0, 0.0, 250.0, speed, 3.0).unwrap(),
        ));
        scene
    }

    fn argmax(v: &[f64]) -> usize {
        (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
    }

    #[test]
    fn bell_peaks_and_flipped_dips_at_arrival() {
        let (das, truth) = synthesize(&single(1.5, 10.0), 1).unwrap();
        for k in 0..4 {
            let t = truth.arrival(0, k).unwrap();
            let row = das.channel(k);
            let idx = if k == 1 {
                let neg: Vec<f64> = row.iter().map(|v| -v).collect();
                argmax(&neg)
            } else {
                argmax(row)
            };
            assert!((das.time_of(idx as f64) - t).abs() <= 1.0 / 250.0, "channel {k}");
        }
    }

    #[test]
    fn peak_equals_weight_times_transmissibility() {
        let (das, truth) = synthesize(&single(1.47, 10.0), 1).unwrap();
        let row = das.channel(0);
        let n = das.sample_of(truth.arrival(0, 0).unwrap()).round() as usize;
        assert!((row[n] / (1000.0 * 1.47) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn crossing_vehicles_superpose() {
        let mut both = single(1.5, 10.0);
        // The outbound vehicle passes 105 m at 12.5 s; send an identical inbound one through at the same time.
        both.vehicles.push((
            VehicleSpec::new(1.5, 2.8, "car").unwrap(),
            Trajectory::constant_speed(12.5 - 145.0 / 10.0, 250.0, 0.0, 10.0, 3.0).unwrap(),
        ));
        let mut a = both.clone();
        a.vehicles.truncate(1);
        let mut b = both.clone();
        b.vehicles.remove(0);
        let (d_both, _) = synthesize(&both, 3).unwrap();
        let (d_a, _) = synthesize(&a, 3).unwrap();
        let (d_b, _) = synthesize(&b, 3).unwrap();
        for i in 0..d_both.data().len() {
            assert!((d_both.data()[i] - d_a.data()[i] - d_b.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_weight_doubles_signal() {
        let (a, _) = synthesize(&single(1.2, 12.0), 5).unwrap();
        let (b, _) = synthesize(&single(2.4, 12.0), 5).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - 2.0 * x).abs() <= 1e-6 * x.abs().max(1e-9));
        }
    }

    #[test]
    fn synthesis_is_deterministic_with_noise() {
        let mut scene = single(1.5, 10.0);
        scene.noise_sigma = 30.0;
        scene.drift_amplitude = 10.0;
        let (a, _) = synthesize(&scene, 42).unwrap();
        let (b, _) = synthesize(&scene, 42).unwrap();
        assert_eq!(a, b);
        let (c, _) = synthesize(&scene, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn spooled_channels_carry_noise_only() {
        let mut scene = single(1.5, 10.0);
        scene.spool_segments.push(SpoolSegment { fiber_index_start: 1, slack_length_m: 2.0 });
        let (das, truth) = synthesize(&scene, 1).unwrap();
        assert!(das.channel(1).iter().all(|&v| v == 0.0));
        assert!(das.channel(2).iter().all(|&v| v == 0.0));
        assert!(truth.arrival(0, 1).is_none());
        assert!(das.channel(3).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn overlapping_spools_are_rejected() {
        let mut scene = single(1.5, 10.0);
        scene.spool_segments.push(SpoolSegment { fiber_index_start: 0, slack_length_m: 3.0 });
        scene.spool_segments.push(SpoolSegment { fiber_index_start: 2, slack_length_m: 1.0 });
        assert!(matches!(synthesize(&scene, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn features_outside_road_are_rejected() {
        let mut scene = single(1.5, 10.0);
        scene.road_features.push(500.0);
        assert!(scene.validate().is_err());
    }

    #[test]
    fn ground_truth_matches_inverse_trajectory() {
        let (_, truth) = synthesize(&single(1.5, 13.0), 1).unwrap();
        for a in &truth.arrivals {
            let expected = 2.0 + (100.0 + a.channel as f64) / 13.0;
            assert!((a.time_s - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn wheel_packets_are_separated_by_wheelbase_over_speed() {
        let mut scene = single(1.5, 10.0);
        scene.road_features.push(102.0);
        // Short packets leave a silent gap between the two axles.
        scene.wheel.decay_s = 0.02;
        let (das, truth) = synthesize(&scene, 1).unwrap();
        let mut quiet = scene.clone();
        quiet.road_features.clear();
        let (base, _) = synthesize(&quiet, 1).unwrap();
        let wheel: Vec<f64> = das.channel(2).iter().zip(base.channel(2)).map(|(a, b)| a - b).collect();
        let onsets: Vec<usize> = (1..wheel.len()).filter(|&i| wheel[i - 1] == 0.0 && wheel[i] != 0.0).collect();
        assert_eq!(onsets.len(), 2);
        let gap = (onsets[1] - onsets[0]) as f64 / 250.0;
        assert!((gap - 0.28).abs() <= 1.0 / 250.0, "gap {gap}");
        assert!(truth.arrival(0, 2).is_some());
    }

    #[test]
    fn trajectory_rejects_wrong_direction() {
        assert!(Trajectory::new(vec![(0.0, 10.0), (1.0, 5.0)], Direction::Outbound, 3.0).is_err());
        assert!(Trajectory::new(vec![(0.0, 10.0), (1.0, 5.0)], Direction::Inbound, 3.0).is_ok());
    }

    #[test]
    fn trajectory_inverse_round_trip() {
        let tr = Trajectory::new(vec![(0.0, 0.0), (5.0, 40.0), (9.0, 100.0)], Direction::Outbound, 3.0).unwrap();
        for x in [0.0, 12.0, 40.0, 77.0, 100.0] {
            let t = tr.time_at(x).unwrap();
            assert!((tr.position(t).unwrap() - x).abs() < 1e-9);
        }
        assert_eq!(tr.speed(7.0), Some(15.0));
    }
}
