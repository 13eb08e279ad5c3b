//! Simulated calibration campaign: tap tests followed by repeated passes of a
//! GPS-equipped test vehicle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layout::Layout;
use super::scene::{SceneConfig, TapInjection, Trajectory, VehicleSpec};
use super::FIBER_LATERAL_M;
use crate::calib::{GpsTrack, TapEvent};
use crate::geo::LocalFrame;
use crate::{Direction, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveSpec {
    pub runs: usize,
    pub speed_mps: f64,
    /// Relative speed variation between waypoints.
    pub speed_jitter: f64,
    pub vehicle: VehicleSpec,
    pub direction: Direction,
    pub lane_offset_m: f64,
    pub gps_sigma_m: f64,
    pub gps_rate_hz: f64,
    /// Reference (GPS) clock minus DAS clock.
    pub clock_offset_s: f64,
    pub taps: usize,
    pub tap_amplitude: f64,
    pub gap_s: f64,
    /// Distance driven before and after the instrumented stretch.
    pub approach_m: f64,
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub sample_rate_hz: f64,
    /// Regular-traffic vehicles in the other lane during the runs.
    pub bystanders: usize,
    pub bystander_lane_offset_m: f64,
}

impl Default for DriveSpec {
    fn default() -> Self {
        Self {
            runs: 3,
            speed_mps: 10.0,
            speed_jitter: 0.1,
            vehicle: VehicleSpec { weight_tons: 1.47, wheelbase_m: 2.7, axle_count: 2, label: "test sedan".into() },
            direction: Direction::Outbound,
            lane_offset_m: 3.0,
            gps_sigma_m: 0.5,
            gps_rate_hz: 1.0,
            clock_offset_s: 3.21,
            taps: 3,
            tap_amplitude: 5000.0,
            gap_s: 6.0,
            approach_m: 60.0,
            noise_sigma: 40.0,
            drift_amplitude: 20.0,
            sample_rate_hz: 250.0,
            bystanders: 0,
            bystander_lane_offset_m: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrivingTest {
    pub scene: SceneConfig,
    pub gps_runs: Vec<GpsTrack>,
    pub taps: Vec<TapEvent>,
    /// DAS-clock interval of each run.
    pub run_windows: Vec<(f64, f64)>,
    /// Index into `scene.vehicles` of each run.
    pub run_vehicles: Vec<usize>,
}

/// Lateral position (left of the centerline) of a lane at `lane_offset_m` from the fiber.
pub fn lane_lateral_m(lane_offset_m: f64) -> f64 {
    FIBER_LATERAL_M + lane_offset_m
}

pub fn driving_test(layout: &Layout, spec: &DriveSpec, seed: u64) -> Result<DrivingTest> {
    if spec.runs == 0 {
        return Err(Error::Config("driving test needs at least one run".into()));
    }
    if !(spec.speed_mps > 0.0 && spec.gps_rate_hz > 0.0 && spec.gps_sigma_m >= 0.0) {
        return Err(Error::Config("speed and GPS rate must be positive, GPS sigma non-negative".into()));
    }
    spec.vehicle.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d21e);
    let (lo, hi) = layout.road_span;
    let (from, to) = match spec.direction {
        Direction::Outbound => (lo - spec.approach_m, hi + spec.approach_m),
        Direction::Inbound => (hi + spec.approach_m, lo - spec.approach_m),
    };
    let from = from.max(0.0);
    let to = to.max(0.0);

    let tap_times: Vec<f64> = (0..spec.taps).map(|i| 1.0 + 1.5 * i as f64 + rng.random::<f64>() * 0.5).collect();
    let mut t = 2.0 + 1.5 * spec.taps as f64;
    let mut vehicles = Vec::new();
    let mut run_windows = Vec::new();
    let mut run_vehicles = Vec::new();
    for _ in 0..spec.runs {
        let traj = jittered_trajectory(&mut rng, t, from, to, spec.speed_mps, spec.speed_jitter, spec.lane_offset_m)?;
        let (enter, exit) = traj.time_span();
        run_windows.push((enter, exit));
        run_vehicles.push(vehicles.len());
        vehicles.push((spec.vehicle.clone(), traj));
        t = exit + spec.gap_s;
    }
    let duration = t;

    for i in 0..spec.bystanders {
        let (enter, exit) = run_windows[i % run_windows.len()];
        let speed = spec.speed_mps * rng.random_range(0.8..1.5);
        let start = enter + rng.random::<f64>() * (exit - enter) * 0.6;
        let bystander = VehicleSpec {
            weight_tons: rng.random_range(1.5..8.0),
            wheelbase_m: rng.random_range(2.6..5.0),
            axle_count: 2,
            label: "bystander".into(),
        };
        let traj = Trajectory::constant_speed(start, to, from, speed, spec.bystander_lane_offset_m)?;
        vehicles.push((bystander, traj));
    }

    let frame = LocalFrame::new(layout.centerline.points()[0]);
    let gps_noise = Normal::new(0.0, spec.gps_sigma_m).map_err(|e| Error::Config(e.to_string()))?;
    let lateral = lane_lateral_m(spec.lane_offset_m);
    let mut gps_runs = Vec::new();
    for &(enter, exit) in &run_windows {
        let traj = &vehicles[gps_runs.len()].1;
        let step = 1.0 / spec.gps_rate_hz;
        let mut ref_time = enter + spec.clock_offset_s + rng.random::<f64>() * step;
        let mut samples = Vec::new();
        while ref_time - spec.clock_offset_s <= exit {
            let x = traj.position(ref_time - spec.clock_offset_s).expect("within run window");
            let p = layout.centerline.locate(x, lateral);
            let (e, n) = frame.to_local(p);
            let noisy = frame.to_geo(e + gps_noise.sample(&mut rng), n + gps_noise.sample(&mut rng));
            samples.push((ref_time, noisy.lat, noisy.lon));
            ref_time += step;
        }
        gps_runs.push(GpsTrack::new(samples)?.projected_onto(&layout.centerline));
    }

    let taps: Vec<TapEvent> = tap_times
        .iter()
        .map(|&d| TapEvent { das_time_s: d, reference_time_s: d + spec.clock_offset_s })
        .collect();

    let mut scene = SceneConfig::quiet(layout.sensors.clone(), layout.channel_spacing_m, duration);
    scene.channel_count = layout.channel_count;
    scene.reference_lane_offset_m = spec.lane_offset_m;
    scene.vehicles = vehicles;
    scene.noise_sigma = spec.noise_sigma;
    scene.drift_amplitude = spec.drift_amplitude;
    scene.sample_rate_hz = spec.sample_rate_hz;
    scene.spool_segments = layout.spool_segments.clone();
    scene.taps = tap_times.iter().map(|&d| TapInjection { das_time_s: d, amplitude: spec.tap_amplitude }).collect();
    scene.tap_channels = layout.lead_in.clone();
    Ok(DrivingTest { scene, gps_runs, taps, run_windows, run_vehicles })
}

/// Trajectory from `from` to `to` whose speed drifts by up to `jitter` between
/// knots 50 m apart, changing linearly with position in between.
pub fn jittered_trajectory(
    rng: &mut impl Rng,
    enter_time_s: f64,
    from: f64,
    to: f64,
    speed_mps: f64,
    jitter: f64,
    lane_offset_m: f64,
) -> Result<Trajectory> {
    const STEPS_PER_LEG: usize = 10;
    let direction = Direction::from_sign(to - from);
    let length = (to - from).abs();
    let legs = ((length / 50.0).ceil() as usize).max(1);
    let knots: Vec<f64> =
        (0..=legs).map(|_| speed_mps * (1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0))).collect();
    let n = legs * STEPS_PER_LEG;
    let step = length / n as f64;
    let mut waypoints = vec![(enter_time_s, from)];
    let mut t = enter_time_s;
    for i in 1..=n {
        let leg = (i - 1) / STEPS_PER_LEG;
        let frac = ((i - 1) % STEPS_PER_LEG) as f64 + 0.5;
        let v = knots[leg] + (knots[leg + 1] - knots[leg]) * frac / STEPS_PER_LEG as f64;
        t += step / v;
        waypoints.push((t, from + (to - from) * i as f64 / n as f64));
    }
    Trajectory::new(waypoints, direction, lane_offset_m)
}
