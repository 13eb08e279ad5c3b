use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::{gauge_averaged_unchecked, FiberGeometry};
use crate::filter::{Band, ZeroPhaseFilter};
use crate::{CalibrationTable, ChannelMatrix, Direction, Error, Result};

/// Loads farther than this from a channel are ignored.
const KERNEL_REACH_M: f64 = 150.0;
const TAP_DECAY_S: f64 = 0.05;
const DRIFT_CUTOFF_HZ: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub weight_tons: f64,
    pub wheelbase_m: f64,
    #[serde(default = "two")]
    pub axle_count: u32,
    #[serde(default)]
    pub label: String,
}

fn two() -> u32 {
    2
}

impl VehicleSpec {
    pub fn new(weight_tons: f64, wheelbase_m: f64, label: impl Into<String>) -> Result<Self> {
        let spec = Self { weight_tons, wheelbase_m, axle_count: 2, label: label.into() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_tons > 0.0 && self.weight_tons.is_finite()) {
            return Err(Error::Config(format!("vehicle weight must be positive, got {}", self.weight_tons)));
        }
        if !(self.wheelbase_m > 0.0 && self.wheelbase_m.is_finite()) {
            return Err(Error::Config(format!("wheelbase must be positive, got {}", self.wheelbase_m)));
        }
        if self.axle_count != 2 {
            return Err(Error::Config(format!("only two-axle vehicles are modeled, got {}", self.axle_count)));
        }
        Ok(())
    }
}

/// Piecewise-linear road position over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    waypoints: Vec<(f64, f64)>,
    direction: Direction,
    lane_offset_m: f64,
}

impl Trajectory {
    /// `waypoints` are `(time_s, road_position_m)` pairs with strictly increasing
    /// times and positions moving strictly in `direction`.
    pub fn new(waypoints: Vec<(f64, f64)>, direction: Direction, lane_offset_m: f64) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::Config("trajectory needs at least two waypoints".into()));
        }
        if !(lane_offset_m > 0.0 && lane_offset_m.is_finite()) {
            return Err(Error::Config(format!("lane offset must be positive, got {lane_offset_m}")));
        }
        for w in waypoints.windows(2) {
            let (t0, x0) = w[0];
            let (t1, x1) = w[1];
            if ![t0, x0, t1, x1].iter().all(|v| v.is_finite()) {
                return Err(Error::Config("non-finite trajectory waypoint".into()));
            }
            if t1 <= t0 {
                return Err(Error::Config("trajectory times must increase".into()));
            }
            if (x1 - x0) * direction.sign() <= 0.0 {
                return Err(Error::Config(format!(
                    "{} trajectory must move strictly {} road position",
                    direction.as_str(),
                    if direction == Direction::Outbound { "up" } else { "down" }
                )));
            }
        }
        Ok(Self { waypoints, direction, lane_offset_m })
    }

    /// Constant speed from `from_m` to `to_m`, entering at `enter_time_s`.
    pub fn constant_speed(
        enter_time_s: f64,
        from_m: f64,
        to_m: f64,
        speed_mps: f64,
        lane_offset_m: f64,
    ) -> Result<Self> {
        if !(speed_mps > 0.0 && speed_mps.is_finite()) {
            return Err(Error::Config(format!("speed must be positive, got {speed_mps}")));
        }
        let direction = Direction::from_sign(to_m - from_m);
        let exit = enter_time_s + (to_m - from_m).abs() / speed_mps;
        Self::new(vec![(enter_time_s, from_m), (exit, to_m)], direction, lane_offset_m)
    }

    pub fn waypoints(&self) -> &[(f64, f64)] {
        &self.waypoints
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn lane_offset_m(&self) -> f64 {
        self.lane_offset_m
    }

    pub fn time_span(&self) -> (f64, f64) {
        (self.waypoints[0].0, self.waypoints[self.waypoints.len() - 1].0)
    }

    /// Position at time `t`, or `None` outside the trajectory's time span.
    pub fn position(&self, t: f64) -> Option<f64> {
        let (lo, hi) = self.time_span();
        if !(t >= lo && t <= hi) {
            return None;
        }
        let i = self.waypoints.partition_point(|w| w.0 <= t).clamp(1, self.waypoints.len() - 1);
        let (t0, x0) = self.waypoints[i - 1];
        let (t1, x1) = self.waypoints[i];
        Some(x0 + (x1 - x0) * (t - t0) / (t1 - t0))
    }

    /// Time at which the vehicle passes road position `x`, if it does.
    pub fn time_at(&self, x: f64) -> Option<f64> {
        let s = self.direction.sign();
        let key = |w: &(f64, f64)| w.1 * s;
        let first = key(&self.waypoints[0]);
        let last = key(&self.waypoints[self.waypoints.len() - 1]);
        if !(x * s >= first && x * s <= last) {
            return None;
        }
        let i = self.waypoints.partition_point(|w| key(w) <= x * s).clamp(1, self.waypoints.len() - 1);
        let (t0, x0) = self.waypoints[i - 1];
        let (t1, x1) = self.waypoints[i];
        Some(t0 + (t1 - t0) * (x - x0) / (x1 - x0))
    }

    /// Speed magnitude at time `t`.
    pub fn speed(&self, t: f64) -> Option<f64> {
        let (lo, hi) = self.time_span();
        if !(t >= lo && t <= hi) {
            return None;
        }
        let i = self.waypoints.partition_point(|w| w.0 <= t).clamp(1, self.waypoints.len() - 1);
        let (t0, x0) = self.waypoints[i - 1];
        let (t1, x1) = self.waypoints[i];
        Some(((x1 - x0) / (t1 - t0)).abs())
    }

    /// Speed when passing road position `x`.
    pub fn speed_at_position(&self, x: f64) -> Option<f64> {
        let t = self.time_at(x)?;
        // Use the segment the vehicle is entering at `t`, except at the very end.
        let (_, hi) = self.time_span();
        self.speed(t.min(hi))
    }
}

/// Fiber slack coiled at one place: `slack_length_m` of fiber starting at
/// channel `fiber_index_start` sees no road coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpoolSegment {
    pub fiber_index_start: usize,
    pub slack_length_m: f64,
}

impl SpoolSegment {
    pub fn channel_range(&self, channel_spacing_m: f64) -> std::ops::Range<usize> {
        let n = (self.slack_length_m / channel_spacing_m).ceil() as usize;
        self.fiber_index_start..self.fiber_index_start + n
    }
}

/// Wheel-induced surface-wave packet emitted when an axle crosses a road feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WheelModel {
    /// Packet amplitude relative to the channel's quasi-static peak.
    pub gain: f64,
    pub frequency_hz: f64,
    pub decay_s: f64,
    /// Gaussian fall-off distance between the feature and the channel.
    pub reach_m: f64,
}

impl Default for WheelModel {
    fn default() -> Self {
        Self { gain: 0.3, frequency_hz: 8.0, decay_s: 0.04, reach_m: 4.0 }
    }
}

impl WheelModel {
    pub fn wavelet(&self, tau: f64) -> f64 {
        if tau < 0.0 {
            0.0
        } else {
            (-tau / self.decay_s).exp() * (2.0 * std::f64::consts::PI * self.frequency_hz * tau).sin()
        }
    }
}

/// A knock on the fiber at a known DAS time, as in a tap test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapInjection {
    pub das_time_s: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Ground-truth calibration. Channels absent from the table are uncoupled.
    pub sensors: CalibrationTable,
    pub channel_count: usize,
    pub channel_spacing_m: f64,
    pub geometry: FiberGeometry,
    /// Lane offset at which the table's transmissibilities apply.
    pub reference_lane_offset_m: f64,
    pub vehicles: Vec<(VehicleSpec, Trajectory)>,
    pub road_features: Vec<f64>,
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub start_time: f64,
    pub spool_segments: Vec<SpoolSegment>,
    pub wheel: WheelModel,
    pub taps: Vec<TapInjection>,
    pub tap_channels: Vec<usize>,
}

impl SceneConfig {
    /// A scene with default physics and no vehicles, features, taps or noise.
    pub fn quiet(sensors: CalibrationTable, channel_spacing_m: f64, duration_s: f64) -> Self {
        let channel_count = sensors.entries().last().map_or(0, |e| e.channel() + 1);
        Self {
            sensors,
            channel_count,
            channel_spacing_m,
            geometry: FiberGeometry::default(),
            reference_lane_offset_m: 3.0,
            vehicles: Vec::new(),
            road_features: Vec::new(),
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            duration_s,
            sample_rate_hz: 250.0,
            start_time: 0.0,
            spool_segments: Vec::new(),
            wheel: WheelModel::default(),
            taps: Vec::new(),
            tap_channels: Vec::new(),
        }
    }

    pub fn sample_count(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    /// Road extent covered by coupled sensors.
    pub fn road_extent(&self) -> Option<(f64, f64)> {
        let mut it = self.sensors.coupled().filter_map(|e| e.road_position_m());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.min(p), hi.max(p))))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let positive = [
            ("channel_spacing_m", self.channel_spacing_m),
            ("duration_s", self.duration_s),
            ("sample_rate_hz", self.sample_rate_hz),
            ("reference_lane_offset_m", self.reference_lane_offset_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.drift_amplitude >= 0.0) {
            return Err(Error::Config("noise_sigma and drift_amplitude must be non-negative".into()));
        }
        if self.channel_count == 0 {
            return Err(Error::Config("scene has no channels".into()));
        }
        if let Some(last) = self.sensors.entries().last() {
            if last.channel() >= self.channel_count {
                return Err(Error::Config(format!(
                    "sensor channel {} outside channel count {}",
                    last.channel(),
                    self.channel_count
                )));
            }
        }
        let mut ranges: Vec<_> =
            self.spool_segments.iter().map(|s| s.channel_range(self.channel_spacing_m)).collect();
        if self.spool_segments.iter().any(|s| !(s.slack_length_m > 0.0)) {
            return Err(Error::Config("spool slack length must be positive".into()));
        }
        ranges.sort_by_key(|r| r.start);
        for w in ranges.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::Config(format!(
                    "spool segments overlap: channels {:?} and {:?}",
                    w[0], w[1]
                )));
            }
        }
        if let Some((lo, hi)) = self.road_extent() {
            if let Some(f) = self.road_features.iter().find(|&&f| !(f >= lo && f <= hi)) {
                return Err(Error::Config(format!("road feature at {f} m outside road extent [{lo}, {hi}] m")));
            }
        } else if !self.road_features.is_empty() {
            return Err(Error::Config("road features given but no coupled sensors".into()));
        }
        for (spec, _) in &self.vehicles {
            spec.validate()?;
        }
        if let Some(&ch) = self.tap_channels.iter().find(|&&c| c >= self.channel_count) {
            return Err(Error::Config(format!("tap channel {ch} outside channel count")));
        }
        Ok(())
    }

    fn coupled_channel(&self, k: usize) -> Option<(f64, f64)> {
        if self.spool_segments.iter().any(|s| s.channel_range(self.channel_spacing_m).contains(&k)) {
            return None;
        }
        let e = self.sensors.get(k)?;
        Some((e.road_position_m()?, e.transmissibility()?))
    }
}

/// One vehicle passing one coupled channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub vehicle: usize,
    pub channel: usize,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub vehicles: Vec<(VehicleSpec, Trajectory)>,
    /// Sorted by (vehicle, channel).
    pub arrivals: Vec<Arrival>,
    pub sensors: CalibrationTable,
}

impl GroundTruth {
    pub fn arrival(&self, vehicle: usize, channel: usize) -> Option<f64> {
        self.arrivals
            .binary_search_by(|a| (a.vehicle, a.channel).cmp(&(vehicle, channel)))
            .ok()
            .map(|i| self.arrivals[i].time_s)
    }

    pub fn arrivals_of(&self, vehicle: usize) -> &[Arrival] {
        let lo = self.arrivals.partition_point(|a| a.vehicle < vehicle);
        let hi = self.arrivals.partition_point(|a| a.vehicle <= vehicle);
        &self.arrivals[lo..hi]
    }
}

struct VehiclePath {
    positions: Vec<f64>,
    weight: f64,
    // Surface waves spread cylindrically, so they decay with lane offset far
    // more slowly than the static stress.
    wheel_ratio: f64,
    axle_times: Vec<(f64, f64)>, // (time, feature position)
    lane_offset: f64,
}

/// Render a scene into a strain matrix plus exact ground truth.
///
/// Each channel gets its own RNG stream derived from `seed`, so the result
/// does not depend on thread scheduling.
pub fn synthesize(scene: &SceneConfig, seed: u64) -> Result<(ChannelMatrix, GroundTruth)> {
    scene.validate()?;
    let n = scene.sample_count();
    if n < 2 {
        return Err(Error::Config("scene shorter than two samples".into()));
    }
    let fs = scene.sample_rate_hz;
    let times: Vec<f64> = (0..n).map(|i| scene.start_time + i as f64 / fs).collect();
    let geometry = scene.geometry;
    let reference_peak = gauge_averaged_unchecked(0.0, scene.reference_lane_offset_m, &geometry);

    let paths: Vec<VehiclePath> = scene
        .vehicles
        .iter()
        .map(|(spec, traj)| {
            let positions = times.iter().map(|&t| traj.position(t).unwrap_or(f64::NAN)).collect();
            let half = traj.direction().sign() * spec.wheelbase_m / 2.0;
            let mut axle_times = Vec::new();
            for &f in &scene.road_features {
                // Front axle leads the center by half a wheelbase.
                for center in [f - half, f + half] {
                    if let Some(t) = traj.time_at(center) {
                        axle_times.push((t, f));
                    }
                }
            }
            VehiclePath {
                positions,
                weight: spec.weight_tons,
                wheel_ratio: (scene.reference_lane_offset_m / traj.lane_offset_m()).sqrt(),
                axle_times,
                lane_offset: traj.lane_offset_m(),
            }
        })
        .collect();

    let drift_filter = ZeroPhaseFilter::butterworth(Band::LowPass, 2, DRIFT_CUTOFF_HZ, fs)?;
    let noise = Normal::new(0.0, scene.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut data = vec![0.0; n * scene.channel_count];
    data.par_chunks_mut(n).enumerate().for_each(|(k, row)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let coupled = scene.coupled_channel(k);
        if let Some((p, t_k)) = coupled {
            for path in &paths {
                add_quasistatic(row, path, p, t_k, reference_peak, &geometry);
            }
            for path in &paths {
                add_wheel(row, path, p, t_k, &scene.wheel, scene.start_time, fs);
            }
        }
        if scene.tap_channels.contains(&k) {
            for tap in &scene.taps {
                let first = ((tap.das_time_s - scene.start_time) * fs).ceil().max(0.0) as usize;
                for (i, v) in row.iter_mut().enumerate().skip(first) {
                    let tau = scene.start_time + i as f64 / fs - tap.das_time_s;
                    if tau > 20.0 * TAP_DECAY_S {
                        break;
                    }
                    *v += tap.amplitude * (-tau / TAP_DECAY_S).exp();
                }
            }
        }
        if scene.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        if coupled.is_some() && scene.drift_amplitude > 0.0 {
            let mut walk = Vec::with_capacity(n);
            let mut acc = 0.0;
            for _ in 0..n {
                acc += if rng.random::<bool>() { 1.0 } else { -1.0 };
                walk.push(acc);
            }
            let smooth = drift_filter.apply(&walk);
            let mean = smooth.iter().sum::<f64>() / n as f64;
            let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 {
                let scale = scene.drift_amplitude / sd;
                for (v, d) in row.iter_mut().zip(smooth) {
                    *v += (d - mean) * scale;
                }
            }
        }
    });

    let das = ChannelMatrix::new(
        data,
        scene.channel_count,
        fs,
        scene.start_time,
        scene.channel_spacing_m,
        geometry.gauge_length_m,
    )?;

    let end = scene.start_time + (n - 1) as f64 / fs;
    let mut arrivals = Vec::new();
    for (v, (_, traj)) in scene.vehicles.iter().enumerate() {
        for k in 0..scene.channel_count {
            if let Some((p, _)) = scene.coupled_channel(k) {
                if let Some(t) = traj.time_at(p) {
                    if t >= scene.start_time && t <= end {
                        arrivals.push(Arrival { vehicle: v, channel: k, time_s: t });
                    }
                }
            }
        }
    }
    Ok((das, GroundTruth { vehicles: scene.vehicles.clone(), arrivals, sensors: scene.sensors.clone() }))
}

fn add_quasistatic(row: &mut [f64], path: &VehiclePath, p: f64, t_k: f64, reference_peak: f64, geometry: &FiberGeometry) {
    let scale = t_k * path.weight / reference_peak;
    for (v, &x) in row.iter_mut().zip(&path.positions) {
        let d = x - p;
        // NaN positions (vehicle off the road) fail this test.
        if d.abs() <= KERNEL_REACH_M {
            *v += scale * gauge_averaged_unchecked(d, path.lane_offset, geometry);
        }
    }
}

fn add_wheel(row: &mut [f64], path: &VehiclePath, p: f64, t_k: f64, wheel: &WheelModel, start: f64, fs: f64) {
    let span = 10.0 * wheel.decay_s;
    for &(t_axle, feature) in &path.axle_times {
        let d = (p - feature) / wheel.reach_m;
        if d.abs() > 4.0 {
            continue;
        }
        let amp = wheel.gain * path.weight * t_k.abs() * path.wheel_ratio * (-d * d).exp();
        let first = ((t_axle - start) * fs).ceil().max(0.0) as usize;
        for (i, v) in row.iter_mut().enumerate().skip(first) {
            let tau = start + i as f64 / fs - t_axle;
            if tau > span {
                break;
            }
            *v += amp * wheel.wavelet(tau);
        }
    }
}
