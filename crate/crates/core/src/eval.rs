//! Simulation-based evaluation: each scenario simulates a fiber layout, a
//! driving-test calibration campaign and a traffic record, runs the whole
//! pipeline and scores it against ground truth.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{calibrate, detect_taps, Calibration, CalibrationConfig, TapEvent};
use crate::characterize::{characterize_tracks, CharacterizeConfig, LaneModel, VehicleCharacter, WeightConfig, WheelbaseConfig};
use crate::detect::{detect_all, DetectorConfig};
use crate::sim::{
    crosstalk_traffic, driving_test, generate_layout, random_traffic, synthesize, DriveSpec, DrivingTest, GroundTruth,
    Layout, LayoutSpec, SceneConfig, Traffic, TrafficSpec,
};
use crate::track::{track_multi, ChainMode, MotionModel, MultiConfig, Segment, TrackConfig, VehicleTrack};
use crate::{CalibrationTable, ChannelMatrix, Detection, Direction, Error, Result};

/// Process noise used by scenarios. The simulated drivers change speed
/// smoothly, about 10% over 50 m at most, so a stiffer model than the
/// library default follows them with less noise.
pub const SCENARIO_SIGMA_TDDOT: f64 = 0.001;

/// Detections and track steps match truth within this many seconds.
pub const MATCH_TOLERANCE_S: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub layout: LayoutSpec,
    pub drive: DriveSpec,
    pub traffic: TrafficSpec,
    /// When set, this share of far-lane passes is paired with a near-lane
    /// vehicle meeting it on the instrumented stretch.
    pub crosstalk_fraction: Option<f64>,
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    /// Road joints, as offsets from the start of the instrumented stretch.
    pub feature_offsets_m: Vec<f64>,
    /// Calibrated channels this close to a joint feed the wheelbase estimate.
    pub feature_radius_m: f64,
    /// Keep every n-th channel.
    pub decimation: usize,
    /// `grid_position_mae_m` scores only channels that are multiples of
    /// this, over every track matched to a vehicle. Runs whose decimation
    /// divides it are scored on the same channels.
    pub grid_channels: usize,
    pub detector: DetectorConfig,
    pub multi: MultiConfig,
    pub wheelbase: WheelbaseConfig,
    /// Two vehicles of different lanes within this time at a channel crosstalk.
    pub crosstalk_window_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "nominal".into(),
            seed: 1,
            layout: LayoutSpec::default(),
            drive: DriveSpec::default(),
            traffic: TrafficSpec::default(),
            crosstalk_fraction: None,
            noise_sigma: 40.0,
            drift_amplitude: 20.0,
            feature_offsets_m: vec![60.0, 220.0],
            feature_radius_m: 1.5,
            decimation: 1,
            grid_channels: 10,
            detector: DetectorConfig::default(),
            multi: MultiConfig {
                track: TrackConfig { model: MotionModel { sigma_tddot: SCENARIO_SIGMA_TDDOT, ..MotionModel::default() }, ..TrackConfig::default() },
                ..MultiConfig::default()
            },
            wheelbase: WheelbaseConfig::default(),
            crosstalk_window_s: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decimation == 0 || self.grid_channels == 0 {
            return Err(Error::Config(format!("{}: decimation factor and grid must be >= 1", self.name)));
        }
        if !(self.noise_sigma >= 0.0 && self.drift_amplitude >= 0.0 && self.feature_radius_m >= 0.0) {
            return Err(Error::Config(format!("{}: noise, drift and feature radius must be non-negative", self.name)));
        }
        if let Some(f) = self.crosstalk_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{}: crosstalk fraction must lie in [0, 1]", self.name)));
            }
        }
        self.detector.validate()?;
        self.multi.validate()?;
        self.wheelbase.validate()
    }

    fn lanes(&self) -> LaneModel {
        let (near, far) = (self.traffic.near_lane_offset_m, self.traffic.far_lane_offset_m);
        let (outbound, inbound) = match self.traffic.near_direction {
            Direction::Outbound => (near, far),
            Direction::Inbound => (far, near),
        };
        LaneModel {
            calibration_lane_m: self.drive.lane_offset_m,
            outbound_lane_m: outbound,
            inbound_lane_m: inbound,
            geometry: Default::default(),
        }
    }
}

/// One-factor-at-a-time variations around a base scenario.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioMatrix {
    pub base: ScenarioConfig,
    pub noise_sigmas: Vec<f64>,
    pub far_lane_offsets_m: Vec<f64>,
    pub speed_bins: Vec<(f64, f64)>,
    pub densities: Vec<usize>,
    pub decimations: Vec<usize>,
    pub crosstalk_fractions: Vec<f64>,
    /// Extra seeds for every scenario above.
    pub repeats: usize,
}

impl ScenarioMatrix {
    /// The base scenario followed by every variation, each repeated over seeds.
    pub fn expand(&self) -> Result<Vec<ScenarioConfig>> {
        if self.decimations.contains(&0) {
            return Err(Error::Config("decimation factors must be >= 1".into()));
        }
        let b = &self.base;
        let mut out = vec![b.clone()];
        let with = |suffix: String, f: &dyn Fn(&mut ScenarioConfig)| {
            let mut s = b.clone();
            s.name = format!("{}/{suffix}", b.name);
            f(&mut s);
            s
        };
        out.extend(self.noise_sigmas.iter().map(|&v| with(format!("noise={v}"), &|s| s.noise_sigma = v)));
        out.extend(
            self.far_lane_offsets_m.iter().map(|&v| with(format!("far_lane={v}"), &|s| s.traffic.far_lane_offset_m = v)),
        );
        out.extend(
            self.speed_bins.iter().map(|&v| with(format!("speed={}-{}", v.0, v.1), &|s| s.traffic.speed_range = v)),
        );
        out.extend(self.densities.iter().map(|&v| with(format!("vehicles={v}"), &|s| s.traffic.vehicles = v)));
        out.extend(self.decimations.iter().map(|&v| with(format!("spacing_x{v}"), &|s| s.decimation = v)));
        out.extend(
            self.crosstalk_fractions
                .iter()
                .map(|&v| with(format!("crosstalk={v}"), &|s| s.crosstalk_fraction = Some(v))),
        );
        let singles = out.clone();
        for r in 1..=self.repeats {
            out.extend(singles.iter().map(|s| {
                let mut s = s.clone();
                s.name = format!("{}#{}", s.name, r);
                s.seed = s.seed.wrapping_add(1000 * r as u64);
                s
            }));
        }
        for s in &out {
            s.validate()?;
        }
        Ok(out)
    }
}

/// Scores for one ground-truth vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleScore {
    pub vehicle: usize,
    pub direction: Direction,
    pub lane_offset_m: f64,
    pub weight_tons: f64,
    pub wheelbase_m: f64,
    pub detected: bool,
    pub crosstalking: bool,
    pub wheelbase_error_pct: Option<f64>,
    pub weight_error_pct: Option<f64>,
}

/// Everything a scenario produced, for inspection and persistence.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub name: String,
    pub metrics: Vec<(&'static str, f64)>,
    pub vehicles: Vec<VehicleScore>,
    pub layout: Layout,
    pub calibration: Calibration,
    pub das: ChannelMatrix,
    pub truth: GroundTruth,
    pub detections: Vec<Detection>,
    pub tracks: Vec<VehicleTrack>,
    pub baseline_tracks: Vec<VehicleTrack>,
    pub characters: Vec<VehicleCharacter>,
}

/// Metric names, in report order. Every scenario reports all of them; values
/// that do not apply are NaN.
pub const METRICS: [&str; 29] = [
    "channel_spacing_m",
    "clock_offset_error_s",
    "calib_position_within_1m",
    "calib_transmissibility_within_5pct",
    "calib_spool_accuracy",
    "detection_precision",
    "detection_recall",
    "vehicle_precision",
    "vehicle_recall",
    "near_lane_recall",
    "far_lane_recall",
    "near_lane_detection_recall",
    "far_lane_detection_recall",
    "position_mae_m",
    "grid_position_mae_m",
    "speed_mae_kmh",
    "baseline_position_mae_m",
    "baseline_speed_mae_kmh",
    "position_mae_ratio",
    "speed_mae_ratio",
    "wheelbase_within_4pct",
    "wheelbase_error_pct_mean",
    "wheelbase_error_pct_ci95",
    "weight_within_12pct",
    "weight_error_pct_mean",
    "weight_error_pct_ci95",
    "crosstalk_single_sensor_recall",
    "crosstalk_tracking_recall",
    "tracks",
];

/// Scene of traffic over a layout.
pub fn traffic_scene(layout: &Layout, traffic: &Traffic, cfg: &ScenarioConfig) -> SceneConfig {
    let mut scene = SceneConfig::quiet(layout.sensors.clone(), layout.channel_spacing_m, traffic.duration_s);
    scene.channel_count = layout.channel_count;
    scene.reference_lane_offset_m = cfg.drive.lane_offset_m;
    scene.vehicles = traffic.vehicles.clone();
    scene.road_features = cfg.feature_offsets_m.iter().map(|o| layout.road_span.0 + o).collect();
    scene.noise_sigma = cfg.noise_sigma;
    scene.drift_amplitude = cfg.drift_amplitude;
    scene.sample_rate_hz = cfg.drive.sample_rate_hz;
    scene.spool_segments = layout.spool_segments.clone();
    scene
}

/// Calibrate from a simulated driving test; DAS tap times are detected on
/// the lead-in channels and paired in order with the logged reference times.
pub fn simulate_calibration(layout: &Layout, cfg: &ScenarioConfig) -> Result<Calibration> {
    let drive = driving_test(layout, &cfg.drive, cfg.seed)?;
    let (das, _) = synthesize(&drive.scene, cfg.seed.wrapping_add(1))?;
    calibrate_drive(&das, &layout.lead_in, &drive, cfg.drive.vehicle.weight_tons)
}

fn calibrate_drive(das: &ChannelMatrix, tap_channels: &[usize], drive: &DrivingTest, weight_tons: f64) -> Result<Calibration> {
    let found = detect_taps(das, tap_channels, 8.0, 0.5)?;
    if found.len() != drive.taps.len() {
        return Err(Error::Data(format!("found {} taps, {} were logged", found.len(), drive.taps.len())));
    }
    let taps: Vec<TapEvent> = found
        .iter()
        .zip(&drive.taps)
        .map(|(&d, r)| TapEvent { das_time_s: d, reference_time_s: r.reference_time_s })
        .collect();
    let calib_cfg = CalibrationConfig { test_weight_tons: weight_tons, ..Default::default() };
    calibrate(das, &drive.gps_runs, &taps, &calib_cfg)
}

/// Everything a field campaign would record for a scenario: the calibration
/// drive and the traffic recording, drawn with the same seeds as
/// [`run_scenario`].
#[derive(Debug, Clone)]
pub struct Campaign {
    pub layout: Layout,
    pub drive: DrivingTest,
    pub drive_das: ChannelMatrix,
    pub scene: SceneConfig,
    pub das: ChannelMatrix,
    pub truth: GroundTruth,
}

pub fn simulate_campaign(cfg: &ScenarioConfig) -> Result<Campaign> {
    cfg.validate()?;
    let layout = generate_layout(&cfg.layout, cfg.seed)?;
    let drive = driving_test(&layout, &cfg.drive, cfg.seed)?;
    let (drive_das, _) = synthesize(&drive.scene, cfg.seed.wrapping_add(1))?;
    let traffic = match cfg.crosstalk_fraction {
        Some(f) => crosstalk_traffic(&layout, &cfg.traffic, f, cfg.seed.wrapping_add(2))?,
        None => random_traffic(&layout, &cfg.traffic, cfg.seed.wrapping_add(2))?,
    };
    let scene = traffic_scene(&layout, &traffic, cfg);
    let (das, truth) = synthesize(&scene, cfg.seed.wrapping_add(3))?;
    Ok(Campaign { layout, drive, drive_das, scene, das, truth })
}

/// Calibrated channels near the configured road joints.
pub fn feature_channels(table: &CalibrationTable, features: &[f64], radius_m: f64) -> Vec<usize> {
    table
        .coupled()
        .filter(|e| e.road_position_m().is_some_and(|p| features.iter().any(|f| (p - f).abs() <= radius_m)))
        .map(|e| e.channel())
        .collect()
}

/// Greedy one-to-one matching of two time lists by distance within `tol`.
pub fn match_times(a: &[f64], b: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let d = (x - y).abs();
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Mean and 95% half-width of the normal-approximation confidence interval.
fn mean_ci(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, f64::NAN);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, 1.96 * (var / n).sqrt())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Track-to-vehicle assignment by majority vote of associated detections.
/// Returns, per track, the vehicle it follows (if any), and per vehicle its
/// best track (most votes).
fn assign_tracks(tracks: &[VehicleTrack], truth: &GroundTruth) -> (Vec<Option<usize>>, HashMap<usize, usize>) {
    let mut by_channel: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
    for a in &truth.arrivals {
        by_channel.entry(a.channel).or_default().push((a.vehicle, a.time_s));
    }
    let mut owner = Vec::with_capacity(tracks.len());
    let mut best: HashMap<usize, (usize, usize)> = HashMap::new();
    for (ti, track) in tracks.iter().enumerate() {
        let mut votes: HashMap<usize, usize> = HashMap::new();
        for d in track.detections() {
            let nearest = by_channel.get(&d.channel).and_then(|v| {
                v.iter()
                    .map(|&(veh, t)| (veh, (t - d.arrival_time_s).abs()))
                    .filter(|&(_, dt)| dt <= MATCH_TOLERANCE_S)
                    .min_by(|a, b| a.1.total_cmp(&b.1))
            });
            if let Some((veh, _)) = nearest {
                *votes.entry(veh).or_default() += 1;
            }
        }
        let top = votes.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let assigned = top.filter(|&(_, n)| 2 * n >= track.associated()).map(|(veh, _)| veh);
        if let (Some(veh), Some((_, n))) = (assigned, top) {
            let entry = best.entry(veh).or_insert((ti, n));
            if n > entry.1 {
                *entry = (ti, n);
            }
        }
        owner.push(assigned);
    }
    (owner, best.into_iter().map(|(v, (t, _))| (v, t)).collect())
}

/// Mean absolute position and speed error over the steps of `(track,
/// vehicle)` pairs whose channel passes `keep`.
fn kinematic_errors<'a>(
    pairs: impl IntoIterator<Item = (&'a VehicleTrack, usize)>,
    truth: &GroundTruth,
    keep: impl Fn(usize) -> bool,
) -> (f64, f64) {
    let (mut pos, mut speed) = (Vec::new(), Vec::new());
    for (track, veh) in pairs {
        let traj = &truth.vehicles[veh].1;
        for k in track.kinematics().into_iter().filter(|k| keep(k.channel)) {
            if let (Some(x), Some(v)) = (traj.position(k.time_s), traj.speed(k.time_s)) {
                pos.push((k.position_m - x).abs());
                speed.push(3.6 * (k.speed_mps - v).abs());
            }
        }
    }
    (mean(&pos), mean(&speed))
}

fn best_pairs<'a>(tracks: &'a [VehicleTrack], best: &HashMap<usize, usize>) -> Vec<(&'a VehicleTrack, usize)> {
    let mut v: Vec<(usize, usize)> = best.iter().map(|(&veh, &ti)| (veh, ti)).collect();
    v.sort();
    v.into_iter().map(|(veh, ti)| (&tracks[ti], veh)).collect()
}

/// Run one scenario end to end.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let Campaign { layout, drive, drive_das, scene, das, truth } = simulate_campaign(cfg)?;
    let calibration = calibrate_drive(&drive_das, &layout.lead_in, &drive, cfg.drive.vehicle.weight_tons)?;
    drop(drive_das);

    let table = calibration.table.decimated(cfg.decimation);
    let detections = detect_all(&das, &table, &cfg.detector)?;
    let segments = [Segment { start: 0, end: das.channel_count() }];
    let tracked = track_multi(&detections, &table, &segments, &cfg.multi, ChainMode::Calibrated)?;
    let baseline = track_multi(
        &detections,
        &table,
        &segments,
        &cfg.multi,
        ChainMode::Baseline { channel_spacing_m: das.channel_spacing_m() * cfg.decimation as f64 },
    )?;
    let char_cfg = CharacterizeConfig {
        feature_channels: feature_channels(&table, &scene.road_features, cfg.feature_radius_m),
        wheelbase: cfg.wheelbase,
        weight: WeightConfig { lanes: cfg.lanes(), ..Default::default() },
    };
    let characters = characterize_tracks(&tracked.tracks, &das, &table, &char_cfg)?;

    let mut m: Vec<(&'static str, f64)> = Vec::new();
    m.push(("channel_spacing_m", das.channel_spacing_m() * cfg.decimation as f64));
    m.push(("clock_offset_error_s", (calibration.clock.offset_s - cfg.drive.clock_offset_s).abs()));

    // Calibration against the simulator's sensors.
    let (mut coupled, mut pos_ok, mut t_ok, mut spooled, mut spool_ok) = (0, 0, 0, 0, 0);
    for e in layout.sensors.entries().iter().filter(|e| !layout.lead_in.contains(&e.channel())) {
        let est = calibration.table.get(e.channel());
        match e.transmissibility() {
            Some(t) => {
                coupled += 1;
                let est = est.filter(|x| !x.is_spooled());
                if est.and_then(|x| x.road_position_m()).is_some_and(|p| (p - e.road_position_m().unwrap()).abs() <= 1.0) {
                    pos_ok += 1;
                }
                if est.and_then(|x| x.transmissibility()).is_some_and(|x| (x.abs() / t.abs() - 1.0).abs() <= 0.05) {
                    t_ok += 1;
                }
            }
            None => {
                spooled += 1;
                spool_ok += usize::from(est.is_some_and(|x| x.is_spooled()));
            }
        }
    }
    m.push(("calib_position_within_1m", ratio(pos_ok, coupled)));
    m.push(("calib_transmissibility_within_5pct", ratio(t_ok, coupled)));
    m.push(("calib_spool_accuracy", ratio(spool_ok, spooled)));

    // Channel-level detection scoring at the channels that were screened.
    let screened: Vec<usize> = table.coupled().map(|e| e.channel()).collect();
    let mut truth_at: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
    for a in &truth.arrivals {
        if das.contains_time(a.time_s) {
            truth_at.entry(a.channel).or_default().push((a.vehicle, a.time_s));
        }
    }
    let mut det_at: HashMap<usize, Vec<f64>> = HashMap::new();
    for d in &detections {
        det_at.entry(d.channel).or_default().push(d.arrival_time_s);
    }
    let (mut matched, mut n_truth) = (0usize, 0usize);
    // [near, far] matched and total arrivals.
    let (mut lane_matched, mut lane_truth) = ([0usize; 2], [0usize; 2]);
    let lane_of = |v: usize| usize::from(truth.vehicles[v].1.direction() != cfg.traffic.near_direction);
    // (vehicle, channel) arrivals that some detection matched.
    let mut detected_arrivals: std::collections::HashSet<(usize, usize)> = Default::default();
    for &ch in &screened {
        let t: Vec<(usize, f64)> = truth_at.get(&ch).cloned().unwrap_or_default();
        let d = det_at.get(&ch).cloned().unwrap_or_default();
        let times: Vec<f64> = t.iter().map(|x| x.1).collect();
        let pairs = match_times(&d, &times, MATCH_TOLERANCE_S);
        matched += pairs.len();
        n_truth += t.len();
        for &(v, _) in &t {
            lane_truth[lane_of(v)] += 1;
        }
        for (_, j) in pairs {
            lane_matched[lane_of(t[j].0)] += 1;
            detected_arrivals.insert((t[j].0, ch));
        }
    }
    m.push(("detection_precision", ratio(matched, detections.len())));
    m.push(("detection_recall", ratio(matched, n_truth)));

    // Vehicle-level scoring.
    let (owner, best) = assign_tracks(&tracked.tracks, &truth);
    let mut seen = std::collections::HashSet::new();
    let true_tracks = owner.iter().flatten().filter(|v| seen.insert(**v)).count();
    m.push(("vehicle_precision", ratio(true_tracks, tracked.tracks.len())));
    let near_direction = cfg.traffic.near_direction;
    let n_vehicles = truth.vehicles.len();
    let near: Vec<usize> = (0..n_vehicles).filter(|&v| truth.vehicles[v].1.direction() == near_direction).collect();
    let far: Vec<usize> = (0..n_vehicles).filter(|&v| truth.vehicles[v].1.direction() != near_direction).collect();
    let count = |set: &[usize]| set.iter().filter(|v| best.contains_key(v)).count();
    m.push(("vehicle_recall", ratio(best.len(), n_vehicles)));
    m.push(("near_lane_recall", ratio(count(&near), near.len())));
    m.push(("far_lane_recall", ratio(count(&far), far.len())));
    m.push(("near_lane_detection_recall", ratio(lane_matched[0], lane_truth[0])));
    m.push(("far_lane_detection_recall", ratio(lane_matched[1], lane_truth[1])));

    let (pos_mae, speed_mae) = kinematic_errors(best_pairs(&tracked.tracks, &best), &truth, |_| true);
    let (_, base_best) = assign_tracks(&baseline.tracks, &truth);
    let (base_pos, base_speed) = kinematic_errors(best_pairs(&baseline.tracks, &base_best), &truth, |_| true);
    let owned = tracked.tracks.iter().zip(&owner).filter_map(|(t, v)| v.map(|v| (t, v)));
    let (grid_pos_mae, _) = kinematic_errors(owned, &truth, |ch| ch % cfg.grid_channels == 0);
    m.push(("position_mae_m", pos_mae));
    m.push(("grid_position_mae_m", grid_pos_mae));
    m.push(("speed_mae_kmh", speed_mae));
    m.push(("baseline_position_mae_m", base_pos));
    m.push(("baseline_speed_mae_kmh", base_speed));
    m.push(("position_mae_ratio", base_pos / pos_mae));
    m.push(("speed_mae_ratio", base_speed / speed_mae));

    // Crosstalk: arrivals of far-lane vehicles that coincide with another lane's vehicle.
    let mut crosstalk_pairs: Vec<(usize, usize, f64)> = Vec::new();
    for &ch in &screened {
        let Some(list) = truth_at.get(&ch) else { continue };
        for &(v, t) in list {
            if truth.vehicles[v].1.direction() == near_direction {
                continue;
            }
            let overlaps = list.iter().any(|&(u, s)| {
                truth.vehicles[u].1.direction() != truth.vehicles[v].1.direction() && (s - t).abs() <= cfg.crosstalk_window_s
            });
            if overlaps {
                crosstalk_pairs.push((v, ch, t));
            }
        }
    }
    let crosstalking: std::collections::HashSet<usize> = crosstalk_pairs.iter().map(|p| p.0).collect();
    let single = crosstalk_pairs.iter().filter(|p| detected_arrivals.contains(&(p.0, p.1))).count();
    let tracked_pairs = crosstalk_pairs
        .iter()
        .filter(|&&(v, ch, t)| {
            owner.iter().enumerate().any(|(ti, o)| {
                *o == Some(v)
                    && tracked.tracks[ti].step(ch).is_some_and(|s| (s.smoothed.time() - t).abs() <= MATCH_TOLERANCE_S)
            })
        })
        .count();

    // Characterization per vehicle via its best track.
    let mut vehicles = Vec::with_capacity(n_vehicles);
    for (v, (spec, traj)) in truth.vehicles.iter().enumerate() {
        let character = best.get(&v).map(|&ti| &characters[ti]);
        let pct = |est: Option<f64>, truth: f64| est.map(|e| 100.0 * (e - truth) / truth);
        vehicles.push(VehicleScore {
            vehicle: v,
            direction: traj.direction(),
            lane_offset_m: traj.lane_offset_m(),
            weight_tons: spec.weight_tons,
            wheelbase_m: spec.wheelbase_m,
            detected: character.is_some(),
            crosstalking: crosstalking.contains(&v),
            wheelbase_error_pct: pct(character.and_then(|c| c.wheelbase_m).map(|e| e.value), spec.wheelbase_m),
            weight_error_pct: pct(character.and_then(|c| c.weight_tons).map(|e| e.value), spec.weight_tons),
        });
    }
    let detected: Vec<&VehicleScore> = vehicles.iter().filter(|v| v.detected).collect();
    let within = |f: fn(&VehicleScore) -> Option<f64>, tol: f64| {
        ratio(detected.iter().filter(|v| f(v).is_some_and(|e| e.abs() <= tol)).count(), detected.len())
    };
    let wb: Vec<f64> = detected.iter().filter_map(|v| v.wheelbase_error_pct).collect();
    let wt: Vec<f64> = detected.iter().filter_map(|v| v.weight_error_pct).collect();
    let (wb_mean, wb_ci) = mean_ci(&wb);
    let (wt_mean, wt_ci) = mean_ci(&wt);
    m.push(("wheelbase_within_4pct", within(|v| v.wheelbase_error_pct, 4.0)));
    m.push(("wheelbase_error_pct_mean", wb_mean));
    m.push(("wheelbase_error_pct_ci95", wb_ci));
    m.push(("weight_within_12pct", within(|v| v.weight_error_pct, 12.0)));
    m.push(("weight_error_pct_mean", wt_mean));
    m.push(("weight_error_pct_ci95", wt_ci));
    m.push(("crosstalk_single_sensor_recall", ratio(single, crosstalk_pairs.len())));
    m.push(("crosstalk_tracking_recall", ratio(tracked_pairs, crosstalk_pairs.len())));
    m.push(("tracks", tracked.tracks.len() as f64));
    debug_assert_eq!(m.iter().map(|x| x.0).collect::<Vec<_>>(), METRICS);

    Ok(ScenarioOutcome {
        name: cfg.name.clone(),
        metrics: m,
        vehicles,
        layout,
        calibration,
        das,
        truth,
        detections,
        tracks: tracked.tracks,
        baseline_tracks: baseline.tracks,
        characters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// Scenarios that failed, with their error message.
    pub failures: Vec<(String, String)>,
}

impl EvalReport {
    pub fn value(&self, scenario: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.scenario == scenario && r.metric == metric).map(|r| r.value)
    }
}

/// Run every scenario concurrently; failures are isolated and reported.
pub fn run_eval(scenarios: &[ScenarioConfig]) -> EvalReport {
    let results: Vec<std::result::Result<ScenarioOutcome, String>> =
        scenarios.par_iter().map(|s| run_scenario(s).map_err(|e| e.to_string())).collect();
    let mut report = EvalReport::default();
    for (s, r) in scenarios.iter().zip(results) {
        match r {
            Ok(out) => report.rows.extend(out.metrics.iter().map(|(k, v)| MetricRow {
                scenario: s.name.clone(),
                metric: k.to_string(),
                value: *v,
            })),
            Err(e) => report.failures.push((s.name.clone(), e)),
        }
    }
    report
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    w.write_record(["scenario", "metric", "value"]).map_err(|e| Error::parse(path, e))?;
    for r in rows {
        w.write_record([r.scenario.as_str(), r.metric.as_str(), &r.value.to_string()])
            .map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `metrics.csv`, `failures.csv` and, when the report holds spacing
/// variations, an SVG of position error against channel spacing. Image
/// problems are not fatal; the returned list names the files written.
pub fn emit_plots(report: &EvalReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(&metrics, &report.rows)?;
    let failures = dir.join("failures.csv");
    let mut w = csv::Writer::from_path(&failures).map_err(|e| Error::parse(&failures, e))?;
    w.write_record(["scenario", "error"]).map_err(|e| Error::parse(&failures, e))?;
    for (s, e) in &report.failures {
        w.write_record([s, e]).map_err(|e| Error::parse(&failures, e))?;
    }
    w.flush().map_err(|e| Error::io(&failures, e))?;
    let mut written = vec![metrics, failures];

    let mut curve: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter(|r| r.metric == "channel_spacing_m")
        .filter_map(|r| Some((r.value, report.value(&r.scenario, "grid_position_mae_m")?)))
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if curve.len() >= 2 {
        let svg = dir.join("spacing_mae.svg");
        if std::fs::write(&svg, scatter_svg(&curve, "channel spacing (m)", "position MAE (m)")).is_ok() {
            written.push(svg);
        }
    }
    Ok(written)
}

fn scatter_svg(points: &[(f64, f64)], x_label: &str, y_label: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let xmax = points.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-9);
    let ymax = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9);
    let sx = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / ymax * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y0}" stroke="black"/>"#,
        y0 = h - pad,
        x1 = w - pad
    );
    for &(x, y) in points {
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3"/>"#, sx(x), sy(y));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label} (max {xmax:.3})</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="12" y="24">{y_label} (max {ymax:.3})</text>"#);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_matching_is_one_to_one() {
        let pairs = match_times(&[1.0, 1.1, 5.0], &[1.05, 9.0], 0.5);
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0] == (0, 0) || pairs[0] == (1, 0));
        assert!(match_times(&[], &[1.0], 0.5).is_empty());
    }

    #[test]
    fn matrix_expansion_counts() {
        let m = ScenarioMatrix {
            decimations: vec![2, 5, 10],
            noise_sigmas: vec![80.0],
            repeats: 1,
            ..Default::default()
        };
        let s = m.expand().unwrap();
        assert_eq!(s.len(), 2 * 5);
        assert!(s.iter().any(|x| x.name == "nominal/spacing_x5#1" && x.decimation == 5));
        let bad = ScenarioMatrix { decimations: vec![0], ..Default::default() };
        assert!(bad.expand().is_err());
    }

    #[test]
    fn empty_report_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&EvalReport::default(), dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap().trim(), "scenario,metric,value");
    }

    #[test]
    fn confidence_interval_of_constant_is_zero() {
        assert_eq!(mean_ci(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}
