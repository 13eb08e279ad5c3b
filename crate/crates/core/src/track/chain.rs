use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kalman::{associate, innovation_std, predict, rts_smooth, update, MotionModel, StateEstimate};
use crate::{CalibrationTable, Detection, Direction, Error, Result};

/// Detections grouped by channel, each list sorted by time.
pub type DetectionsByChannel = BTreeMap<usize, Vec<Detection>>;

pub fn group_by_channel(detections: &[Detection]) -> DetectionsByChannel {
    let mut out: DetectionsByChannel = BTreeMap::new();
    for d in detections {
        out.entry(d.channel).or_default().push(*d);
    }
    for list in out.values_mut() {
        list.sort_by(|a, b| a.arrival_time_s.total_cmp(&b.arrival_time_s));
    }
    out
}

/// One sensor in the spatial recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainNode {
    pub channel: usize,
    pub position_m: f64,
}

/// Where chain positions come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Calibrated road positions; spooled channels are left out.
    Calibrated,
    /// Every channel at its nominal fiber distance, as if nothing were
    /// geo-localized. Positions are anchored at the first calibrated channel.
    Baseline { channel_spacing_m: f64 },
}

/// Nodes in order of increasing road position, restricted to `channels`.
///
/// In calibrated mode, channels tied in position with their predecessor are
/// dropped so that every spacing is strictly positive.
pub fn build_chain(table: &CalibrationTable, mode: ChainMode, channels: std::ops::Range<usize>) -> Vec<ChainNode> {
    match mode {
        ChainMode::Calibrated => {
            let mut out: Vec<ChainNode> = Vec::new();
            for e in table.coupled().filter(|e| channels.contains(&e.channel())) {
                let Some(p) = e.road_position_m() else { continue };
                if out.last().is_some_and(|last| p <= last.position_m) {
                    continue;
                }
                out.push(ChainNode { channel: e.channel(), position_m: p });
            }
            out
        }
        ChainMode::Baseline { channel_spacing_m } => {
            let anchor = table.coupled().find_map(|e| e.road_position_m().map(|p| (e.channel(), p)));
            let Some((k0, p0)) = anchor else { return Vec::new() };
            table
                .entries()
                .iter()
                .filter(|e| channels.contains(&e.channel()))
                .map(|e| ChainNode {
                    channel: e.channel(),
                    position_m: p0 + (e.channel() as f64 - k0 as f64) * channel_spacing_m,
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub model: MotionModel,
    pub gate_sigmas: f64,
    /// Distance of consecutive misses after which a track ends.
    pub max_miss_m: f64,
    pub min_associations: usize,
    /// Prior standard deviations of `[t, t_dot]` at the first node.
    pub init_std: [f64; 2],
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { model: MotionModel::default(), gate_sigmas: 3.0, max_miss_m: 25.0, min_associations: 10, init_std: [1.0, 0.05] }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.gate_sigmas > 0.0 && self.max_miss_m > 0.0 && self.init_std.iter().all(|&s| s > 0.0)) {
            return Err(Error::Config(format!("invalid tracking config {self:?}")));
        }
        Ok(())
    }
}

/// Prior belief at the first node of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackInit {
    pub direction: Direction,
    /// Chain node (channel) the prior refers to.
    pub channel: usize,
    pub time_s: f64,
    /// Seconds per metre along the direction of travel.
    pub slowness: f64,
    pub std: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackStep {
    pub channel: usize,
    /// Road position used for this channel.
    pub position_m: f64,
    /// Distance from the previous step along the direction of travel (0 at the first).
    pub dx: f64,
    pub predicted: StateEstimate,
    pub filtered: StateEstimate,
    pub smoothed: StateEstimate,
    pub detection: Option<Detection>,
}

/// Time, position and speed of a vehicle at one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub channel: usize,
    pub time_s: f64,
    pub position_m: f64,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrack {
    pub id: usize,
    pub direction: Direction,
    pub steps: Vec<TrackStep>,
    /// RMS difference between associated detections and smoothed times.
    pub residual_s: f64,
    /// Mean normalized innovation squared over associated steps.
    pub nis: f64,
    /// Steps where the smoother had to regularize a covariance inverse.
    pub regularized: Vec<usize>,
}

impl VehicleTrack {
    pub fn associated(&self) -> usize {
        self.steps.iter().filter(|s| s.detection.is_some()).count()
    }

    pub fn detections(&self) -> impl Iterator<Item = &Detection> {
        self.steps.iter().filter_map(|s| s.detection.as_ref())
    }

    /// Per-step kinematics from the smoothed states; steps with non-positive
    /// slowness are skipped.
    pub fn kinematics(&self) -> Vec<Kinematics> {
        self.steps
            .iter()
            .filter(|s| s.smoothed.slowness() > 0.0)
            .map(|s| Kinematics {
                channel: s.channel,
                time_s: s.smoothed.time(),
                position_m: s.position_m,
                speed_mps: 1.0 / s.smoothed.slowness(),
            })
            .collect()
    }

    pub fn step(&self, channel: usize) -> Option<&TrackStep> {
        self.steps.iter().find(|s| s.channel == channel)
    }

    pub fn time_span(&self) -> (f64, f64) {
        let times = self.steps.iter().map(|s| s.smoothed.time());
        times.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)))
    }

    pub fn mean_speed_mps(&self) -> Option<f64> {
        let k = self.kinematics();
        (!k.is_empty()).then(|| k.iter().map(|k| k.speed_mps).sum::<f64>() / k.len() as f64)
    }
}

/// Forward filter and backward smoother along `nodes`, which must already be
/// in the order of travel. `nodes[0]` carries the prior.
pub(crate) fn run_chain(
    nodes: &[ChainNode],
    candidates: &dyn Fn(usize) -> Vec<Detection>,
    cfg: &TrackConfig,
    init: &TrackInit,
) -> Result<VehicleTrack> {
    let model = &cfg.model;
    if nodes.is_empty() {
        return Err(Error::InvalidArgument("empty chain".into()));
    }
    let prior = StateEstimate::new(
        [init.time_s, init.slowness],
        [[init.std[0].powi(2), 0.0], [0.0, init.std[1].powi(2)]],
        nodes[0].channel,
    );
    let mut steps: Vec<TrackStep> = Vec::with_capacity(nodes.len());
    let mut miss_run = 0.0;
    let mut last_hit: Option<usize> = None;
    let mut nis = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let dx = if i == 0 { 0.0 } else { (node.position_m - nodes[i - 1].position_m).abs() };
        let mut predicted = if i == 0 { prior } else { predict(&steps[i - 1].filtered, dx, model)? };
        predicted.channel = node.channel;
        let list = candidates(node.channel);
        let (filtered, detection) = match associate(&predicted, &list, model, cfg.gate_sigmas) {
            Some(j) => {
                let d = list[j];
                let s = innovation_std(&predicted, model);
                nis.push(((d.arrival_time_s - predicted.time()) / s).powi(2));
                (update(&predicted, d.arrival_time_s, model)?, Some(d))
            }
            None => (predicted, None),
        };
        if detection.is_some() {
            miss_run = 0.0;
            last_hit = Some(i);
        } else {
            miss_run += dx;
        }
        steps.push(TrackStep {
            channel: node.channel,
            position_m: node.position_m,
            dx,
            predicted,
            filtered,
            smoothed: filtered,
            detection,
        });
        if miss_run > cfg.max_miss_m {
            break;
        }
    }
    // Trailing misses carry no information about this vehicle.
    steps.truncate(last_hit.map_or(0, |i| i + 1));
    let associated = steps.iter().filter(|s| s.detection.is_some()).count();
    if associated < cfg.min_associations || steps.is_empty() {
        return Err(Error::TrackRejected { associated, required: cfg.min_associations });
    }
    let filtered: Vec<StateEstimate> = steps.iter().map(|s| s.filtered).collect();
    let dxs: Vec<f64> = steps.iter().skip(1).map(|s| s.dx).collect();
    let smoothed = rts_smooth(&filtered, model, &dxs)?;
    for (s, sm) in steps.iter_mut().zip(smoothed.states) {
        s.smoothed = sm;
    }
    let sq: Vec<f64> = steps
        .iter()
        .filter_map(|s| s.detection.map(|d| (d.arrival_time_s - s.smoothed.time()).powi(2)))
        .collect();
    Ok(VehicleTrack {
        id: 0,
        direction: init.direction,
        residual_s: (sq.iter().sum::<f64>() / sq.len() as f64).sqrt(),
        nis: nis.iter().sum::<f64>() / nis.len().max(1) as f64,
        steps,
        regularized: smoothed.regularized,
    })
}

/// Order `nodes` (ascending road position) for travel in `direction`.
pub fn oriented(nodes: &[ChainNode], direction: Direction) -> Vec<ChainNode> {
    let mut v = nodes.to_vec();
    if direction == Direction::Inbound {
        v.reverse();
    }
    v
}

/// Filter and smooth one vehicle over the calibrated chain, starting at the
/// node named in `init` and proceeding in its direction of travel.
pub fn track_single(
    detections: &DetectionsByChannel,
    calib: &CalibrationTable,
    cfg: &TrackConfig,
    init: &TrackInit,
) -> Result<VehicleTrack> {
    cfg.validate()?;
    let last = calib.entries().last().map_or(0, |e| e.channel() + 1);
    let chain = oriented(&build_chain(calib, ChainMode::Calibrated, 0..last), init.direction);
    let start = chain
        .iter()
        .position(|n| n.channel == init.channel)
        .ok_or_else(|| Error::InvalidArgument(format!("initial channel {} is not on the chain", init.channel)))?;
    let lookup = |ch: usize| detections.get(&ch).cloned().unwrap_or_default();
    run_chain(&chain[start..], &lookup, cfg, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ChannelCalibration, Polarity};

    fn line_table(n: usize) -> CalibrationTable {
        CalibrationTable::new((0..n).map(|k| ChannelCalibration::coupled(k, k as f64, 1000.0).unwrap()).collect())
            .unwrap()
    }

    fn dets(n: usize, t0: f64, speed: f64) -> DetectionsByChannel {
        let all: Vec<Detection> = (0..n)
            .map(|k| Detection { channel: k, arrival_time_s: t0 + k as f64 / speed, prominence: 1.0, polarity: Polarity::Peak })
            .collect();
        group_by_channel(&all)
    }

    fn init(direction: Direction, channel: usize, t: f64) -> TrackInit {
        TrackInit { direction, channel, time_s: t, slowness: 0.1, std: [1.0, 0.05] }
    }

    #[test]
    fn noise_free_constant_speed_track() {
        let table = line_table(100);
        let d = dets(100, 5.0, 10.0);
        let track = track_single(&d, &table, &TrackConfig::default(), &init(Direction::Outbound, 0, 5.0)).unwrap();
        assert_eq!(track.associated(), 100);
        for k in track.kinematics() {
            assert!((k.speed_mps - 10.0).abs() < 0.1);
        }
        for s in &track.steps {
            assert!((s.smoothed.time() - (5.0 + s.channel as f64 / 10.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn inbound_track_runs_down_the_chain() {
        let table = line_table(60);
        let all: Vec<Detection> = (0..60)
            .map(|k| Detection {
                channel: k,
                arrival_time_s: 20.0 - k as f64 / 12.0,
                prominence: 1.0,
                polarity: Polarity::Peak,
            })
            .collect();
        let d = group_by_channel(&all);
        let t_first = 20.0 - 59.0 / 12.0;
        let track = track_single(&d, &table, &TrackConfig::default(), &init(Direction::Inbound, 59, t_first)).unwrap();
        assert_eq!(track.steps[0].channel, 59);
        let v = track.mean_speed_mps().unwrap();
        assert!((v - 12.0).abs() < 0.1, "speed {v}");
    }

    #[test]
    fn outlier_is_gated() {
        let table = line_table(80);
        let clean = dets(80, 5.0, 10.0);
        let mut dirty = clean.clone();
        dirty.get_mut(&40).unwrap()[0].arrival_time_s += 5.0;
        let cfg = TrackConfig::default();
        let a = track_single(&clean, &table, &cfg, &init(Direction::Outbound, 0, 5.0)).unwrap();
        let b = track_single(&dirty, &table, &cfg, &init(Direction::Outbound, 0, 5.0)).unwrap();
        assert!(b.step(40).unwrap().detection.is_none());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            if x.channel == 40 {
                continue;
            }
            assert!((x.smoothed.time() - y.smoothed.time()).abs() < 1e-2);
        }
    }

    #[test]
    fn too_few_associations_reject_the_track() {
        let table = line_table(30);
        let d = dets(5, 5.0, 10.0);
        let r = track_single(&d, &table, &TrackConfig::default(), &init(Direction::Outbound, 0, 5.0));
        assert!(matches!(r, Err(Error::TrackRejected { associated: 5, .. })));
    }

    #[test]
    fn baseline_chain_uses_nominal_spacing() {
        let mut entries: Vec<ChannelCalibration> =
            (0..5).map(|k| ChannelCalibration::coupled(k, 10.0 + 0.8 * k as f64, 1000.0).unwrap()).collect();
        entries.push(ChannelCalibration::spooled(5, Some(13.2)));
        entries.push(ChannelCalibration::coupled(6, 13.3, 1000.0).unwrap());
        let table = CalibrationTable::new(entries).unwrap();
        let base = build_chain(&table, ChainMode::Baseline { channel_spacing_m: 1.0 }, 0..7);
        assert_eq!(base.len(), 7);
        assert_eq!(base[6].position_m, 16.0);
        let cal = build_chain(&table, ChainMode::Calibrated, 0..7);
        assert_eq!(cal.iter().map(|n| n.channel).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 6]);
    }
}
