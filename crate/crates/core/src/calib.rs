//! System characterization from a driving test: clock synchronization by
//! tap tests, geo-localization of every channel from GPS-tracked passes of a
//! test vehicle, and per-channel transmissibility.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{prominence_scan, quasistatic_amplitude, AmplitudeConfig, Reach};
use crate::filter::lowpass_quasistatic;
use crate::geo::Centerline;
use crate::sim::{gauge_peak, FiberGeometry};
use crate::stats::{mad, mean, median, noise_sigma};
use crate::{CalibrationTable, ChannelCalibration, ChannelMatrix, Error, GeoPoint, Polarity, Result};

pub use crate::types::classify;

/// A tap on the fiber seen in both clocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapEvent {
    pub das_time_s: f64,
    pub reference_time_s: f64,
}

/// Offset to add to DAS time to obtain reference (GPS) time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockSync {
    pub offset_s: f64,
    /// Range of the individual offsets, when there are at least two taps.
    pub spread_s: Option<f64>,
}

pub fn sync_clocks(taps: &[TapEvent]) -> Result<ClockSync> {
    if taps.is_empty() {
        return Err(Error::Data("clock sync needs at least one tap event".into()));
    }
    if taps.iter().any(|t| !(t.das_time_s.is_finite() && t.reference_time_s.is_finite())) {
        return Err(Error::Data("non-finite tap time".into()));
    }
    let offsets: Vec<f64> = taps.iter().map(|t| t.reference_time_s - t.das_time_s).collect();
    let offset_s = mean(&offsets).expect("non-empty");
    let spread_s = (offsets.len() >= 2).then(|| {
        let lo = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    });
    Ok(ClockSync { offset_s, spread_s })
}

/// DAS times of tap onsets on the given (interrogator-room) channels.
///
/// The channels are averaged and an onset is declared where the sample-to-sample
/// jump exceeds `threshold_sigmas` robust noise deviations; later jumps within
/// `dead_time_s` belong to the same tap.
pub fn detect_taps(das: &ChannelMatrix, channels: &[usize], threshold_sigmas: f64, dead_time_s: f64) -> Result<Vec<f64>> {
    if channels.is_empty() {
        return Err(Error::InvalidArgument("no tap channels given".into()));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= das.channel_count()) {
        return Err(Error::InvalidArgument(format!("tap channel {c} out of range")));
    }
    let n = das.sample_count();
    let mut avg = vec![0.0; n];
    for &c in channels {
        for (a, v) in avg.iter_mut().zip(das.channel(c)) {
            *a += v / channels.len() as f64;
        }
    }
    let diffs: Vec<f64> = avg.windows(2).map(|w| w[1] - w[0]).collect();
    let sigma = 1.4826 * mad(&diffs).unwrap_or(0.0);
    let threshold = threshold_sigmas * sigma.max(f64::MIN_POSITIVE);
    let dead = (dead_time_s * das.sample_rate_hz()).ceil() as usize;
    let mut out = Vec::new();
    let mut i = 0;
    while i < diffs.len() {
        if diffs[i].abs() > threshold {
            // The jump lands on sample i + 1; the tap happened within the preceding interval.
            out.push(das.time_of(i as f64 + 0.5));
            i += dead.max(1);
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// One GPS-logged pass, in reference-clock time.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsTrack {
    samples: Vec<(f64, f64, f64)>,
    projected: Vec<(f64, f64)>,
}

impl GpsTrack {
    /// `(time_s, lat, lon)` fixes with strictly increasing times.
    pub fn new(samples: Vec<(f64, f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Data("GPS track needs at least two fixes".into()));
        }
        if samples.iter().any(|s| !(s.0.is_finite() && s.1.is_finite() && s.2.is_finite())) {
            return Err(Error::Data("non-finite GPS fix".into()));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data("GPS times must be strictly increasing".into()));
        }
        Ok(Self { samples, projected: Vec::new() })
    }

    /// Attach road positions by projecting every fix onto `centerline`.
    pub fn projected_onto(mut self, centerline: &Centerline) -> Self {
        self.projected = self
            .samples
            .iter()
            .map(|&(t, lat, lon)| (t, centerline.project(GeoPoint { lat, lon }).0))
            .collect();
        self
    }

    pub fn samples(&self) -> &[(f64, f64, f64)] {
        &self.samples
    }

    pub fn projected(&self) -> &[(f64, f64)] {
        &self.projected
    }

    pub fn time_span(&self) -> (f64, f64) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }

    fn bracket(&self, t: f64) -> Option<(usize, f64)> {
        let (lo, hi) = self.time_span();
        if !(t >= lo && t <= hi) {
            return None;
        }
        let i = self.samples.partition_point(|s| s.0 <= t).clamp(1, self.samples.len() - 1);
        let (t0, t1) = (self.samples[i - 1].0, self.samples[i].0);
        Some((i, (t - t0) / (t1 - t0)))
    }

    /// Road position at reference time `t` by linear interpolation.
    pub fn position_at(&self, t: f64) -> Option<f64> {
        if self.projected.is_empty() {
            return None;
        }
        let (i, u) = self.bracket(t)?;
        Some(self.projected[i - 1].1 + u * (self.projected[i].1 - self.projected[i - 1].1))
    }

    /// Interpolated fix at reference time `t`.
    pub fn geo_at(&self, t: f64) -> Option<GeoPoint> {
        let (i, u) = self.bracket(t)?;
        let (a, b) = (self.samples[i - 1], self.samples[i]);
        Some(GeoPoint { lat: a.1 + u * (b.1 - a.1), lon: a.2 + u * (b.2 - a.2) })
    }

    /// First reference time at which the projected track passes road position `x`.
    pub fn time_at(&self, x: f64) -> Option<f64> {
        self.projected.windows(2).find_map(|w| {
            let ((t0, x0), (t1, x1)) = (w[0], w[1]);
            let (lo, hi) = if x0 <= x1 { (x0, x1) } else { (x1, x0) };
            if x < lo || x > hi || x0 == x1 {
                return None;
            }
            Some(t0 + (t1 - t0) * (x - x0) / (x1 - x0))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeolocateConfig {
    /// Runs disagreeing by more than this mark the channel as spooled.
    pub spool_tolerance_m: f64,
    /// Events weaker than this many noise deviations are ignored.
    pub floor_sigmas: f64,
    /// Prominence reference reach on the low-passed series.
    pub reach_s: f64,
    /// Per-run positions beyond this many MADs from the median are dropped (3+ runs).
    pub outlier_mads: f64,
    /// Largest time step between neighbouring channels' events within one run.
    pub max_step_s: f64,
}

impl Default for GeolocateConfig {
    fn default() -> Self {
        Self { spool_tolerance_m: 5.0, floor_sigmas: 3.0, reach_s: 3.0, outlier_mads: 3.0, max_step_s: 4.0 }
    }
}

/// Where one channel sits on the road, and the evidence for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlacement {
    pub channel: usize,
    /// `None` when the channel is judged spooled.
    pub road_position_m: Option<f64>,
    /// Per run: DAS time of the test vehicle's closest approach.
    pub run_times: Vec<Option<f64>>,
    /// Per run: road position implied by that time.
    pub run_positions: Vec<Option<f64>>,
    pub geo: Option<GeoPoint>,
}

// Candidate events (absolute time, prominence) of one channel per run.
fn channel_candidates(
    das: &ChannelMatrix,
    k: usize,
    windows: &[(f64, f64)],
    cfg: &GeolocateConfig,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let raw = das.channel(k);
    let floor = cfg.floor_sigmas * noise_sigma(raw);
    let low = lowpass_quasistatic(raw, das.sample_rate_hz())?;
    let fs = das.sample_rate_hz();
    Ok(windows
        .iter()
        .map(|&(t0, t1)| {
            let a = das.sample_of(t0).max(0.0).floor() as usize;
            let b = (das.sample_of(t1).ceil().max(0.0) as usize).min(low.len());
            if b <= a + 2 {
                return Vec::new();
            }
            let slice = &low[a..b];
            let mut out: Vec<(f64, f64)> = [Polarity::Peak, Polarity::Valley]
                .iter()
                .flat_map(|&p| prominence_scan(slice, fs, Reach::Bounded(cfg.reach_s), p))
                .filter(|e| e.prominence >= floor && e.prominence > 0.0)
                .map(|e| (das.time_of(a as f64) + e.time_s, e.prominence))
                .collect();
            out.sort_by(|x, y| x.0.total_cmp(&y.0));
            out
        })
        .collect())
}

/// Pool-adjacent-violators fit of a non-decreasing sequence (unit weights).
pub fn isotonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

/// Place every channel on the road from the driving-test passes.
///
/// `offset_s` converts DAS time to the GPS clock (see [`sync_clocks`]).
pub fn geolocate_channels(
    das: &ChannelMatrix,
    runs: &[GpsTrack],
    offset_s: f64,
    cfg: &GeolocateConfig,
) -> Result<Vec<ChannelPlacement>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("geo-localization needs at least one run".into()));
    }
    if runs.iter().any(|r| r.projected().is_empty()) {
        return Err(Error::InvalidArgument("GPS runs must be projected onto the road first".into()));
    }
    let windows: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let (a, b) = r.time_span();
            (a - offset_s, b - offset_s)
        })
        .collect();
    let candidates: Vec<Vec<Vec<(f64, f64)>>> = (0..das.channel_count())
        .into_par_iter()
        .map(|k| channel_candidates(das, k, &windows, cfg))
        .collect::<Result<_>>()?;

    let k_total = das.channel_count();
    let mut run_times = vec![vec![None; runs.len()]; k_total];
    for r in 0..runs.len() {
        let mut prev: Option<f64> = None;
        for k in 0..k_total {
            let cands = &candidates[k][r];
            let pick = match prev {
                Some(tp) => cands
                    .iter()
                    .filter(|c| (c.0 - tp).abs() <= cfg.max_step_s)
                    .min_by(|a, b| (a.0 - tp).abs().total_cmp(&(b.0 - tp).abs())),
                None => cands.iter().max_by(|a, b| a.1.total_cmp(&b.1)),
            };
            if let Some(&(t, _)) = pick {
                run_times[k][r] = Some(t);
                prev = Some(t);
            }
        }
    }

    let mut placements: Vec<ChannelPlacement> = (0..k_total)
        .map(|k| {
            let run_positions: Vec<Option<f64>> = run_times[k]
                .iter()
                .zip(runs)
                .map(|(t, run)| t.and_then(|t| run.position_at(t + offset_s)))
                .collect();
            let mut values: Vec<f64> = run_positions.iter().flatten().copied().collect();
            if values.len() >= 3 {
                let m = median(&values).expect("non-empty");
                let spread = 1.4826 * mad(&values).expect("non-empty");
                if spread > 0.0 {
                    values.retain(|v| (v - m).abs() <= cfg.outlier_mads * spread);
                }
            }
            let consistent = !values.is_empty() && {
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                hi - lo <= cfg.spool_tolerance_m
            };
            let road_position_m = if consistent { mean(&values) } else { None };
            let geos: Vec<GeoPoint> = run_times[k]
                .iter()
                .zip(runs)
                .filter_map(|(t, run)| t.and_then(|t| run.geo_at(t + offset_s)))
                .collect();
            let geo = (road_position_m.is_some() && !geos.is_empty()).then(|| GeoPoint {
                lat: geos.iter().map(|g| g.lat).sum::<f64>() / geos.len() as f64,
                lon: geos.iter().map(|g| g.lon).sum::<f64>() / geos.len() as f64,
            });
            ChannelPlacement { channel: k, road_position_m, run_times: run_times[k].clone(), run_positions, geo }
        })
        .collect();

    // Road position cannot decrease along the fiber.
    let placed: Vec<usize> = (0..k_total).filter(|&k| placements[k].road_position_m.is_some()).collect();
    let fitted = isotonic(&placed.iter().map(|&k| placements[k].road_position_m.unwrap()).collect::<Vec<_>>());
    for (&k, v) in placed.iter().zip(fitted) {
        placements[k].road_position_m = Some(v);
    }
    Ok(placements)
}

/// Signed transmissibility per channel: mean signed quasi-static amplitude of
/// the test vehicle over the runs, divided by its weight. Channels without a
/// position, or without a measurable event, get `None`.
pub fn estimate_transmissibility(
    das: &ChannelMatrix,
    runs: &[GpsTrack],
    positions: &[Option<f64>],
    offset_s: f64,
    test_weight_tons: f64,
    cfg: &AmplitudeConfig,
) -> Result<Vec<Option<f64>>> {
    if !(test_weight_tons > 0.0 && test_weight_tons.is_finite()) {
        return Err(Error::InvalidArgument(format!("test weight must be positive, got {test_weight_tons}")));
    }
    if positions.len() > das.channel_count() {
        return Err(Error::InvalidArgument("more positions than channels".into()));
    }
    Ok(positions
        .par_iter()
        .enumerate()
        .map(|(k, pos)| {
            let p = (*pos)?;
            let raw = das.channel(k);
            let amps: Vec<f64> = runs
                .iter()
                .filter_map(|run| {
                    let t = run.time_at(p)? - offset_s;
                    quasistatic_amplitude(raw, das.sample_rate_hz(), das.start_time(), t, None, cfg).map(|a| a.0)
                })
                .collect();
            let a = mean(&amps)?;
            (a != 0.0 && a.is_finite()).then(|| a / test_weight_tons)
        })
        .collect())
}

/// Transmissibility expected in another lane, from the ratio of the
/// gauge-averaged half-space responses at the two lane offsets.
pub fn extrapolate_lane(t_near: f64, near_offset_m: f64, far_offset_m: f64, geometry: &FiberGeometry) -> Result<f64> {
    if !(near_offset_m > 0.0 && far_offset_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lane offsets must be positive, got {near_offset_m} and {far_offset_m}"
        )));
    }
    geometry.validate()?;
    if near_offset_m == far_offset_m {
        return Ok(t_near);
    }
    Ok(t_near * gauge_peak(far_offset_m, geometry)? / gauge_peak(near_offset_m, geometry)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub test_weight_tons: f64,
    pub geolocate: GeolocateConfig,
    pub amplitude: AmplitudeConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { test_weight_tons: 1.47, geolocate: GeolocateConfig::default(), amplitude: AmplitudeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub table: CalibrationTable,
    pub clock: ClockSync,
    pub placements: Vec<ChannelPlacement>,
}

/// Full driving-test calibration: sync, geo-localize, measure transmissibility.
pub fn calibrate(das: &ChannelMatrix, runs: &[GpsTrack], taps: &[TapEvent], cfg: &CalibrationConfig) -> Result<Calibration> {
    let clock = sync_clocks(taps)?;
    let placements = geolocate_channels(das, runs, clock.offset_s, &cfg.geolocate)?;
    let positions: Vec<Option<f64>> = placements.iter().map(|p| p.road_position_m).collect();
    let t = estimate_transmissibility(das, runs, &positions, clock.offset_s, cfg.test_weight_tons, &cfg.amplitude)?;
    let entries = placements
        .iter()
        .zip(&t)
        .map(|(p, t)| match (p.road_position_m, t) {
            (Some(x), Some(t)) => Ok(ChannelCalibration::coupled(p.channel, x, *t)?.with_geo(p.geo)),
            _ => Ok(ChannelCalibration::spooled(p.channel, None)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration { table: CalibrationTable::new(entries)?, clock, placements })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tap_offset() {
        let s = sync_clocks(&[TapEvent { das_time_s: 10.0, reference_time_s: 12.5 }]).unwrap();
        assert!((s.offset_s - 2.5).abs() < 1e-12);
        assert_eq!(s.spread_s, None);
    }

    #[test]
    fn two_tap_mean_and_spread() {
        let s = sync_clocks(&[
            TapEvent { das_time_s: 10.0, reference_time_s: 12.5 },
            TapEvent { das_time_s: 20.0, reference_time_s: 22.7 },
        ])
        .unwrap();
        assert!((s.offset_s - 2.6).abs() < 1e-12);
        assert!((s.spread_s.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn no_taps_is_an_error() {
        assert!(sync_clocks(&[]).is_err());
    }

    #[test]
    fn extrapolation_identity_and_decay() {
        let g = FiberGeometry::default();
        assert_eq!(extrapolate_lane(-1234.0, 3.0, 3.0, &g).unwrap(), -1234.0);
        let far = extrapolate_lane(-1234.0, 3.0, 6.0, &g).unwrap();
        assert!(far < 0.0 && far.abs() < 1234.0);
        assert!(extrapolate_lane(1.0, 0.0, 3.0, &g).is_err());
    }

    #[test]
    fn isotonic_pools_violations() {
        assert_eq!(isotonic(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic(&[5.0, 4.0, 3.0]), vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn gps_interpolation_and_inverse() {
        let frame = crate::geo::LocalFrame::new(GeoPoint { lat: 37.0, lon: -122.0 });
        let road = Centerline::new(vec![frame.to_geo(0.0, 0.0), frame.to_geo(1000.0, 0.0)]).unwrap();
        let samples = (0..10)
            .map(|i| {
                let p = frame.to_geo(100.0 + 10.0 * i as f64, 2.0);
                (50.0 + i as f64, p.lat, p.lon)
            })
            .collect();
        let track = GpsTrack::new(samples).unwrap().projected_onto(&road);
        assert!((track.position_at(53.5).unwrap() - 135.0).abs() < 1e-6);
        assert!((track.time_at(162.0).unwrap() - 56.2).abs() < 1e-6);
        assert_eq!(track.position_at(70.0), None);
    }
}
