//! Per-vehicle wheelbase and weight estimates for completed tracks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::extrapolate_lane;
use crate::detect::{quasistatic_amplitude, AmplitudeConfig};
use crate::filter::bandpass_wheel;
use crate::sim::FiberGeometry;
use crate::stats::{median, noise_sigma, std_dev};
use crate::track::VehicleTrack;
use crate::{CalibrationTable, ChannelMatrix, Direction, Error, Result};

/// Channels at most this far apart belong to the same road feature.
const FEATURE_GAP: usize = 2;

/// A positive estimate with its spread over the channels or features that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// Sample standard deviation of the per-channel (weight) or per-feature
    /// (wheelbase) values; 0 for a single value.
    pub spread: f64,
    pub n_channels: usize,
}

impl Estimate {
    fn from_values(value: f64, values: &[f64]) -> Self {
        Self { value, spread: std_dev(values).unwrap_or(0.0), n_channels: values.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleCharacter {
    pub track_id: usize,
    /// `None` when no feature channel had a usable wheel signature.
    pub wheelbase_m: Option<Estimate>,
    /// `None` when no associated channel had a usable amplitude.
    pub weight_tons: Option<Estimate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WheelbaseConfig {
    /// Wheelbases searched, in metres; sets the lag range at each channel's speed.
    pub min_m: f64,
    pub max_m: f64,
    /// The window spans half the largest lag plus this margin on each side
    /// of the arrival.
    pub margin_s: f64,
    /// Channels whose largest high-passed value in the window is below this
    /// many noise deviations are skipped.
    pub min_snr: f64,
    /// Smallest accepted autocorrelation at the chosen lag relative to lag
    /// zero; two equal impulses give one half.
    pub min_correlation: f64,
}

impl Default for WheelbaseConfig {
    fn default() -> Self {
        Self { min_m: 1.5, max_m: 12.0, margin_s: 0.3, min_snr: 5.0, min_correlation: 0.2 }
    }
}

impl WheelbaseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_m > 0.0 && self.max_m > self.min_m && self.margin_s >= 0.0 && self.min_snr >= 0.0 && self.min_correlation < 1.0) {
            return Err(Error::Config(format!("invalid wheelbase settings {self:?}")));
        }
        Ok(())
    }
}

/// Autocorrelation of `x` at lags `0..=max_lag`, divided by the lag-zero value.
pub fn normalized_autocorrelation(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let r = |tau: usize| x.iter().zip(&x[tau..]).map(|(a, b)| a * b).sum::<f64>();
    let r0 = r(0);
    if !(r0 > 0.0 && r0.is_finite()) {
        return None;
    }
    Some((0..=max_lag.min(x.len().saturating_sub(1))).map(|tau| r(tau) / r0).collect())
}

/// Strongest lag of an autocorrelation curve within `lags` (samples),
/// refined by a parabola through its neighbours, with the curve's value
/// there. Lags inside the zero-lag lobe, before the curve first turns
/// non-positive, are not considered.
pub fn lag_peak(r: &[f64], lags: std::ops::RangeInclusive<usize>) -> Option<(f64, f64)> {
    let first_zero = r.iter().position(|&v| v <= 0.0)?;
    let (lo, hi) = ((*lags.start()).max(first_zero).max(1), (*lags.end()).min(r.len().saturating_sub(2)));
    if lo > hi {
        return None;
    }
    let best = (lo..=hi).max_by(|&a, &b| r[a].total_cmp(&r[b]))?;
    let peak = r[best];
    if peak <= 0.0 {
        return None;
    }
    let (left, right) = (r[best - 1], r[best + 1]);
    let denom = left - 2.0 * peak + right;
    let shift = if denom < 0.0 { (0.5 * (left - right) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    Some((best as f64 + shift, peak))
}

/// [`lag_peak`] of the normalized autocorrelation of `x`.
pub fn autocorrelation_peak(x: &[f64], lags: std::ops::RangeInclusive<usize>) -> Option<(f64, f64)> {
    let r = normalized_autocorrelation(x, *lags.end() + 1)?;
    lag_peak(&r, lags)
}

// Per-channel autocorrelation around one arrival.
struct ChannelCurve {
    channel: usize,
    speed_mps: f64,
    r: Vec<f64>,
}

fn channel_curve(
    das: &ChannelMatrix,
    channel: usize,
    time_s: f64,
    speed_mps: f64,
    cfg: &WheelbaseConfig,
) -> Result<Option<ChannelCurve>> {
    let fs = das.sample_rate_hz();
    let tau_max = cfg.max_m / speed_mps;
    // The arrival is the vehicle center crossing, midway between the axles.
    let half = 0.5 * tau_max + cfg.margin_s;
    // Filter a padded slice so edge transients stay out of the window.
    let pad = 2.0;
    let n = das.sample_count();
    let a = das.sample_of(time_s - half - pad).floor().max(0.0) as usize;
    let b = (das.sample_of(time_s + half + pad).ceil().max(0.0) as usize).min(n);
    if b <= a + 8 {
        return Ok(None);
    }
    let high = bandpass_wheel(&das.channel(channel)[a..b], fs)?;
    let wa = das.sample_of(time_s - half).floor().max(a as f64) as usize - a;
    let wb = (das.sample_of(time_s + half).ceil() as usize).min(b) - a;
    if wb <= wa + 8 {
        return Ok(None);
    }
    let window = &high[wa..wb];
    let peak = window.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak < cfg.min_snr * noise_sigma(&high) {
        return Ok(None);
    }
    let max_lag = (tau_max * fs).floor() as usize + 1;
    Ok(normalized_autocorrelation(window, max_lag).map(|r| ChannelCurve { channel, speed_mps, r }))
}

/// Wheelbase from the time between axle impulses at road-feature channels.
///
/// Both axles strike a feature at the same instants for every channel near
/// it, so the autocorrelations of adjacent feature channels are summed
/// before the lag search; each feature yields one value and the estimate is
/// their median. Channels where one of `others` passes inside the analysis
/// window are skipped, since its impulses would pair with this vehicle's.
pub fn estimate_wheelbase(
    track: &VehicleTrack,
    others: &[&VehicleTrack],
    das: &ChannelMatrix,
    feature_channels: &[usize],
    cfg: &WheelbaseConfig,
) -> Result<Option<Estimate>> {
    cfg.validate()?;
    let fs = das.sample_rate_hz();
    let mut curves = Vec::new();
    for kin in track.kinematics() {
        if !feature_channels.contains(&kin.channel) || kin.channel >= das.channel_count() {
            continue;
        }
        let window = cfg.max_m / kin.speed_mps + 2.0 * cfg.margin_s;
        let crowded = others
            .iter()
            .any(|o| o.step(kin.channel).is_some_and(|s| (s.smoothed.time() - kin.time_s).abs() < window));
        if crowded {
            continue;
        }
        if let Some(c) = channel_curve(das, kin.channel, kin.time_s, kin.speed_mps, cfg)? {
            curves.push(c);
        }
    }
    curves.sort_by_key(|c| c.channel);
    let mut groups: Vec<Vec<&ChannelCurve>> = Vec::new();
    for c in &curves {
        match groups.last_mut() {
            Some(g) if c.channel <= g[g.len() - 1].channel + FEATURE_GAP => g.push(c),
            _ => groups.push(vec![c]),
        }
    }
    let mut values = Vec::new();
    let mut used = 0;
    for g in groups {
        let v = g.iter().map(|c| c.speed_mps).sum::<f64>() / g.len() as f64;
        let len = g.iter().map(|c| c.r.len()).min().unwrap_or(0);
        let stacked: Vec<f64> = (0..len).map(|i| g.iter().map(|c| c.r[i]).sum::<f64>() / g.len() as f64).collect();
        let lags = (cfg.min_m / v * fs).ceil().max(1.0) as usize..=(cfg.max_m / v * fs).floor() as usize;
        if let Some((lag, rho)) = lag_peak(&stacked, lags) {
            if rho >= cfg.min_correlation {
                values.push(lag / fs * v);
                used += g.len();
            }
        }
    }
    Ok(median(&values).map(|m| Estimate { value: m, spread: std_dev(&values).unwrap_or(0.0), n_channels: used }))
}

/// Mean of `P_k / |T_k|` over the given pairs; pairs with non-positive
/// amplitude or zero transmissibility are skipped.
pub fn weight_from_amplitudes(pairs: &[(f64, f64)]) -> Option<Estimate> {
    let values: Vec<f64> = pairs
        .iter()
        .filter(|(p, t)| *p > 0.0 && t.abs() > 0.0 && p.is_finite() && t.is_finite())
        .map(|(p, t)| p / t.abs())
        .collect();
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some(Estimate::from_values(mean, &values))
}

/// Lane geometry used to carry calibration-lane transmissibility to the lane
/// a track drives in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaneModel {
    /// Lateral fiber-to-lane distance of the driving-test runs.
    pub calibration_lane_m: f64,
    pub outbound_lane_m: f64,
    pub inbound_lane_m: f64,
    pub geometry: FiberGeometry,
}

impl Default for LaneModel {
    fn default() -> Self {
        Self { calibration_lane_m: 3.0, outbound_lane_m: 3.0, inbound_lane_m: 5.0, geometry: FiberGeometry::default() }
    }
}

impl LaneModel {
    /// Factor applied to calibrated transmissibility for a given travel direction.
    pub fn scale(&self, direction: Direction) -> Result<f64> {
        let lane = match direction {
            Direction::Outbound => self.outbound_lane_m,
            Direction::Inbound => self.inbound_lane_m,
        };
        extrapolate_lane(1.0, self.calibration_lane_m, lane, &self.geometry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    pub amplitude: AmplitudeConfig,
    pub lanes: LaneModel,
    /// Channels where another track passes within this many seconds are left
    /// out, since the other vehicle's bell adds to the amplitude.
    pub isolation_s: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { amplitude: AmplitudeConfig::default(), lanes: LaneModel::default(), isolation_s: 1.0 }
    }
}

/// Weight from the quasi-static amplitudes at the track's associated channels,
/// skipping channels that `others` pass within `isolation_s`.
pub fn estimate_weight(
    track: &VehicleTrack,
    others: &[&VehicleTrack],
    das: &ChannelMatrix,
    calib: &CalibrationTable,
    cfg: &WeightConfig,
) -> Result<Option<Estimate>> {
    let scale = cfg.lanes.scale(track.direction)?;
    let crowded = |channel: usize, t: f64| {
        others.iter().any(|o| o.step(channel).is_some_and(|s| (s.smoothed.time() - t).abs() < cfg.isolation_s))
    };
    let pairs: Vec<(f64, f64)> = track
        .detections()
        .filter(|d| d.channel < das.channel_count() && !crowded(d.channel, d.arrival_time_s))
        .filter_map(|d| {
            let c = calib.get(d.channel)?;
            let t = c.transmissibility()? * scale;
            let polarity = c.pattern().polarity();
            let (amp, _) = quasistatic_amplitude(
                das.channel(d.channel),
                das.sample_rate_hz(),
                das.start_time(),
                d.arrival_time_s,
                polarity,
                &cfg.amplitude,
            )?;
            // Signed amplitude of the expected polarity; opposite-sign values carry no weight.
            Some((amp * t.signum(), t))
        })
        .collect();
    Ok(weight_from_amplitudes(&pairs))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CharacterizeConfig {
    pub feature_channels: Vec<usize>,
    pub wheelbase: WheelbaseConfig,
    pub weight: WeightConfig,
}

pub fn characterize_tracks(
    tracks: &[VehicleTrack],
    das: &ChannelMatrix,
    calib: &CalibrationTable,
    cfg: &CharacterizeConfig,
) -> Result<Vec<VehicleCharacter>> {
    tracks
        .par_iter()
        .enumerate()
        .map(|(i, track)| {
            let others: Vec<&VehicleTrack> =
                tracks.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t).collect();
            Ok(VehicleCharacter {
                track_id: track.id,
                wheelbase_m: estimate_wheelbase(track, &others, das, &cfg.feature_channels, &cfg.wheelbase)?,
                weight_tons: estimate_weight(track, &others, das, calib, &cfg.weight)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulses(fs: f64, gap_s: f64, len: usize, amp: f64) -> Vec<f64> {
        let mut x = vec![0.0; len];
        for start in [0.3, 0.3 + gap_s] {
            for (i, v) in x.iter_mut().enumerate() {
                let tau = i as f64 / fs - start;
                if tau >= 0.0 {
                    *v += amp * (-tau / 0.04).exp() * (2.0 * std::f64::consts::PI * 8.0 * tau).sin();
                }
            }
        }
        x
    }

    #[test]
    fn autocorrelation_recovers_impulse_gap() {
        let fs = 250.0;
        for (gap, v) in [(0.3, 10.0), (0.15, 20.0)] {
            let x = impulses(fs, gap, 500, 1.0);
            let lags = (1.5 / v * fs).ceil() as usize..=(12.0 / v * fs).floor() as usize;
            let (lag, rho) = autocorrelation_peak(&x, lags).unwrap();
            assert!(rho > 0.3 && rho < 0.55, "{rho}");
            let wheelbase = lag / fs * v;
            assert!((wheelbase - 3.0).abs() <= v / fs, "{wheelbase}");
        }
    }

    #[test]
    fn autocorrelation_is_scale_invariant() {
        let x = impulses(250.0, 0.27, 400, 1.0);
        let y: Vec<f64> = x.iter().map(|v| v * 37.5).collect();
        let (a, b) = (autocorrelation_peak(&x, 20..=200).unwrap(), autocorrelation_peak(&y, 20..=200).unwrap());
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn weight_inverts_construction() {
        let w = 1.47;
        let pairs: Vec<(f64, f64)> =
            (0..50).map(|k| 300.0 + 41.0 * k as f64).map(|t: f64| (w * t, if k_odd(t) { -t } else { t })).collect();
        let est = weight_from_amplitudes(&pairs).unwrap();
        assert!((est.value - w).abs() < 1e-9);
        assert_eq!(est.n_channels, 50);
    }

    fn k_odd(t: f64) -> bool {
        (t as i64) % 2 == 1
    }

    #[test]
    fn no_usable_channel_is_no_estimate() {
        assert_eq!(weight_from_amplitudes(&[]), None);
        assert_eq!(weight_from_amplitudes(&[(-1.0, 5.0)]), None);
    }

    #[test]
    fn lane_scale_is_one_in_calibration_lane() {
        let lanes = LaneModel::default();
        assert_eq!(lanes.scale(Direction::Outbound).unwrap(), 1.0);
        let far = lanes.scale(Direction::Inbound).unwrap();
        assert!(far > 0.0 && far < 1.0);
    }
}
