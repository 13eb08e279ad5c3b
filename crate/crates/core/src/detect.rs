//! Per-sensor vehicle detection: LOESS smoothing followed by topographic
//! prominence screening with a threshold scaled by each sensor's
//! transmissibility.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::filter::loess_smooth;
use crate::stats::median;
use crate::{CalibrationTable, ChannelCalibration, ChannelMatrix, Detection, Error, Polarity, Result};

/// How far the prominence reference region extends from an extremum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Reach {
    /// At most this many seconds on either side.
    Bounded(f64),
    /// Up to the nearest higher extremum or the series edge.
    Unbounded,
}

/// A local extremum with its prominence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremum {
    /// Sample index (middle of a plateau).
    pub index: usize,
    /// Seconds from the first sample, refined by parabolic interpolation.
    pub time_s: f64,
    pub prominence: f64,
}

// Sparse table for O(1) range-minimum queries.
struct MinTable {
    levels: Vec<Vec<f64>>,
}

impl MinTable {
    fn new(x: &[f64]) -> Self {
        let mut levels = vec![x.to_vec()];
        let mut width = 1;
        while 2 * width <= x.len() {
            let prev = levels.last().unwrap();
            let next: Vec<f64> = (0..=x.len() - 2 * width).map(|i| prev[i].min(prev[i + width])).collect();
            levels.push(next);
            width *= 2;
        }
        Self { levels }
    }

    /// Minimum over `lo..=hi`.
    fn min(&self, lo: usize, hi: usize) -> f64 {
        let len = hi - lo + 1;
        let k = usize::BITS as usize - 1 - len.leading_zeros() as usize;
        self.levels[k][lo].min(self.levels[k][hi + 1 - (1 << k)])
    }
}

/// Indices of local maxima; plateaus report their middle sample. The first and
/// last samples are never maxima.
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                out.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

fn parabolic_offset(y0: f64, y1: f64, y2: f64) -> f64 {
    let denom = y0 - 2.0 * y1 + y2;
    if denom == 0.0 || !denom.is_finite() {
        0.0
    } else {
        (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
    }
}

/// All local extrema of the given polarity with their topographic prominence.
///
/// For a peak, the reference on each side is the lowest sample between the
/// peak and the nearest strictly higher sample (or the reach limit, or the
/// series edge); prominence is the height above the higher of the two.
/// Valleys are peaks of the negated series.
pub fn prominence_scan(series: &[f64], sample_rate_hz: f64, reach: Reach, polarity: Polarity) -> Vec<Extremum> {
    let x: Vec<f64> = series.iter().map(|v| polarity.sign() * v).collect();
    let n = x.len();
    let peaks = local_maxima(&x);
    if peaks.is_empty() {
        return Vec::new();
    }
    let w = match reach {
        Reach::Bounded(s) => ((s * sample_rate_hz).round().max(1.0)) as usize,
        Reach::Unbounded => n,
    };
    // Nearest strictly greater neighbour on each side via monotonic stacks.
    let mut left_greater = vec![None; n];
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..n {
        while let Some(&top) = stack.last() {
            if x[top] > x[i] {
                break;
            }
            stack.pop();
        }
        left_greater[i] = stack.last().copied();
        stack.push(i);
    }
    let mut right_greater = vec![None; n];
    stack.clear();
    for i in (0..n).rev() {
        while let Some(&top) = stack.last() {
            if x[top] > x[i] {
                break;
            }
            stack.pop();
        }
        right_greater[i] = stack.last().copied();
        stack.push(i);
    }
    let table = MinTable::new(&x);
    peaks
        .into_iter()
        .map(|i| {
            let lo = left_greater[i].map_or(0, |j| j + 1).max(i.saturating_sub(w));
            let hi = right_greater[i].map_or(n - 1, |j| j - 1).min(i + w);
            let reference = table.min(lo, i).max(table.min(i, hi));
            let delta = parabolic_offset(x[i - 1], x[i], x[i + 1]);
            Extremum { index: i, time_s: (i as f64 + delta) / sample_rate_hz, prominence: x[i] - reference }
        })
        .collect()
}

/// How the one-second window of the detection rule is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Prominence references are searched within +/- window_s / 2.
    BoundedProminence,
    /// Unbounded prominence, then at most one detection per window_s.
    OnePerWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Prominence threshold at the least transmissive sensor.
    pub r0: f64,
    pub window_s: f64,
    pub span_s: f64,
    pub mode: WindowMode,
    /// Detections closer than this on one channel are merged.
    pub min_separation_s: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { r0: 20.0, window_s: 1.0, span_s: 1.0, mode: WindowMode::BoundedProminence, min_separation_s: 0.2 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.window_s > 0.0 && self.span_s > 0.0 && self.min_separation_s >= 0.0) {
            return Err(Error::Config(format!("invalid detector config {self:?}")));
        }
        Ok(())
    }
}

/// Detections of one channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensorDetections {
    pub detections: Vec<Detection>,
    /// The channel is spooled and was not screened.
    pub spooled: bool,
}

/// Keep the most prominent extremum of every cluster closer than `separation` samples.
fn suppress(mut found: Vec<Extremum>, separation: f64) -> Vec<Extremum> {
    found.sort_by(|a, b| b.prominence.total_cmp(&a.prominence).then(a.index.cmp(&b.index)));
    let mut kept: Vec<Extremum> = Vec::with_capacity(found.len());
    for e in found {
        if kept.iter().all(|k| (k.index as f64 - e.index as f64).abs() >= separation) {
            kept.push(e);
        }
    }
    kept.sort_by_key(|e| e.index);
    kept
}

/// Screen one channel.
pub fn per_sensor_detect(
    series: &[f64],
    sample_rate_hz: f64,
    start_time: f64,
    calib: &ChannelCalibration,
    table: &CalibrationTable,
    cfg: &DetectorConfig,
) -> Result<SensorDetections> {
    cfg.validate()?;
    let (Some(t_k), Some(polarity)) = (calib.transmissibility(), calib.pattern().polarity()) else {
        return Ok(SensorDetections { detections: Vec::new(), spooled: true });
    };
    let t0 = table.t0().ok_or_else(|| Error::Data("calibration table has no coupled channels".into()))?;
    let threshold = cfg.r0 * t_k.abs() / t0;
    let smooth = loess_smooth(series, sample_rate_hz, cfg.span_s)?;
    let reach = match cfg.mode {
        WindowMode::BoundedProminence => Reach::Bounded(cfg.window_s / 2.0),
        WindowMode::OnePerWindow => Reach::Unbounded,
    };
    let candidates: Vec<Extremum> = prominence_scan(&smooth, sample_rate_hz, reach, polarity)
        .into_iter()
        .filter(|e| e.prominence >= threshold)
        .collect();
    let separation = match cfg.mode {
        WindowMode::BoundedProminence => cfg.min_separation_s,
        WindowMode::OnePerWindow => cfg.window_s.max(cfg.min_separation_s),
    } * sample_rate_hz;
    let detections = suppress(candidates, separation)
        .into_iter()
        .map(|e| Detection {
            channel: calib.channel(),
            arrival_time_s: start_time + e.time_s,
            prominence: e.prominence,
            polarity,
        })
        .collect();
    Ok(SensorDetections { detections, spooled: false })
}

/// Screen every calibrated channel; output ordered by (channel, time).
pub fn detect_all(das: &ChannelMatrix, table: &CalibrationTable, cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let per_channel: Result<Vec<Vec<Detection>>> = table
        .entries()
        .par_iter()
        .filter(|c| c.channel() < das.channel_count())
        .map(|c| {
            per_sensor_detect(das.channel(c.channel()), das.sample_rate_hz(), das.start_time(), c, table, cfg)
                .map(|r| r.detections)
        })
        .collect();
    Ok(per_channel?.into_iter().flatten().collect())
}

/// Settings for [`quasistatic_amplitude`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplitudeConfig {
    /// LOESS span of the light smoothing applied before measuring.
    pub span_s: f64,
    /// Half-width of the window searched for the extremum.
    pub search_s: f64,
    /// Baseline flanks cover `flank_inner_s..flank_outer_s` on both sides.
    pub flank_inner_s: f64,
    pub flank_outer_s: f64,
}

impl Default for AmplitudeConfig {
    fn default() -> Self {
        Self { span_s: 0.2, search_s: 0.15, flank_inner_s: 2.0, flank_outer_s: 3.0 }
    }
}

/// Signed quasi-static amplitude of an event near `time_s` (absolute).
///
/// The series is lightly smoothed, the extremum of the requested polarity
/// (or the larger deviation of either, when `polarity` is `None`) is found
/// within `search_s`, and its height is taken above the mean of the median
/// levels of the two flanks. Unlike the detection prominence this is nearly
/// independent of vehicle speed. Returns `(signed amplitude, extremum time)`.
pub fn quasistatic_amplitude(
    series: &[f64],
    sample_rate_hz: f64,
    start_time: f64,
    time_s: f64,
    polarity: Option<Polarity>,
    cfg: &AmplitudeConfig,
) -> Option<(f64, f64)> {
    let n = series.len() as isize;
    let center = ((time_s - start_time) * sample_rate_hz).round() as isize;
    let margin = ((cfg.flank_outer_s + cfg.span_s) * sample_rate_hz).ceil() as isize;
    let lo = (center - margin).max(0);
    let hi = (center + margin).min(n - 1);
    if center < 0 || center >= n || hi - lo < 4 {
        return None;
    }
    let local = &series[lo as usize..=hi as usize];
    let smooth = loess_smooth(local, sample_rate_hz, cfg.span_s).ok()?;
    let c = (center - lo) as usize;
    let idx = |s: f64| (s * sample_rate_hz).round() as usize;
    let (inner, outer) = (idx(cfg.flank_inner_s), idx(cfg.flank_outer_s));
    let mut levels = Vec::new();
    if c >= outer {
        levels.push(median(&smooth[c - outer..=c - inner])?);
    }
    if c + outer < smooth.len() {
        levels.push(median(&smooth[c + inner..=c + outer])?);
    }
    if levels.is_empty() {
        return None;
    }
    let baseline = levels.iter().sum::<f64>() / levels.len() as f64;
    let s = idx(cfg.search_s);
    let a = c.saturating_sub(s);
    let b = (c + s).min(smooth.len() - 1);
    let pick = |sign: f64| {
        (a..=b)
            .max_by(|&i, &j| (sign * smooth[i]).total_cmp(&(sign * smooth[j])))
            .map(|i| (smooth[i] - baseline, i))
    };
    let (value, i) = match polarity {
        Some(p) => pick(p.sign())?,
        None => {
            let up = pick(1.0)?;
            let down = pick(-1.0)?;
            if up.0.abs() >= down.0.abs() { up } else { down }
        }
    };
    Some((value, start_time + (lo as usize + i) as f64 / sample_rate_hz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ChannelCalibration;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(x: &[f64], w: usize) -> Vec<(usize, f64)> {
        let n = x.len();
        let mut out = Vec::new();
        for i in 1..n.saturating_sub(1) {
            // plateau-aware maximum test
            if !(x[i - 1] < x[i]) {
                continue;
            }
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if !(j + 1 < n && x[j + 1] < x[i]) {
                continue;
            }
            let p = (i + j) / 2;
            let mut left = x[p];
            let mut k = p;
            while k > 0 && p - k < w {
                k -= 1;
                if x[k] > x[p] {
                    break;
                }
                left = left.min(x[k]);
            }
            let mut right = x[p];
            let mut k = p;
            while k + 1 < n && k - p < w {
                k += 1;
                if x[k] > x[p] {
                    break;
                }
                right = right.min(x[k]);
            }
            out.push((p, x[p] - left.max(right)));
        }
        out
    }

    #[test]
    fn triangle_has_one_peak_of_full_height() {
        let x: Vec<f64> = (0..21).map(|i| 5.0 - (i as f64 - 10.0).abs() * 0.5).collect();
        let found = prominence_scan(&x, 1.0, Reach::Unbounded, Polarity::Peak);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].index, 10);
        assert!((found[0].prominence - 5.0).abs() < 1e-12);
        assert!((found[0].time_s - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_has_no_extrema() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(prominence_scan(&x, 1.0, Reach::Unbounded, Polarity::Peak).is_empty());
        assert!(prominence_scan(&x, 1.0, Reach::Unbounded, Polarity::Valley).is_empty());
    }

    #[test]
    fn plateau_reports_middle() {
        let x = [0.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 0.0];
        let found = prominence_scan(&x, 1.0, Reach::Unbounded, Polarity::Peak);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].index, 3);
    }

    #[test]
    fn matches_brute_force_on_quantized_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            // Quantized values exercise plateaus and ties.
            let x: Vec<f64> = (0..800).map(|_| (rng.random::<f64>() * 6.0).floor()).collect();
            for w in [3usize, 25, 10_000] {
                let reach = if w == 10_000 { Reach::Unbounded } else { Reach::Bounded(w as f64) };
                let ours: Vec<(usize, f64)> =
                    prominence_scan(&x, 1.0, reach, Polarity::Peak).iter().map(|e| (e.index, e.prominence)).collect();
                assert_eq!(ours, brute(&x, w), "trial {trial} w {w}");
            }
        }
    }

    #[test]
    fn valleys_are_negated_peaks() {
        let x = [0.0, -1.0, -3.0, -1.0, 0.5, -0.5, 0.0];
        let v = prominence_scan(&x, 1.0, Reach::Unbounded, Polarity::Valley);
        assert_eq!(v.iter().map(|e| e.index).collect::<Vec<_>>(), vec![2, 5]);
        assert!((v[0].prominence - 3.0).abs() < 1e-12);
    }

    #[test]
    fn parabolic_refinement_recovers_offset() {
        let x: Vec<f64> = (0..20).map(|i| -((i as f64 - 7.3).powi(2))).collect();
        let e = prominence_scan(&x, 1.0, Reach::Unbounded, Polarity::Peak);
        assert!((e[0].time_s - 7.3).abs() < 1e-9);
    }

    fn table() -> CalibrationTable {
        CalibrationTable::new(vec![
            ChannelCalibration::coupled(0, 0.0, 1000.0).unwrap(),
            ChannelCalibration::coupled(1, 1.0, -2000.0).unwrap(),
            ChannelCalibration::spooled(2, None),
        ])
        .unwrap()
    }

    fn bump(height: f64) -> Vec<f64> {
        (0..2500)
            .map(|i| {
                let t = i as f64 / 250.0 - 5.0;
                height * (-(t * t) / (2.0 * 0.25_f64.powi(2))).exp()
            })
            .collect()
    }

    #[test]
    fn spooled_channel_is_flagged() {
        let t = table();
        let r = per_sensor_detect(&bump(1.0), 250.0, 0.0, t.get(2).unwrap(), &t, &DetectorConfig::default()).unwrap();
        assert!(r.spooled && r.detections.is_empty());
    }

    #[test]
    fn bell_and_flipped_detection() {
        let t = table();
        let cfg = DetectorConfig::default();
        let up = per_sensor_detect(&bump(800.0), 250.0, 10.0, t.get(0).unwrap(), &t, &cfg).unwrap();
        assert_eq!(up.detections.len(), 1);
        assert!((up.detections[0].arrival_time_s - 15.0).abs() < 1.0 / 250.0);
        assert_eq!(up.detections[0].polarity, Polarity::Peak);
        let down = per_sensor_detect(&bump(-1600.0), 250.0, 10.0, t.get(1).unwrap(), &t, &cfg).unwrap();
        assert_eq!(down.detections.len(), 1);
        assert_eq!(down.detections[0].polarity, Polarity::Valley);
        assert!((down.detections[0].arrival_time_s - 15.0).abs() < 1.0 / 250.0);
    }

    #[test]
    fn close_candidates_are_merged() {
        let mut x = vec![0.0; 200];
        x[100] = 5.0;
        x[110] = 4.0;
        x[150] = 3.0;
        let found = prominence_scan(&x, 100.0, Reach::Unbounded, Polarity::Peak);
        let kept = suppress(found, 0.2 * 100.0);
        assert_eq!(kept.iter().map(|e| e.index).collect::<Vec<_>>(), vec![100, 150]);
    }

    #[test]
    fn amplitude_of_gaussian_bump_on_a_tilted_baseline() {
        let x: Vec<f64> = bump(500.0).iter().enumerate().map(|(i, v)| v + 0.01 * i as f64 + 7.0).collect();
        let (a, t) = quasistatic_amplitude(&x, 250.0, 0.0, 5.02, None, &AmplitudeConfig::default()).unwrap();
        // The light LOESS pass flattens a 0.25 s bump by about 1%.
        assert!((a / 500.0 - 1.0).abs() < 0.02, "amplitude {a}");
        assert!((t - 5.0).abs() < 0.01);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let (b, _) = quasistatic_amplitude(&neg, 250.0, 0.0, 5.02, None, &AmplitudeConfig::default()).unwrap();
        assert!((a + b).abs() < 1e-9);
    }
}
