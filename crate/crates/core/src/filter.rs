//! Filter bank separating the quasi-static (< 1 Hz) component from the
//! wheel-induced surface waves (>= 3 Hz), plus LOESS smoothing.
//!
//! Both band filters are 4th-order Butterworth designs applied forward and
//! backward, so arrival times are not shifted by group delay. Edges are
//! handled with odd extension and steady-state initial conditions, which
//! keeps the filters linear in their input.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cutoff of the quasi-static low-pass.
pub const QUASISTATIC_CUTOFF_HZ: f64 = 1.0;
/// Cutoff of the wheel-impulse high-pass.
pub const WHEEL_CUTOFF_HZ: f64 = 3.0;

/// Upper edge of the wheel-impulse band.
pub const WHEEL_UPPER_HZ: f64 = 20.0;

const ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    // a0 normalized to 1
    a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II state for a constant input `u` in steady state.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let y = self.dc_gain() * u;
        let z2 = self.b[2] * u - self.a[1] * y;
        let z1 = self.b[1] * u - self.a[0] * y + z2;
        [z1, z2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    LowPass,
    HighPass,
}

/// Butterworth filter as cascaded second-order sections, applied zero-phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroPhaseFilter {
    sections: Vec<Biquad>,
    pad: usize,
}

impl ZeroPhaseFilter {
    /// Even-order Butterworth design via the bilinear transform with prewarping.
    pub fn butterworth(band: Band, order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        if order == 0 || !order.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("order must be even and positive, got {order}")));
        }
        if !(cutoff_hz > 0.0 && sample_rate_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
                sample_rate_hz / 2.0
            )));
        }
        let k = (PI * cutoff_hz / sample_rate_hz).tan();
        let k2 = k * k;
        let sections = (0..order / 2)
            .map(|i| {
                let zeta = (PI * (2 * i + 1) as f64 / (2 * order) as f64).sin();
                let d = 1.0 + 2.0 * zeta * k + k2;
                let a = [2.0 * (k2 - 1.0) / d, (1.0 - 2.0 * zeta * k + k2) / d];
                let b = match band {
                    Band::LowPass => [k2 / d, 2.0 * k2 / d, k2 / d],
                    Band::HighPass => [1.0 / d, -2.0 / d, 1.0 / d],
                };
                Biquad { b, a }
            })
            .collect();
        // Three cutoff periods of edge padding.
        let pad = (3.0 * sample_rate_hz / cutoff_hz).ceil() as usize;
        Ok(Self { sections, pad })
    }

    fn run(&self, x: &mut [f64]) {
        let x0 = x.first().copied().unwrap_or(0.0);
        let mut scale = 1.0;
        for s in &self.sections {
            let [mut z1, mut z2] = s.steady_state(x0 * scale);
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[0] * y + z2;
                z2 = s.b[2] * xin - s.a[1] * y;
                *v = y;
            }
            scale *= s.dc_gain();
        }
    }

    /// Forward-backward filtering with odd-extension padding. Works for any
    /// length >= 2; callers enforce their own minimum lengths.
    pub fn apply(&self, series: &[f64]) -> Vec<f64> {
        let n = series.len();
        if n < 2 {
            return series.to_vec();
        }
        let pad = self.pad.min(n - 1);
        let first = series[0];
        let last = series[n - 1];
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - series[i]));
        ext.extend_from_slice(series);
        ext.extend((1..=pad).map(|i| 2.0 * last - series[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

fn check_finite(series: &[f64]) -> Result<()> {
    match series.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn fixed_cutoff(series: &[f64], band: Band, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Vec<f64>> {
    let required = (4.0 * sample_rate_hz / cutoff_hz).ceil() as usize;
    if series.len() < required {
        return Err(Error::SeriesTooShort { required, actual: series.len() });
    }
    check_finite(series)?;
    Ok(ZeroPhaseFilter::butterworth(band, ORDER, cutoff_hz, sample_rate_hz)?.apply(series))
}

/// Zero-phase 1 Hz low-pass isolating the quasi-static component.
pub fn lowpass_quasistatic(series: &[f64], sample_rate_hz: f64) -> Result<Vec<f64>> {
    fixed_cutoff(series, Band::LowPass, QUASISTATIC_CUTOFF_HZ, sample_rate_hz)
}

/// Zero-phase 3 Hz high-pass isolating wheel-induced vibration.
pub fn highpass_wheel(series: &[f64], sample_rate_hz: f64) -> Result<Vec<f64>> {
    fixed_cutoff(series, Band::HighPass, WHEEL_CUTOFF_HZ, sample_rate_hz)
}

/// [`highpass_wheel`] followed by a zero-phase 20 Hz low-pass, keeping the
/// band in which wheel-induced surface waves carry their energy.
pub fn bandpass_wheel(series: &[f64], sample_rate_hz: f64) -> Result<Vec<f64>> {
    let high = highpass_wheel(series, sample_rate_hz)?;
    if WHEEL_UPPER_HZ >= 0.5 * sample_rate_hz {
        return Ok(high);
    }
    Ok(ZeroPhaseFilter::butterworth(Band::LowPass, ORDER, WHEEL_UPPER_HZ, sample_rate_hz)?.apply(&high))
}

/// Locally weighted linear regression with tricube weights.
///
/// Each output sample is the value at that sample of a weighted degree-1 fit
/// over the samples within `span_s / 2` on either side. Near the ends the
/// window is truncated (never shifted inward), with the bandwidth unchanged.
pub fn loess_smooth(series: &[f64], sample_rate_hz: f64, span_s: f64) -> Result<Vec<f64>> {
    if !(sample_rate_hz > 0.0) {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    if !(span_s > 2.0 / sample_rate_hz) {
        return Err(Error::InvalidArgument(format!(
            "span {span_s} s must exceed two samples ({} s)",
            2.0 / sample_rate_hz
        )));
    }
    check_finite(series)?;
    let n = series.len();
    let half = ((span_s * sample_rate_hz / 2.0).floor() as usize).max(1);
    let bandwidth = (half + 1) as f64;
    // weights[j] for offset j in 0..=half
    let weights: Vec<f64> = (0..=half)
        .map(|j| {
            let u = j as f64 / bandwidth;
            let c = 1.0 - u * u * u;
            c * c * c
        })
        .collect();

    let mut out = vec![0.0; n];
    if n == 0 {
        return Ok(out);
    }
    let fit = |i: usize| -> f64 {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (j, &y) in series.iter().enumerate().take(hi + 1).skip(lo) {
            let u = j as f64 - i as f64;
            let w = weights[j.abs_diff(i)];
            s0 += w;
            s1 += w * u;
            s2 += w * u * u;
            t0 += w * y;
            t1 += w * u * y;
        }
        let det = s0 * s2 - s1 * s1;
        if det.abs() <= f64::EPSILON * s0 * s2 {
            t0 / s0
        } else {
            (s2 * t0 - s1 * t1) / det
        }
    };

    if n <= 2 * half {
        for (i, o) in out.iter_mut().enumerate() {
            *o = fit(i);
        }
        return Ok(out);
    }
    // Interior: the symmetric window makes the slope term vanish and the
    // fit reduces to a normalized kernel average.
    let norm: f64 = weights[0] + 2.0 * weights[1..].iter().sum::<f64>();
    let kernel: Vec<f64> = (0..=2 * half).map(|j| weights[j.abs_diff(half)] / norm).collect();
    for i in half..n - half {
        let window = &series[i - half..=i + half];
        out[i] = window.iter().zip(&kernel).map(|(x, w)| x * w).sum();
    }
    for i in (0..half).chain(n - half..n) {
        out[i] = fit(i);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 250.0;

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / FS).sin()).collect()
    }

    fn bell(n: usize, center_s: f64, sigma_s: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / FS - center_s;
                (-0.5 * t * t / (sigma_s * sigma_s)).exp()
            })
            .collect()
    }

    #[test]
    fn lowpass_preserves_constant() {
        let out = lowpass_quasistatic(&vec![3.7; 2000], FS).unwrap();
        for v in out {
            assert!((v - 3.7).abs() <= 3.7e-3);
        }
    }

    #[test]
    fn lowpass_rejects_10hz() {
        let x = sine(10.0, 5000);
        let y = lowpass_quasistatic(&x, FS).unwrap();
        // Away from the edges the response is the squared magnitude, about 1e-8.
        let ratio = rms(&y[1000..4000]) / rms(&x[1000..4000]);
        assert!(ratio < 1e-4, "ratio {ratio}");
        assert!(rms(&y) / rms(&x) <= 0.05);
    }

    #[test]
    fn lowpass_recovers_bell_under_10hz() {
        // A bell with sigma 0.8 s concentrates its energy below 0.2 Hz.
        let n = 5000;
        let b = bell(n, 10.0, 0.8);
        let s = sine(10.0, n);
        let mixed: Vec<f64> = b.iter().zip(&s).map(|(a, c)| a + 0.5 * c).collect();
        let y = lowpass_quasistatic(&mixed, FS).unwrap();
        let peak = y.iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak - 1.0).abs() <= 0.02, "peak {peak}");
    }

    #[test]
    fn lowpass_too_short_names_minimum() {
        match lowpass_quasistatic(&[0.0; 999], FS) {
            Err(Error::SeriesTooShort { required, actual }) => {
                assert_eq!(required, 1000);
                assert_eq!(actual, 999);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn highpass_removes_constant() {
        let x = vec![-2.5; 1000];
        let y = highpass_wheel(&x, FS).unwrap();
        let bound = 1e-6 * rms(&x);
        assert!(y.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn highpass_keeps_impulse_spacing() {
        let n = 1000;
        let mut x = vec![0.0; n];
        x[400] = 1.0;
        x[475] = 1.0; // 0.3 s later
        let y = highpass_wheel(&x, FS).unwrap();
        let argmax = |lo: usize, hi: usize| {
            (lo..hi).max_by(|&a, &b| y[a].abs().total_cmp(&y[b].abs())).unwrap()
        };
        let first = argmax(350, 437);
        let second = argmax(438, 525);
        assert!((first as i64 - 400).abs() <= 1);
        assert!(((second - first) as i64 - 75).abs() <= 1);
    }

    #[test]
    fn highpass_stopband_leakage_on_slow_bell() {
        let x = bell(5000, 10.0, 0.8);
        let y = highpass_wheel(&x, FS).unwrap();
        let peak = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(peak <= 0.05, "peak {peak}");
    }

    #[test]
    fn loess_reproduces_line() {
        let x: Vec<f64> = (0..700).map(|i| 0.3 * i as f64 / FS - 4.0).collect();
        let y = loess_smooth(&x, FS, 1.0).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn loess_suppresses_outlier() {
        let mut x: Vec<f64> = (0..1000).map(|i| 0.01 * i as f64).collect();
        let base = x[500];
        x[500] += 100.0;
        let y = loess_smooth(&x, FS, 1.0).unwrap();
        assert!((y[500] - base).abs() < 10.0);
    }

    #[test]
    fn loess_reports_first_bad_index() {
        let mut x = vec![0.0; 100];
        x[17] = f64::INFINITY;
        x[40] = f64::NAN;
        assert!(matches!(loess_smooth(&x, FS, 1.0), Err(Error::NonFinite { index: 17 })));
        assert!(loess_smooth(&x, FS, 0.008).is_err());
    }

    #[test]
    fn loess_short_series_still_smooths() {
        let x = vec![1.0, 2.0, 3.0];
        let y = loess_smooth(&x, FS, 1.0).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
