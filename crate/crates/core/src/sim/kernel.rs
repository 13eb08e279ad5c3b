//! Boussinesq half-space response to a surface point load and its average
//! over the DAS gauge length.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Burial and interrogation geometry shared by all channels of a fiber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiberGeometry {
    pub depth_m: f64,
    pub gauge_length_m: f64,
}

impl Default for FiberGeometry {
    fn default() -> Self {
        Self { depth_m: 1.5, gauge_length_m: 10.0 }
    }
}

impl FiberGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_m > 0.0 && self.gauge_length_m > 0.0) {
            return Err(Error::Config(format!("invalid fiber geometry {self:?}")));
        }
        Ok(())
    }
}

fn check_offsets(lane_offset_m: f64, depth_m: f64) -> Result<()> {
    if !(lane_offset_m > 0.0 && lane_offset_m.is_finite()) {
        return Err(Error::InvalidArgument(format!("lane offset must be positive, got {lane_offset_m}")));
    }
    if !(depth_m > 0.0 && depth_m.is_finite()) {
        return Err(Error::InvalidArgument(format!("depth must be positive, got {depth_m}")));
    }
    Ok(())
}

/// Fiber strain under a point load of `weight_tons` at horizontal distance
/// `distance_along_road_m` along the fiber and `lane_offset_m` across it.
///
/// Uses the vertical-stress term of the Boussinesq solution,
/// `3 P z^3 / (2 pi R^5)`, in arbitrary units: calibration absorbs the
/// coupling constant, so only the shape matters downstream.
pub fn quasistatic_kernel(distance_along_road_m: f64, lane_offset_m: f64, depth_m: f64, weight_tons: f64) -> Result<f64> {
    check_offsets(lane_offset_m, depth_m)?;
    let r2 = distance_along_road_m.powi(2) + lane_offset_m.powi(2) + depth_m.powi(2);
    Ok(weight_tons * 3.0 * depth_m.powi(3) / (2.0 * PI * r2 * r2 * r2.sqrt()))
}

// Antiderivative of (a2 + s^2)^(-5/2) in s, odd in s.
fn antiderivative(s: f64, a2: f64) -> f64 {
    s * (2.0 * s * s + 3.0 * a2) / (3.0 * a2 * a2 * (a2 + s * s).powf(1.5))
}

/// Exact mean of [`quasistatic_kernel`] over a gauge window centered
/// `distance_along_road_m` from the load.
pub fn gauge_averaged_kernel(
    distance_along_road_m: f64,
    lane_offset_m: f64,
    geometry: &FiberGeometry,
    weight_tons: f64,
) -> Result<f64> {
    check_offsets(lane_offset_m, geometry.depth_m)?;
    Ok(gauge_averaged_unchecked(distance_along_road_m, lane_offset_m, geometry) * weight_tons)
}

pub(crate) fn gauge_averaged_unchecked(d: f64, lane_offset_m: f64, geometry: &FiberGeometry) -> f64 {
    let z = geometry.depth_m;
    let a2 = lane_offset_m * lane_offset_m + z * z;
    let half = geometry.gauge_length_m / 2.0;
    let integral = antiderivative(d + half, a2) - antiderivative(d - half, a2);
    3.0 * z.powi(3) / (2.0 * PI) * integral / geometry.gauge_length_m
}

/// Channel-level peak response per ton for a load in a lane at `lane_offset_m`.
pub fn gauge_peak(lane_offset_m: f64, geometry: &FiberGeometry) -> Result<f64> {
    gauge_averaged_kernel(0.0, lane_offset_m, geometry, 1.0)
}

/// Pointwise strain sampled along the fiber at a fixed resolution, starting at 0 m.
#[derive(Debug, Clone, PartialEq)]
pub struct PointField {
    pub resolution_m: f64,
    pub values: Vec<f64>,
}

impl PointField {
    fn extent(&self) -> f64 {
        (self.values.len().saturating_sub(1)) as f64 * self.resolution_m
    }

    // Integral of the piecewise-linear interpolant from 0 to x.
    fn cumulative(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.values.len()];
        for i in 1..self.values.len() {
            c[i] = c[i - 1] + 0.5 * (self.values[i - 1] + self.values[i]) * self.resolution_m;
        }
        c
    }

    fn integral_to(&self, cum: &[f64], x: f64) -> f64 {
        let pos = (x / self.resolution_m).clamp(0.0, (self.values.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        let u = (pos - i as f64) * self.resolution_m;
        let slope = (self.values[i + 1] - self.values[i]) / self.resolution_m;
        cum[i] + self.values[i] * u + 0.5 * slope * u * u
    }
}

/// Mean of the (linearly interpolated) point field over each channel's gauge
/// window. Channel `k` is centered at `gauge_length_m / 2 + k * channel_spacing_m`;
/// only channels whose full window lies inside the field are produced.
pub fn gauge_average(field: &PointField, gauge_length_m: f64, channel_spacing_m: f64) -> Result<Vec<f64>> {
    if !(field.resolution_m > 0.0 && channel_spacing_m > 0.0 && gauge_length_m > 0.0) {
        return Err(Error::InvalidArgument("resolution, spacing and gauge length must be positive".into()));
    }
    if gauge_length_m < channel_spacing_m {
        return Err(Error::InvalidArgument(format!(
            "gauge length {gauge_length_m} m is shorter than channel spacing {channel_spacing_m} m"
        )));
    }
    if field.values.len() < 2 || field.extent() + 1e-9 < gauge_length_m {
        return Err(Error::InvalidArgument("field shorter than one gauge length".into()));
    }
    let cum = field.cumulative();
    let count = ((field.extent() - gauge_length_m) / channel_spacing_m + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| {
            let lo = k as f64 * channel_spacing_m;
            (field.integral_to(&cum, lo + gauge_length_m) - field.integral_to(&cum, lo)) / gauge_length_m
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_scales_with_weight() {
        let a = quasistatic_kernel(2.0, 3.0, 1.5, 1.3).unwrap();
        let b = quasistatic_kernel(2.0, 3.0, 1.5, 2.6).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn kernel_is_even() {
        for d in [1.0, 5.0, 20.0] {
            assert_eq!(quasistatic_kernel(d, 3.0, 1.5, 1.0).unwrap(), quasistatic_kernel(-d, 3.0, 1.5, 1.0).unwrap());
        }
    }

    #[test]
    fn kernel_decays_with_offset() {
        assert!(quasistatic_kernel(0.0, 6.0, 1.5, 1.0).unwrap() < quasistatic_kernel(0.0, 3.0, 1.5, 1.0).unwrap());
    }

    #[test]
    fn kernel_guards_singular_geometry() {
        assert!(quasistatic_kernel(0.0, 0.0, 1.5, 1.0).is_err());
        assert!(quasistatic_kernel(0.0, 3.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn closed_form_gauge_average_matches_quadrature() {
        let g = FiberGeometry::default();
        for d in [0.0, 2.5, 7.0, -12.0] {
            let n = 20_000;
            let h = g.gauge_length_m / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let x = d - g.gauge_length_m / 2.0 + (i as f64 + 0.5) * h;
                acc += quasistatic_kernel(x, 3.0, g.depth_m, 1.0).unwrap() * h;
            }
            let exact = gauge_averaged_kernel(d, 3.0, &g, 1.0).unwrap();
            assert!((acc / g.gauge_length_m - exact).abs() < 1e-8 * exact.abs().max(1e-6), "d={d}");
        }
    }

    #[test]
    fn gauge_peak_fwhm_is_about_ten_metres() {
        let g = FiberGeometry::default();
        let peak = gauge_peak(3.0, &g).unwrap();
        let half = (0..4000)
            .map(|i| i as f64 * 0.01)
            .find(|&d| gauge_averaged_kernel(d, 3.0, &g, 1.0).unwrap() < peak / 2.0)
            .unwrap();
        assert!((8.0..=13.0).contains(&(2.0 * half)), "fwhm {}", 2.0 * half);
    }

    #[test]
    fn gauge_average_of_constant_and_linear_fields() {
        let constant = PointField { resolution_m: 0.25, values: vec![4.2; 401] };
        for v in gauge_average(&constant, 10.0, 1.0).unwrap() {
            assert!((v - 4.2).abs() < 1e-12);
        }
        let linear = PointField { resolution_m: 0.25, values: (0..401).map(|i| 0.7 * i as f64 * 0.25).collect() };
        for (k, v) in gauge_average(&linear, 10.0, 1.0).unwrap().into_iter().enumerate() {
            let center = 5.0 + k as f64;
            assert!((v - 0.7 * center).abs() < 1e-9);
        }
    }

    #[test]
    fn narrow_impulse_spreads_over_one_gauge() {
        // 0.5 m wide impulse at 50 m, sampled every 0.05 m.
        let values = (0..2001)
            .map(|i| {
                let x = i as f64 * 0.05;
                if (x - 50.0).abs() <= 0.25 { 1.0 } else { 0.0 }
            })
            .collect();
        let field = PointField { resolution_m: 0.05, values };
        let channels = gauge_average(&field, 10.0, 0.5).unwrap();
        let peak = channels.iter().cloned().fold(0.0, f64::max);
        let plateau = channels.iter().filter(|&&v| v > 0.5 * peak).count() as f64 * 0.5;
        // Measured: every channel whose window contains the impulse sees the same mean.
        assert!((plateau - 10.0).abs() <= 1.0, "plateau {plateau}");
    }

    #[test]
    fn gauge_shorter_than_spacing_is_rejected() {
        let field = PointField { resolution_m: 0.1, values: vec![0.0; 500] };
        assert!(gauge_average(&field, 1.0, 2.0).is_err());
    }
}
