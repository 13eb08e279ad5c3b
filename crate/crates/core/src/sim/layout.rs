//! Random but realistic fiber deployments: lead-in cable, coiled slack,
//! uneven fiber-to-road ratio and patchy transmissibility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::SpoolSegment;
use crate::geo::{Centerline, LocalFrame};
use crate::{CalibrationTable, ChannelCalibration, Error, GeoPoint, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpoolSpec {
    /// Road position where the slack is coiled.
    pub road_position_m: f64,
    pub slack_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutSpec {
    pub channel_spacing_m: f64,
    /// Road position of the first coupled channel.
    pub road_start_m: f64,
    /// Instrumented road length after `road_start_m`.
    pub road_length_m: f64,
    /// Uncoupled channels between the interrogator and the road; taps land here.
    pub lead_in_channels: usize,
    pub spools: Vec<SpoolSpec>,
    /// Fiber metres per road metre, drawn per stretch.
    pub slack_ratio: (f64, f64),
    pub slack_stretch_m: f64,
    pub transmissibility: (f64, f64),
    pub flipped_fraction: f64,
    /// Channels sharing a base transmissibility and pattern.
    pub patch_channels: (usize, usize),
    /// Relative per-channel jitter around the patch transmissibility.
    pub jitter: f64,
    pub origin: GeoPoint,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            channel_spacing_m: 1.0,
            road_start_m: 150.0,
            road_length_m: 300.0,
            lead_in_channels: 12,
            spools: vec![SpoolSpec { road_position_m: 280.0, slack_m: 100.0 }],
            slack_ratio: (1.0, 1.3),
            slack_stretch_m: 40.0,
            transmissibility: (500.0, 5000.0),
            flipped_fraction: 0.18,
            patch_channels: (8, 30),
            jitter: 0.15,
            origin: GeoPoint { lat: 37.3382, lon: -121.8863 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub sensors: CalibrationTable,
    pub channel_count: usize,
    pub channel_spacing_m: f64,
    pub spool_segments: Vec<SpoolSegment>,
    pub lead_in: Vec<usize>,
    pub centerline: Centerline,
    /// First and last coupled road positions.
    pub road_span: (f64, f64),
}

impl Layout {
    /// Coupled channel whose road position is closest to `x`.
    pub fn nearest_channel(&self, x: f64) -> Option<usize> {
        self.sensors
            .coupled()
            .min_by(|a, b| {
                let da = (a.road_position_m().unwrap_or(f64::INFINITY) - x).abs();
                let db = (b.road_position_m().unwrap_or(f64::INFINITY) - x).abs();
                da.total_cmp(&db)
            })
            .map(|e| e.channel())
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub fn generate_layout(spec: &LayoutSpec, seed: u64) -> Result<Layout> {
    let (tlo, thi) = spec.transmissibility;
    if !(tlo > 0.0 && thi >= tlo) {
        return Err(Error::Config(format!("invalid transmissibility range {:?}", spec.transmissibility)));
    }
    let (rlo, rhi) = spec.slack_ratio;
    if !(rlo >= 1.0 && rhi >= rlo) {
        return Err(Error::Config(format!("slack ratio range {:?} must be >= 1", spec.slack_ratio)));
    }
    if !(spec.channel_spacing_m > 0.0 && spec.road_length_m > 0.0 && spec.slack_stretch_m > 0.0) {
        return Err(Error::Config("spacing, road length and stretch length must be positive".into()));
    }
    if spec.patch_channels.0 == 0 || spec.patch_channels.1 < spec.patch_channels.0 {
        return Err(Error::Config(format!("invalid patch length range {:?}", spec.patch_channels)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = spec.channel_spacing_m;
    let road_end = spec.road_start_m + spec.road_length_m;

    let stretches = (spec.road_length_m / spec.slack_stretch_m).ceil() as usize + 2;
    let ratios: Vec<f64> = (0..stretches).map(|_| rlo + rng.random::<f64>() * (rhi - rlo)).collect();
    let ratio_at = |x: f64| {
        let u = ((x - spec.road_start_m) / spec.slack_stretch_m).max(0.0);
        let i = (u.floor() as usize).min(stretches - 2);
        let f = (u - i as f64).min(1.0);
        ratios[i] * (1.0 - f) + ratios[i + 1] * f
    };

    let mut spools = spec.spools.clone();
    spools.sort_by(|a, b| a.road_position_m.total_cmp(&b.road_position_m));
    let mut next_spool = 0;

    let mut entries: Vec<ChannelCalibration> =
        (0..spec.lead_in_channels).map(|k| ChannelCalibration::spooled(k, None)).collect();
    let lead_in: Vec<usize> = (0..spec.lead_in_channels).collect();
    let mut segments = Vec::new();
    let mut k = spec.lead_in_channels;
    let mut road = spec.road_start_m;
    let mut patch_left = 0usize;
    let mut patch_t = 0.0;
    let mut last_road = road;
    while road <= road_end {
        if next_spool < spools.len() && road >= spools[next_spool].road_position_m {
            let s = spools[next_spool];
            if !(s.slack_m > 0.0) {
                return Err(Error::Config("spool slack must be positive".into()));
            }
            let seg = SpoolSegment { fiber_index_start: k, slack_length_m: s.slack_m };
            for ch in seg.channel_range(dx) {
                entries.push(ChannelCalibration::spooled(ch, Some(road)));
            }
            k = seg.channel_range(dx).end;
            segments.push(seg);
            next_spool += 1;
            continue;
        }
        if patch_left == 0 {
            patch_left = rng.random_range(spec.patch_channels.0..=spec.patch_channels.1);
            let sign = if rng.random::<f64>() < spec.flipped_fraction { -1.0 } else { 1.0 };
            patch_t = sign * log_uniform(&mut rng, (tlo, thi));
        }
        patch_left -= 1;
        let jitter = 1.0 + spec.jitter * (2.0 * rng.random::<f64>() - 1.0);
        let t = patch_t.signum() * (patch_t.abs() * jitter).clamp(tlo, thi);
        entries.push(ChannelCalibration::coupled(k, road, t)?);
        last_road = road;
        k += 1;
        road += dx / ratio_at(road);
    }
    let channel_count = k;

    // Straight road with one gentle bend, long enough to cover approach runs.
    let frame = LocalFrame::new(spec.origin);
    let total = road_end + spec.road_start_m;
    let bend = total * 0.55;
    let heading2: f64 = 0.25;
    let centerline = Centerline::new(vec![
        frame.to_geo(0.0, 0.0),
        frame.to_geo(bend, 0.0),
        frame.to_geo(bend + (total - bend) * heading2.cos(), (total - bend) * heading2.sin()),
    ])?;

    // Attach true geo-locations (fiber at the road edge).
    let entries = entries
        .into_iter()
        .map(|e| {
            let geo = e.road_position_m().map(|p| centerline.locate(p, -5.0));
            e.with_geo(geo)
        })
        .collect();

    Ok(Layout {
        sensors: CalibrationTable::new(entries)?,
        channel_count,
        channel_spacing_m: dx,
        spool_segments: segments,
        lead_in,
        centerline,
        road_span: (spec.road_start_m, last_road),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_a_hundred_metre_spool() {
        let layout = generate_layout(&LayoutSpec::default(), 1).unwrap();
        assert_eq!(layout.spool_segments.len(), 1);
        let seg = layout.spool_segments[0].channel_range(1.0);
        assert_eq!(seg.len(), 100);
        for ch in seg {
            assert!(layout.sensors.get(ch).unwrap().is_spooled());
        }
        let t0 = layout.sensors.t0().unwrap();
        assert!(t0 >= 500.0);
        let flipped = layout.sensors.coupled().filter(|e| e.transmissibility().unwrap() < 0.0).count();
        assert!(flipped > 0);
    }

    #[test]
    fn fiber_is_longer_than_road() {
        let layout = generate_layout(&LayoutSpec::default(), 2).unwrap();
        let coupled = layout.sensors.coupled().count() as f64;
        let road = layout.road_span.1 - layout.road_span.0;
        assert!(coupled > road * 1.02, "coupled {coupled} road {road}");
    }

    #[test]
    fn layout_is_deterministic() {
        let a = generate_layout(&LayoutSpec::default(), 9).unwrap();
        let b = generate_layout(&LayoutSpec::default(), 9).unwrap();
        assert_eq!(a, b);
    }
}
