//! Local map projection and road-centerline projection.

use crate::types::GeoPoint;
use crate::{Error, Result};

const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Equirectangular projection about a reference point; adequate over the
/// few kilometres a monitored road section spans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self { origin, cos_lat: origin.lat.to_radians().cos() }
    }

    /// (east, north) in metres.
    pub fn to_local(&self, p: GeoPoint) -> (f64, f64) {
        let east = (p.lon - self.origin.lon).to_radians() * self.cos_lat * EARTH_RADIUS_M;
        let north = (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_M;
        (east, north)
    }

    pub fn to_geo(&self, east: f64, north: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + (north / EARTH_RADIUS_M).to_degrees(),
            lon: self.origin.lon + (east / (EARTH_RADIUS_M * self.cos_lat)).to_degrees(),
        }
    }
}

/// Road centerline as a polyline; road position is arc length from the first vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    frame: LocalFrame,
    vertices: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
    geo: Vec<GeoPoint>,
}

impl Centerline {
    pub fn new(points: Vec<GeoPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Data("centerline needs at least two points".into()));
        }
        let frame = LocalFrame::new(points[0]);
        let vertices: Vec<(f64, f64)> = points.iter().map(|p| frame.to_local(*p)).collect();
        let mut cumulative = vec![0.0];
        for w in vertices.windows(2) {
            let len = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            if len <= 0.0 {
                return Err(Error::Data("centerline has repeated vertices".into()));
            }
            cumulative.push(cumulative.last().unwrap() + len);
        }
        Ok(Self { frame, vertices, cumulative, geo: points })
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.geo
    }

    pub fn length_m(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Nearest-point projection; returns (road position, signed lateral offset,
    /// positive to the left of travel along increasing road position).
    pub fn project(&self, p: GeoPoint) -> (f64, f64) {
        let (px, py) = self.frame.to_local(p);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, w) in self.vertices.windows(2).enumerate() {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let len2 = dx * dx + dy * dy;
            let u = (((px - w[0].0) * dx + (py - w[0].1) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (w[0].0 + u * dx, w[0].1 + u * dy);
            let d2 = (px - cx).powi(2) + (py - cy).powi(2);
            if d2 < best.0 {
                let along = self.cumulative[i] + u * len2.sqrt();
                let side = (dx * (py - w[0].1) - dy * (px - w[0].0)).signum();
                best = (d2, along, side * d2.sqrt());
            }
        }
        (best.1, best.2)
    }

    /// Point at road position `s` shifted `lateral` metres to the left.
    pub fn locate(&self, s: f64, lateral: f64) -> GeoPoint {
        let s = s.clamp(0.0, self.length_m());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.vertices.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.vertices.len() - 2),
        };
        let (a, b) = (self.vertices[i], self.vertices[i + 1]);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let u = (s - self.cumulative[i]) / len;
        let (tx, ty) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let (x, y) = (a.0 + u * (b.0 - a.0) - ty * lateral, a.1 + u * (b.1 - a.1) + tx * lateral);
        self.frame.to_geo(x, y)
    }
}
