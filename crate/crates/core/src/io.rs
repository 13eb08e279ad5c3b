//! File formats: the binary strain matrix with its key-value sidecar, and
//! comma-separated tables with a header row for everything else.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calib::TapEvent;
use crate::characterize::VehicleCharacter;
use crate::sim::GroundTruth;
use crate::track::{Segment, StateEstimate, TrackStep, VehicleTrack};
use crate::{
    CalibrationTable, ChannelCalibration, ChannelMatrix, Detection, Direction, Error, GeoPoint, Pattern, Polarity,
    Result,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct MatrixMeta {
    sample_rate_hz: f64,
    channel_count: usize,
    sample_count: usize,
    start_time: f64,
    channel_spacing_m: f64,
    gauge_length_m: f64,
}

/// Sidecar path of a matrix file: same stem, `.meta` extension.
pub fn meta_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("meta")
}

/// Write little-endian f32 samples, channel-major, plus the `.meta` sidecar.
pub fn write_matrix(path: &Path, m: &ChannelMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in m.data() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = MatrixMeta {
        sample_rate_hz: m.sample_rate_hz(),
        channel_count: m.channel_count(),
        sample_count: m.sample_count(),
        start_time: m.start_time(),
        channel_spacing_m: m.channel_spacing_m(),
        gauge_length_m: m.gauge_length_m(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::parse(meta_path(path), e))?;
    std::fs::write(meta_path(path), text).map_err(|e| Error::io(meta_path(path), e))
}

pub fn read_matrix(path: &Path) -> Result<ChannelMatrix> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: MatrixMeta = toml::from_str(&text).map_err(|e| Error::parse(&mp, e))?;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let expected = meta.channel_count * meta.sample_count * 4;
    if bytes.len() != expected {
        return Err(Error::parse(path, format!("expected {expected} bytes from the sidecar, found {}", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    ChannelMatrix::new(
        data,
        meta.channel_count,
        meta.sample_rate_hz,
        meta.start_time,
        meta.channel_spacing_m,
        meta.gauge_length_m,
    )
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    w.write_record(header).map_err(|e| Error::parse(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, format!("{other:?}")),
        })?;
    r.deserialize().map(|row| row.map_err(|e| Error::parse(path, e))).collect()
}

/// Parse a TOML configuration; malformed content is a configuration error.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct CalibrationRow {
    channel: usize,
    road_position_m: Option<f64>,
    transmissibility: Option<f64>,
    pattern: String,
    lat: Option<f64>,
    lon: Option<f64>,
}

pub fn write_calibration(path: &Path, table: &CalibrationTable) -> Result<()> {
    write_rows(
        path,
        &["channel", "road_position_m", "transmissibility", "pattern", "lat", "lon"],
        table.entries().iter().map(|e| CalibrationRow {
            channel: e.channel(),
            road_position_m: e.road_position_m(),
            transmissibility: e.transmissibility(),
            pattern: e.pattern().as_str().to_string(),
            lat: e.geo().map(|g| g.lat),
            lon: e.geo().map(|g| g.lon),
        }),
    )
}

pub fn read_calibration(path: &Path) -> Result<CalibrationTable> {
    let rows: Vec<CalibrationRow> = read_rows(path)?;
    let entries = rows
        .into_iter()
        .map(|r| {
            let pattern =
                Pattern::parse(&r.pattern).ok_or_else(|| Error::parse(path, format!("unknown pattern {:?}", r.pattern)))?;
            let geo = match (r.lat, r.lon) {
                (Some(lat), Some(lon)) => Some(GeoPoint { lat, lon }),
                _ => None,
            };
            let entry = match (pattern, r.road_position_m, r.transmissibility) {
                (Pattern::Spooled, pos, None) => ChannelCalibration::spooled(r.channel, pos),
                (p, Some(pos), Some(t)) if p.polarity().is_some() => {
                    let e = ChannelCalibration::coupled(r.channel, pos, t)?;
                    if e.pattern() != p {
                        return Err(Error::parse(path, format!("channel {}: pattern disagrees with sign of T", r.channel)));
                    }
                    e
                }
                _ => return Err(Error::parse(path, format!("channel {}: inconsistent row", r.channel))),
            };
            Ok(entry.with_geo(geo))
        })
        .collect::<Result<Vec<_>>>()?;
    CalibrationTable::new(entries)
}

#[derive(Serialize, Deserialize)]
struct DetectionRow {
    channel: usize,
    arrival_time_s: f64,
    prominence: f64,
    polarity: String,
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    write_rows(
        path,
        &["channel", "arrival_time_s", "prominence", "polarity"],
        detections.iter().map(|d| DetectionRow {
            channel: d.channel,
            arrival_time_s: d.arrival_time_s,
            prominence: d.prominence,
            polarity: d.polarity.as_str().to_string(),
        }),
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let rows: Vec<DetectionRow> = read_rows(path)?;
    rows.into_iter()
        .map(|r| {
            let polarity = Polarity::parse(&r.polarity)
                .ok_or_else(|| Error::parse(path, format!("unknown polarity {:?}", r.polarity)))?;
            if !(r.prominence > 0.0 && r.arrival_time_s.is_finite()) {
                return Err(Error::parse(path, format!("channel {}: invalid detection", r.channel)));
            }
            Ok(Detection { channel: r.channel, arrival_time_s: r.arrival_time_s, prominence: r.prominence, polarity })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    vehicle: usize,
    channel: usize,
    arrival_time_s: f64,
    weight_tons: f64,
    wheelbase_m: f64,
    direction: String,
    lane_offset_m: f64,
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    write_rows(
        path,
        &["vehicle", "channel", "arrival_time_s", "weight_tons", "wheelbase_m", "direction", "lane_offset_m"],
        truth.arrivals.iter().map(|a| {
            let (spec, traj) = &truth.vehicles[a.vehicle];
            TruthRow {
                vehicle: a.vehicle,
                channel: a.channel,
                arrival_time_s: a.time_s,
                weight_tons: spec.weight_tons,
                wheelbase_m: spec.wheelbase_m,
                direction: traj.direction().as_str().to_string(),
                lane_offset_m: traj.lane_offset_m(),
            }
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsRow {
    pub run: usize,
    pub time_s: f64,
    pub lat: f64,
    pub lon: f64,
}

/// GPS fixes of all runs; rows are grouped into runs by the `run` column.
pub fn write_gps(path: &Path, rows: &[GpsRow]) -> Result<()> {
    write_rows(path, &["run", "time_s", "lat", "lon"], rows.iter().copied())
}

/// Fixes per run, in run-number order.
pub fn read_gps(path: &Path) -> Result<Vec<Vec<(f64, f64, f64)>>> {
    let rows: Vec<GpsRow> = read_rows(path)?;
    let mut runs: std::collections::BTreeMap<usize, Vec<(f64, f64, f64)>> = Default::default();
    for r in rows {
        runs.entry(r.run).or_default().push((r.time_s, r.lat, r.lon));
    }
    Ok(runs.into_values().collect())
}

pub fn write_taps(path: &Path, taps: &[TapEvent]) -> Result<()> {
    write_rows(path, &["das_time_s", "reference_time_s"], taps.iter().copied())
}

pub fn read_taps(path: &Path) -> Result<Vec<TapEvent>> {
    read_rows(path)
}

/// One tap of the clock-sync test as logged in the field: when (reference
/// clock) and over which channels of the lead-in cable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapLogEntry {
    pub reference_time_s: f64,
    pub first_channel: usize,
    pub last_channel: usize,
}

pub fn write_tap_log(path: &Path, taps: &[TapLogEntry]) -> Result<()> {
    write_rows(path, &["reference_time_s", "first_channel", "last_channel"], taps.iter().copied())
}

pub fn read_tap_log(path: &Path) -> Result<Vec<TapLogEntry>> {
    read_rows(path)
}

#[derive(Serialize, Deserialize)]
struct PositionRow {
    position_m: f64,
}

/// Road positions (of joints and other features), one per row.
pub fn write_positions(path: &Path, positions: &[f64]) -> Result<()> {
    write_rows(path, &["position_m"], positions.iter().map(|&position_m| PositionRow { position_m }))
}

pub fn read_positions(path: &Path) -> Result<Vec<f64>> {
    Ok(read_rows::<PositionRow>(path)?.into_iter().map(|r| r.position_m).collect())
}

pub fn write_centerline(path: &Path, points: &[GeoPoint]) -> Result<()> {
    write_rows(path, &["lat", "lon"], points.iter().copied())
}

pub fn read_centerline(path: &Path) -> Result<Vec<GeoPoint>> {
    read_rows(path)
}

pub fn write_segments(path: &Path, segments: &[Segment]) -> Result<()> {
    write_rows(path, &["start", "end"], segments.iter().copied())
}

pub fn read_segments(path: &Path) -> Result<Vec<Segment>> {
    read_rows(path)
}

#[derive(Serialize, Deserialize)]
struct TrackRow {
    track_id: usize,
    direction: String,
    channel: usize,
    time_s: f64,
    x_m: f64,
    speed_kmh: Option<f64>,
    slowness_s_per_m: f64,
    var_time: f64,
    var_slowness: f64,
    detection_time_s: Option<f64>,
    detection_prominence: Option<f64>,
    detection_polarity: Option<String>,
}

/// Smoothed states of every track, one row per step.
pub fn write_tracks(path: &Path, tracks: &[VehicleTrack]) -> Result<()> {
    let rows = tracks.iter().flat_map(|t| {
        t.steps.iter().map(move |s| {
            let slowness = s.smoothed.slowness();
            TrackRow {
                track_id: t.id,
                direction: t.direction.as_str().to_string(),
                channel: s.channel,
                time_s: s.smoothed.time(),
                x_m: s.position_m,
                speed_kmh: (slowness > 0.0).then(|| 3.6 / slowness),
                slowness_s_per_m: slowness,
                var_time: s.smoothed.cov[(0, 0)],
                var_slowness: s.smoothed.cov[(1, 1)],
                detection_time_s: s.detection.map(|d| d.arrival_time_s),
                detection_prominence: s.detection.map(|d| d.prominence),
                detection_polarity: s.detection.map(|d| d.polarity.as_str().to_string()),
            }
        })
    });
    write_rows(
        path,
        &[
            "track_id",
            "direction",
            "channel",
            "time_s",
            "x_m",
            "speed_kmh",
            "slowness_s_per_m",
            "var_time",
            "var_slowness",
            "detection_time_s",
            "detection_prominence",
            "detection_polarity",
        ],
        rows,
    )
}

/// Rebuild tracks from a tracks table. Only smoothed states are stored, so
/// the predicted and filtered states are set equal to them and the fit
/// statistics are zero.
pub fn read_tracks(path: &Path) -> Result<Vec<VehicleTrack>> {
    let rows: Vec<TrackRow> = read_rows(path)?;
    let mut tracks: Vec<VehicleTrack> = Vec::new();
    for r in rows {
        let direction =
            Direction::parse(&r.direction).ok_or_else(|| Error::parse(path, format!("unknown direction {:?}", r.direction)))?;
        let detection = match (r.detection_time_s, r.detection_prominence, r.detection_polarity.as_deref()) {
            (Some(t), Some(p), Some(pol)) => Some(Detection {
                channel: r.channel,
                arrival_time_s: t,
                prominence: p,
                polarity: Polarity::parse(pol).ok_or_else(|| Error::parse(path, format!("unknown polarity {pol:?}")))?,
            }),
            (None, None, None) => None,
            _ => return Err(Error::parse(path, format!("track {}: partial detection columns", r.track_id))),
        };
        let state = StateEstimate::new([r.time_s, r.slowness_s_per_m], [[r.var_time, 0.0], [0.0, r.var_slowness]], r.channel);
        if tracks.last().map(|t| t.id) != Some(r.track_id) {
            if tracks.iter().any(|t| t.id == r.track_id) {
                return Err(Error::parse(path, format!("track {} rows are not contiguous", r.track_id)));
            }
            tracks.push(VehicleTrack {
                id: r.track_id,
                direction,
                steps: Vec::new(),
                residual_s: 0.0,
                nis: 0.0,
                regularized: Vec::new(),
            });
        }
        let track = tracks.last_mut().unwrap();
        let dx = track.steps.last().map_or(0.0, |s| (r.x_m - s.position_m).abs());
        track.steps.push(TrackStep {
            channel: r.channel,
            position_m: r.x_m,
            dx,
            predicted: state,
            filtered: state,
            smoothed: state,
            detection,
        });
    }
    Ok(tracks)
}

#[derive(Serialize)]
struct CharacterRow {
    track_id: usize,
    wheelbase_m: Option<f64>,
    wheelbase_spread_m: Option<f64>,
    wheelbase_channels: usize,
    weight_tons: Option<f64>,
    weight_spread_tons: Option<f64>,
    weight_channels: usize,
}

pub fn write_characters(path: &Path, characters: &[VehicleCharacter]) -> Result<()> {
    write_rows(
        path,
        &[
            "track_id",
            "wheelbase_m",
            "wheelbase_spread_m",
            "wheelbase_channels",
            "weight_tons",
            "weight_spread_tons",
            "weight_channels",
        ],
        characters.iter().map(|c| CharacterRow {
            track_id: c.track_id,
            wheelbase_m: c.wheelbase_m.map(|e| e.value),
            wheelbase_spread_m: c.wheelbase_m.map(|e| e.spread),
            wheelbase_channels: c.wheelbase_m.map_or(0, |e| e.n_channels),
            weight_tons: c.weight_tons.map(|e| e.value),
            weight_spread_tons: c.weight_tons.map(|e| e.spread),
            weight_channels: c.weight_tons.map_or(0, |e| e.n_channels),
        }),
    )
}

/// Residue and other plain detection lists share the detections format.
pub use write_detections as write_residue;
