use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strain recording: `channel_count` virtual sensors by `sample_count` samples,
/// stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    data: Vec<f64>,
    channel_count: usize,
    sample_count: usize,
    sample_rate_hz: f64,
    start_time: f64,
    channel_spacing_m: f64,
    gauge_length_m: f64,
}

impl ChannelMatrix {
    pub fn new(
        data: Vec<f64>,
        channel_count: usize,
        sample_rate_hz: f64,
        start_time: f64,
        channel_spacing_m: f64,
        gauge_length_m: f64,
    ) -> Result<Self> {
        if channel_count == 0 {
            return Err(Error::Data("channel_count must be positive".into()));
        }
        for (name, v) in [
            ("sample_rate_hz", sample_rate_hz),
            ("channel_spacing_m", channel_spacing_m),
            ("gauge_length_m", gauge_length_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Data(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if !start_time.is_finite() {
            return Err(Error::Data("start_time must be finite".into()));
        }
        if !data.len().is_multiple_of(channel_count) {
            return Err(Error::Data(format!(
                "data length {} is not a multiple of channel_count {channel_count}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let sample_count = data.len() / channel_count;
        Ok(Self {
            data,
            channel_count,
            sample_count,
            sample_rate_hz,
            start_time,
            channel_spacing_m,
            gauge_length_m,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn channel_spacing_m(&self) -> f64 {
        self.channel_spacing_m
    }

    pub fn gauge_length_m(&self) -> f64 {
        self.gauge_length_m
    }

    pub fn duration_s(&self) -> f64 {
        self.sample_count as f64 / self.sample_rate_hz
    }

    /// Absolute time of sample `n`.
    pub fn time_of(&self, n: f64) -> f64 {
        self.start_time + n / self.sample_rate_hz
    }

    /// Fractional sample index of absolute time `t`.
    pub fn sample_of(&self, t: f64) -> f64 {
        (t - self.start_time) * self.sample_rate_hz
    }

    pub fn contains_time(&self, t: f64) -> bool {
        let s = self.sample_of(t);
        s >= 0.0 && s <= (self.sample_count.saturating_sub(1)) as f64
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.data[k * self.sample_count..(k + 1) * self.sample_count]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Signal pattern of a virtual sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    /// Vehicle passage produces a peak.
    Bell,
    /// Vehicle passage produces a valley.
    Flipped,
    /// Fiber slack with no road coupling.
    Spooled,
}

impl Pattern {
    pub fn polarity(self) -> Option<Polarity> {
        match self {
            Pattern::Bell => Some(Polarity::Peak),
            Pattern::Flipped => Some(Polarity::Valley),
            Pattern::Spooled => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Bell => "bell",
            Pattern::Flipped => "flipped",
            Pattern::Spooled => "spooled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bell" => Some(Pattern::Bell),
            "flipped" => Some(Pattern::Flipped),
            "spooled" => Some(Pattern::Spooled),
            _ => None,
        }
    }
}

/// Classify a transmissibility by sign. Zero and non-finite values have no pattern.
pub fn classify(transmissibility: f64) -> Option<Pattern> {
    if !transmissibility.is_finite() || transmissibility == 0.0 {
        None
    } else if transmissibility > 0.0 {
        Some(Pattern::Bell)
    } else {
        Some(Pattern::Flipped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Peak,
    Valley,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Peak => 1.0,
            Polarity::Valley => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Peak => "peak",
            Polarity::Valley => "valley",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "peak" => Some(Polarity::Peak),
            "valley" => Some(Polarity::Valley),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

/// Calibration of one virtual sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCalibration {
    channel: usize,
    road_position_m: Option<f64>,
    transmissibility: Option<f64>,
    pattern: Pattern,
    geo: Option<GeoPoint>,
}

impl ChannelCalibration {
    /// A road-coupled channel; the pattern follows the sign of `transmissibility`.
    pub fn coupled(channel: usize, road_position_m: f64, transmissibility: f64) -> Result<Self> {
        let pattern = classify(transmissibility).ok_or_else(|| {
            Error::Data(format!(
                "channel {channel}: transmissibility must be finite and nonzero, got {transmissibility}"
            ))
        })?;
        if !road_position_m.is_finite() {
            return Err(Error::Data(format!("channel {channel}: non-finite road position")));
        }
        Ok(Self {
            channel,
            road_position_m: Some(road_position_m),
            transmissibility: Some(transmissibility),
            pattern,
            geo: None,
        })
    }

    /// A fiber-slack channel. The road position, when known, is where the slack sits.
    pub fn spooled(channel: usize, road_position_m: Option<f64>) -> Self {
        Self { channel, road_position_m, transmissibility: None, pattern: Pattern::Spooled, geo: None }
    }

    pub fn with_geo(mut self, geo: Option<GeoPoint>) -> Self {
        self.geo = geo;
        self
    }

    pub fn channel(&self) -> usize {
        self.channel
    }

    pub fn road_position_m(&self) -> Option<f64> {
        self.road_position_m
    }

    pub fn transmissibility(&self) -> Option<f64> {
        self.transmissibility
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn geo(&self) -> Option<GeoPoint> {
        self.geo
    }

    pub fn is_spooled(&self) -> bool {
        self.pattern == Pattern::Spooled
    }

    /// Copy with the transmissibility multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.transmissibility = self.transmissibility.map(|t| t * factor);
        out
    }

    /// Copy with the road position replaced.
    pub fn with_road_position(&self, road_position_m: Option<f64>) -> Self {
        let mut out = self.clone();
        out.road_position_m = road_position_m;
        out
    }
}

/// Per-channel calibration for a fiber, sorted by channel index.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    entries: Vec<ChannelCalibration>,
    t0: Option<f64>,
}

impl CalibrationTable {
    /// Validates ordering, uniqueness and road-position monotonicity.
    pub fn new(mut entries: Vec<ChannelCalibration>) -> Result<Self> {
        entries.sort_by_key(|e| e.channel);
        for w in entries.windows(2) {
            if w[0].channel == w[1].channel {
                return Err(Error::Data(format!("duplicate channel {}", w[0].channel)));
            }
        }
        let mut last: Option<(usize, f64)> = None;
        for e in entries.iter().filter(|e| !e.is_spooled()) {
            let pos = e.road_position_m.ok_or_else(|| {
                Error::Data(format!("channel {}: coupled channel without road position", e.channel))
            })?;
            if let Some((ch, prev)) = last {
                if pos < prev {
                    return Err(Error::Data(format!(
                        "road position decreases from channel {ch} ({prev:.3} m) to channel {} ({pos:.3} m)",
                        e.channel
                    )));
                }
            }
            last = Some((e.channel, pos));
        }
        let mut table = Self { entries, t0: None };
        table.refresh_t0();
        Ok(table)
    }

    fn refresh_t0(&mut self) {
        self.t0 = self
            .entries
            .iter()
            .filter_map(|e| e.transmissibility.map(f64::abs))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
    }

    pub fn entries(&self) -> &[ChannelCalibration] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Minimum absolute transmissibility over coupled channels.
    pub fn t0(&self) -> Option<f64> {
        self.t0
    }

    pub fn get(&self, channel: usize) -> Option<&ChannelCalibration> {
        self.entries
            .binary_search_by_key(&channel, |e| e.channel)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn coupled(&self) -> impl Iterator<Item = &ChannelCalibration> {
        self.entries.iter().filter(|e| !e.is_spooled())
    }

    /// Replace or insert one entry, re-validating the table.
    pub fn upsert(&mut self, entry: ChannelCalibration) -> Result<()> {
        let mut entries = self.entries.clone();
        match entries.binary_search_by_key(&entry.channel, |e| e.channel) {
            Ok(i) => entries[i] = entry,
            Err(i) => entries.insert(i, entry),
        }
        *self = Self::new(entries)?;
        Ok(())
    }

    /// Keep only entries matching `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&ChannelCalibration) -> bool) -> Self {
        let mut out = Self { entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(), t0: None };
        out.refresh_t0();
        out
    }

    /// Every `step`-th channel index, emulating a coarser channel spacing.
    pub fn decimated(&self, step: usize) -> Self {
        let step = step.max(1);
        self.filtered(|e| e.channel % step == 0)
    }
}

/// Travel direction. Outbound vehicles move toward increasing road position
/// (and channel index), inbound ones toward decreasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Inbound,
    Outbound,
}

impl Direction {
    /// +1 for outbound, -1 for inbound.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Outbound => 1.0,
            Direction::Inbound => -1.0,
        }
    }

    pub fn from_sign(s: f64) -> Self {
        if s >= 0.0 { Direction::Outbound } else { Direction::Inbound }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Inbound => "inbound",
            Direction::Outbound => "outbound",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inbound" => Some(Direction::Inbound),
            "outbound" => Some(Direction::Outbound),
            _ => None,
        }
    }
}

/// Candidate vehicle arrival at one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub channel: usize,
    /// Absolute arrival time, sub-sample resolution.
    pub arrival_time_s: f64,
    /// Topographic prominence of the extremum (> 0).
    pub prominence: f64,
    pub polarity: Polarity,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_is_exhaustive_over_sign() {
        assert_eq!(classify(3.0), Some(Pattern::Bell));
        assert_eq!(classify(-1e-300), Some(Pattern::Flipped));
        assert_eq!(classify(0.0), None);
        assert_eq!(classify(f64::NAN), None);
    }

    #[test]
    fn t0_tracks_mutation() {
        let mut table = CalibrationTable::new(vec![
            ChannelCalibration::coupled(0, 0.0, 500.0).unwrap(),
            ChannelCalibration::coupled(1, 1.0, -300.0).unwrap(),
            ChannelCalibration::spooled(2, None),
        ])
        .unwrap();
        assert_eq!(table.t0(), Some(300.0));
        table.upsert(ChannelCalibration::coupled(3, 2.0, 120.0).unwrap()).unwrap();
        assert_eq!(table.t0(), Some(120.0));
        table.upsert(ChannelCalibration::spooled(3, None)).unwrap();
        assert_eq!(table.t0(), Some(300.0));
    }

    #[test]
    fn table_rejects_duplicates_and_backwards_positions() {
        let dup = CalibrationTable::new(vec![
            ChannelCalibration::coupled(1, 0.0, 1.0).unwrap(),
            ChannelCalibration::coupled(1, 1.0, 1.0).unwrap(),
        ]);
        assert!(dup.is_err());
        let backwards = CalibrationTable::new(vec![
            ChannelCalibration::coupled(0, 5.0, 1.0).unwrap(),
            ChannelCalibration::spooled(1, None),
            ChannelCalibration::coupled(2, 4.0, 1.0).unwrap(),
        ]);
        assert!(backwards.is_err());
    }

    #[test]
    fn zero_transmissibility_is_rejected() {
        assert!(ChannelCalibration::coupled(0, 0.0, 0.0).is_err());
    }

    #[test]
    fn channel_matrix_validates_shape_and_values() {
        assert!(ChannelMatrix::new(vec![0.0; 10], 3, 250.0, 0.0, 1.0, 10.0).is_err());
        assert!(ChannelMatrix::new(vec![0.0; 9], 3, 0.0, 0.0, 1.0, 10.0).is_err());
        match ChannelMatrix::new(vec![0.0, 1.0, f64::NAN, 0.0], 2, 250.0, 0.0, 1.0, 10.0) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        let m = ChannelMatrix::new((0..6).map(f64::from).collect(), 2, 2.0, 10.0, 1.0, 10.0).unwrap();
        assert_eq!(m.sample_count(), 3);
        assert_eq!(m.channel(1), &[3.0, 4.0, 5.0]);
        assert_eq!(m.time_of(2.0), 11.0);
    }
}
