use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::chain::{build_chain, group_by_channel, oriented, run_chain, ChainMode, ChainNode, TrackConfig, TrackInit, VehicleTrack};
use crate::stats::{median, theil_sen};
use crate::{CalibrationTable, Detection, Direction, Error, Result};

/// Road stretch between two intersections, as a half-open channel range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Segments must be non-empty, sorted and non-overlapping.
pub fn validate_segments(segments: &[Segment]) -> Result<()> {
    for s in segments {
        if s.end <= s.start {
            return Err(Error::Config(format!("empty segment {}..{}", s.start, s.end)));
        }
    }
    for w in segments.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::Config(format!(
                "segments {}..{} and {}..{} overlap or are unsorted",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiConfig {
    pub track: TrackConfig,
    /// Chain nodes per seed window; windows advance by half their length.
    pub seed_window: usize,
    /// Nodes at each end of a window from which line anchors are drawn.
    pub seed_anchor_nodes: usize,
    /// Detections that must lie on a seed line.
    pub seed_min_support: usize,
    pub seed_tolerance_s: f64,
    pub speed_range_mps: (f64, f64),
    /// Tracks agreeing within this tolerance on most shared channels are duplicates.
    pub merge_tolerance_s: f64,
    pub merge_overlap: f64,
    pub stitch_tolerance_s: f64,
}

impl Default for MultiConfig {
    fn default() -> Self {
        Self {
            track: TrackConfig::default(),
            seed_window: 12,
            seed_anchor_nodes: 3,
            seed_min_support: 7,
            seed_tolerance_s: 0.2,
            speed_range_mps: (2.0, 45.0),
            merge_tolerance_s: 0.3,
            merge_overlap: 0.5,
            stitch_tolerance_s: 1.0,
        }
    }
}

impl MultiConfig {
    pub fn validate(&self) -> Result<()> {
        self.track.validate()?;
        let (lo, hi) = self.speed_range_mps;
        if self.seed_window < 2 || self.seed_anchor_nodes == 0 || self.seed_min_support < 2 || !(self.stitch_tolerance_s >= 0.0) || !(lo > 0.0 && hi > lo) {
            return Err(Error::Config(format!("invalid multi-target config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiResult {
    pub tracks: Vec<VehicleTrack>,
    /// Detections not associated with any accepted track.
    pub residue: Vec<Detection>,
}

struct Pool {
    nodes: Vec<ChainNode>,
    // Per node: detections with an availability flag.
    slots: Vec<Vec<(Detection, bool)>>,
}

impl Pool {
    fn available(&self, node: usize) -> impl Iterator<Item = &Detection> {
        self.slots[node].iter().filter(|(_, a)| *a).map(|(d, _)| d)
    }

    fn has_available(&self, node: usize) -> bool {
        self.slots[node].iter().any(|(_, a)| *a)
    }

    fn consume(&mut self, d: &Detection) {
        if let Ok(i) = self.nodes.binary_search_by(|n| n.channel.cmp(&d.channel)) {
            for slot in &mut self.slots[i] {
                if slot.0.arrival_time_s == d.arrival_time_s {
                    slot.1 = false;
                }
            }
        }
    }

    fn nearest(&self, node: usize, t: f64, tol: f64) -> Option<Detection> {
        self.available(node)
            .map(|d| (*d, (d.arrival_time_s - t).abs()))
            .filter(|&(_, r)| r <= tol)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(d, _)| d)
    }
}

struct Seed {
    inliers: Vec<(usize, Detection)>,
}

fn find_seed(pool: &Pool, window: std::ops::Range<usize>, cfg: &MultiConfig) -> Option<Seed> {
    let occupied: Vec<usize> = window.clone().filter(|&i| pool.has_available(i)).collect();
    if occupied.len() < cfg.seed_min_support {
        return None;
    }
    let m = cfg.seed_anchor_nodes.min(occupied.len() / 2).max(1);
    let firsts = &occupied[..m];
    let lasts = &occupied[occupied.len() - m..];
    let (vmin, vmax) = cfg.speed_range_mps;
    let mut best: Option<(usize, f64, Vec<(usize, Detection)>)> = None;
    for &ia in firsts {
        for a in pool.available(ia) {
            for &ib in lasts {
                if ib <= ia {
                    continue;
                }
                let dx = pool.nodes[ib].position_m - pool.nodes[ia].position_m;
                if dx <= 0.0 {
                    continue;
                }
                for b in pool.available(ib) {
                    let dt = b.arrival_time_s - a.arrival_time_s;
                    if dt.abs() < dx / vmax || dt.abs() > dx / vmin {
                        continue;
                    }
                    let slope = dt / dx;
                    let mut inliers = Vec::new();
                    let mut cost = 0.0;
                    for j in window.clone() {
                        let t = a.arrival_time_s + slope * (pool.nodes[j].position_m - pool.nodes[ia].position_m);
                        if let Some(d) = pool.nearest(j, t, cfg.seed_tolerance_s) {
                            cost += (d.arrival_time_s - t).abs();
                            inliers.push((j, d));
                        }
                    }
                    let better = match &best {
                        None => true,
                        Some((n, c, _)) => inliers.len() > *n || (inliers.len() == *n && cost < *c),
                    };
                    if better {
                        best = Some((inliers.len(), cost, inliers));
                    }
                }
            }
        }
    }
    best.filter(|(n, _, _)| *n >= cfg.seed_min_support).map(|(_, _, inliers)| Seed { inliers })
}

fn grow(pool: &Pool, seed: &Seed, cfg: &MultiConfig) -> Result<VehicleTrack> {
    let points: Vec<(f64, f64)> =
        seed.inliers.iter().map(|(j, d)| (pool.nodes[*j].position_m, d.arrival_time_s)).collect();
    let slope = theil_sen(&points).ok_or_else(|| Error::Data("degenerate seed".into()))?;
    let (anchor, anchor_det) = seed.inliers[seed.inliers.len() / 2];
    let discovery_cfg = TrackConfig { min_associations: 1, ..cfg.track };
    let lookup = |ch: usize| -> Vec<Detection> {
        match pool.nodes.binary_search_by(|n| n.channel.cmp(&ch)) {
            Ok(i) => pool.available(i).copied().collect(),
            Err(_) => Vec::new(),
        }
    };
    let mut found: Vec<Detection> = Vec::new();
    let std = [cfg.seed_tolerance_s, cfg.track.init_std[1].min(0.02)];
    let direction = Direction::from_sign(slope);
    for (nodes, s) in [
        (pool.nodes[anchor..].to_vec(), slope),
        (pool.nodes[..=anchor].iter().rev().copied().collect::<Vec<_>>(), -slope),
    ] {
        let init = TrackInit { direction, channel: nodes[0].channel, time_s: anchor_det.arrival_time_s, slowness: s, std };
        if let Ok(track) = run_chain(&nodes, &lookup, &discovery_cfg, &init) {
            found.extend(track.detections().copied());
        }
    }
    found.sort_by(|a, b| a.channel.cmp(&b.channel).then(a.arrival_time_s.total_cmp(&b.arrival_time_s)));
    found.dedup_by(|a, b| a.channel == b.channel);
    if found.len() < cfg.track.min_associations {
        return Err(Error::TrackRejected { associated: found.len(), required: cfg.track.min_associations });
    }
    let by_channel = group_by_channel(&found);
    let chain = oriented(&pool.nodes, direction);
    let first = chain.iter().position(|n| by_channel.contains_key(&n.channel)).expect("non-empty discovery");
    let last = chain.iter().rposition(|n| by_channel.contains_key(&n.channel)).expect("non-empty discovery");
    let chain = &chain[first..=last];
    let travel: Vec<(f64, f64)> = found
        .iter()
        .filter_map(|d| {
            let node = chain.iter().find(|n| n.channel == d.channel)?;
            Some((node.position_m * direction.sign(), d.arrival_time_s))
        })
        .collect();
    let slowness = theil_sen(&travel).ok_or_else(|| Error::Data("degenerate discovery".into()))?;
    let init = TrackInit {
        direction,
        channel: chain[0].channel,
        time_s: by_channel[&chain[0].channel][0].arrival_time_s,
        slowness: slowness.abs(),
        std: cfg.track.init_std,
    };
    let restricted = |ch: usize| by_channel.get(&ch).cloned().unwrap_or_default();
    let track = run_chain(chain, &restricted, &cfg.track, &init)?;
    // A fit that left the speed bounds is not a vehicle.
    let slowness: Vec<f64> = track.steps.iter().map(|s| s.smoothed.slowness()).collect();
    let typical = median(&slowness).unwrap_or(0.0);
    let (vmin, vmax) = cfg.speed_range_mps;
    if !(typical >= 1.0 / vmax && typical <= 1.0 / vmin) {
        return Err(Error::Data(format!("track speed outside [{vmin}, {vmax}] m/s")));
    }
    Ok(track)
}

fn track_segment(nodes: Vec<ChainNode>, detections: &[Detection], cfg: &MultiConfig) -> (Vec<VehicleTrack>, Vec<Detection>) {
    let grouped = group_by_channel(detections);
    let slots = nodes
        .iter()
        .map(|n| grouped.get(&n.channel).map(|v| v.iter().map(|d| (*d, true)).collect()).unwrap_or_default())
        .collect();
    let mut pool = Pool { nodes, slots };
    let n = pool.nodes.len();
    let w = cfg.seed_window.min(n.max(1));
    let stride = (w / 2).max(1);
    let mut tracks = Vec::new();
    let mut start = 0;
    while start < n {
        let window = start..(start + w).min(n);
        while let Some(seed) = find_seed(&pool, window.clone(), cfg) {
            match grow(&pool, &seed, cfg) {
                Ok(track) => {
                    for d in track.detections() {
                        pool.consume(d);
                    }
                    tracks.push(track);
                }
                Err(_) => {
                    for (_, d) in &seed.inliers {
                        pool.consume(d);
                    }
                }
            }
        }
        if start + w >= n {
            break;
        }
        start += stride;
    }
    let tracks = stitch(&pool.nodes, tracks, cfg);
    let mut residue = Vec::new();
    for slot in &pool.slots {
        residue.extend(slot.iter().filter(|(_, a)| *a).map(|(d, _)| *d));
    }
    // Rejected seeds consumed their inliers; those detections are residue too.
    let used: std::collections::HashSet<(usize, u64)> = tracks
        .iter()
        .flat_map(|t: &VehicleTrack| t.detections().map(|d| (d.channel, d.arrival_time_s.to_bits())).collect::<Vec<_>>())
        .collect();
    for slot in &pool.slots {
        for (d, a) in slot {
            if !a && !used.contains(&(d.channel, d.arrival_time_s.to_bits())) {
                residue.push(*d);
            }
        }
    }
    (tracks, residue)
}

/// Joins same-direction fragments of one vehicle, typically split where it
/// crossed another, when the earlier piece's last state predicts the later
/// piece's first time within `stitch_tolerance_s`.
fn stitch(nodes: &[ChainNode], mut tracks: Vec<VehicleTrack>, cfg: &MultiConfig) -> Vec<VehicleTrack> {
    'outer: loop {
        for i in 0..tracks.len() {
            for j in 0..tracks.len() {
                if i == j || tracks[i].direction != tracks[j].direction {
                    continue;
                }
                let chain = oriented(nodes, tracks[i].direction);
                let index = |ch: usize| chain.iter().position(|n| n.channel == ch);
                let (a, b) = (&tracks[i], &tracks[j]);
                let (Some(a0), Some(a1), Some(b0), Some(b1)) = (
                    index(a.steps[0].channel),
                    index(a.steps[a.steps.len() - 1].channel),
                    index(b.steps[0].channel),
                    index(b.steps[b.steps.len() - 1].channel),
                ) else {
                    continue;
                };
                if !(a0 < b0 && b1 > a1 && b0 <= a1 + cfg.seed_window) {
                    continue;
                }
                let end = &a.steps[a.steps.len() - 1];
                let travel = (chain[b0].position_m - chain[a1].position_m).abs();
                let signed = if b0 >= a1 { travel } else { -travel };
                let predicted = end.smoothed.time() + end.smoothed.slowness() * signed;
                if (predicted - b.steps[0].smoothed.time()).abs() > cfg.stitch_tolerance_s {
                    continue;
                }
                let mut joined: Vec<Detection> = a.detections().chain(b.detections()).copied().collect();
                joined.sort_by(|x, y| x.channel.cmp(&y.channel).then(x.arrival_time_s.total_cmp(&y.arrival_time_s)));
                joined.dedup();
                let by_channel = group_by_channel(&joined);
                let init = TrackInit {
                    direction: a.direction,
                    channel: chain[a0].channel,
                    time_s: a.steps[0].smoothed.time(),
                    slowness: a.steps[0].smoothed.slowness().max(1.0 / cfg.speed_range_mps.1),
                    std: cfg.track.init_std,
                };
                let lookup = |ch: usize| by_channel.get(&ch).cloned().unwrap_or_default();
                let Ok(merged) = run_chain(&chain[a0..=b1], &lookup, &cfg.track, &init) else {
                    continue;
                };
                if merged.associated() < a.associated().max(b.associated()) {
                    continue;
                }
                let (lo, hi) = (i.min(j), i.max(j));
                tracks.remove(hi);
                tracks.remove(lo);
                tracks.push(merged);
                continue 'outer;
            }
        }
        return tracks;
    }
}

fn duplicates(a: &VehicleTrack, b: &VehicleTrack, cfg: &MultiConfig) -> bool {
    let mut common = 0;
    let mut agree = 0;
    for s in &a.steps {
        if let Some(o) = b.step(s.channel) {
            common += 1;
            if (s.smoothed.time() - o.smoothed.time()).abs() <= cfg.merge_tolerance_s {
                agree += 1;
            }
        }
    }
    let shorter = a.steps.len().min(b.steps.len());
    common > 0 && agree as f64 > cfg.merge_overlap * shorter as f64
}

/// Multi-vehicle tracking over independent road segments.
pub fn track_multi(
    detections: &[Detection],
    calib: &CalibrationTable,
    segments: &[Segment],
    cfg: &MultiConfig,
    mode: ChainMode,
) -> Result<MultiResult> {
    cfg.validate()?;
    validate_segments(segments)?;
    let results: Vec<(Vec<VehicleTrack>, Vec<Detection>)> = segments
        .par_iter()
        .map(|seg| {
            let nodes = build_chain(calib, mode, seg.range());
            let on_chain: std::collections::HashSet<usize> = nodes.iter().map(|n| n.channel).collect();
            let (inside, outside): (Vec<Detection>, Vec<Detection>) = detections
                .iter()
                .filter(|d| seg.range().contains(&d.channel))
                .partition(|d| on_chain.contains(&d.channel));
            let (tracks, mut residue) = track_segment(nodes, &inside, cfg);
            residue.extend(outside);
            (tracks, residue)
        })
        .collect();
    let mut tracks = Vec::new();
    let mut residue: Vec<Detection> = detections
        .iter()
        .filter(|d| !segments.iter().any(|s| s.range().contains(&d.channel)))
        .copied()
        .collect();
    for (t, r) in results {
        tracks.extend(t);
        residue.extend(r);
    }
    // Lower residual first, so duplicates drop the worse copy.
    tracks.sort_by(|a, b| a.residual_s.total_cmp(&b.residual_s));
    let mut kept: Vec<VehicleTrack> = Vec::new();
    for t in tracks {
        if kept.iter().any(|k| duplicates(k, &t, cfg)) {
            residue.extend(t.detections().copied());
        } else {
            kept.push(t);
        }
    }
    kept.sort_by(|a, b| {
        let (ta, tb) = (a.time_span().0, b.time_span().0);
        ta.total_cmp(&tb).then(a.steps[0].channel.cmp(&b.steps[0].channel))
    });
    for (i, t) in kept.iter_mut().enumerate() {
        t.id = i;
    }
    residue.sort_by(|a, b| a.channel.cmp(&b.channel).then(a.arrival_time_s.total_cmp(&b.arrival_time_s)));
    Ok(MultiResult { tracks: kept, residue })
}
