//! Random two-way traffic for evaluation scenes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::drive::jittered_trajectory;
use super::layout::Layout;
use super::scene::{Trajectory, VehicleSpec};
use crate::{Direction, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficSpec {
    pub vehicles: usize,
    pub near_lane_offset_m: f64,
    pub far_lane_offset_m: f64,
    /// Direction of the lane nearest the fiber.
    pub near_direction: Direction,
    /// Share of vehicles in the near lane.
    pub near_fraction: f64,
    pub speed_range: (f64, f64),
    pub speed_jitter: f64,
    /// Minimum time gap between successive vehicles in one lane.
    pub headway_s: f64,
    pub approach_m: f64,
    pub lead_s: f64,
    pub tail_s: f64,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        Self {
            vehicles: 20,
            near_lane_offset_m: 3.0,
            far_lane_offset_m: 5.0,
            near_direction: Direction::Outbound,
            near_fraction: 0.5,
            speed_range: (8.0, 20.0),
            speed_jitter: 0.05,
            headway_s: 6.0,
            approach_m: 60.0,
            lead_s: 2.0,
            tail_s: 2.0,
        }
    }
}

impl TrafficSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid speed range {:?}", self.speed_range)));
        }
        if !(self.near_lane_offset_m > 0.0 && self.far_lane_offset_m > 0.0) {
            return Err(Error::Config("lane offsets must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.near_fraction) {
            return Err(Error::Config("near_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn lane(&self, near: bool) -> (Direction, f64) {
        let far_direction = match self.near_direction {
            Direction::Outbound => Direction::Inbound,
            Direction::Inbound => Direction::Outbound,
        };
        if near {
            (self.near_direction, self.near_lane_offset_m)
        } else {
            (far_direction, self.far_lane_offset_m)
        }
    }
}

/// Generated traffic plus the record length that contains it.
#[derive(Debug, Clone, PartialEq)]
pub struct Traffic {
    pub vehicles: Vec<(VehicleSpec, Trajectory)>,
    pub duration_s: f64,
}

/// Draw a vehicle from a sedan / SUV / truck mix.
pub fn fleet_vehicle(rng: &mut impl Rng) -> VehicleSpec {
    let u: f64 = rng.random();
    let (label, weight, wheelbase) = if u < 0.5 {
        ("sedan", rng.random_range(1.2..1.9), rng.random_range(2.55..2.95))
    } else if u < 0.8 {
        ("suv", rng.random_range(1.9..3.0), rng.random_range(2.8..3.4))
    } else {
        ("truck", rng.random_range(5.0..15.0), rng.random_range(3.8..7.5))
    };
    VehicleSpec { weight_tons: weight, wheelbase_m: wheelbase, axle_count: 2, label: label.into() }
}

fn endpoints(layout: &Layout, spec: &TrafficSpec, direction: Direction) -> (f64, f64) {
    let (lo, hi) = layout.road_span;
    let a = (lo - spec.approach_m).max(0.0);
    let b = hi + spec.approach_m;
    match direction {
        Direction::Outbound => (a, b),
        Direction::Inbound => (b, a),
    }
}

/// Two-way traffic with random headways; lanes are independent, so
/// opposite-direction vehicles cross wherever their schedules meet.
pub fn random_traffic(layout: &Layout, spec: &TrafficSpec, seed: u64) -> Result<Traffic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7aff_1c);
    let mut vehicles = Vec::new();
    // Per lane: (last entry, last exit) to keep the following distance.
    let mut last: [Option<(f64, f64)>; 2] = [None, None];
    let mut end = 0.0f64;
    for _ in 0..spec.vehicles {
        let near = rng.random::<f64>() < spec.near_fraction;
        let (direction, offset) = spec.lane(near);
        let (from, to) = endpoints(layout, spec, direction);
        let speed = rng.random_range(spec.speed_range.0..=spec.speed_range.1);
        let transit = (to - from).abs() / speed;
        let lane = usize::from(near);
        let gap = spec.headway_s * rng.random_range(1.0..2.5);
        let enter = match last[lane] {
            None => spec.lead_s + rng.random::<f64>() * spec.headway_s,
            // Never catch up with the vehicle ahead.
            Some((e, x)) => (e + gap).max(x + spec.headway_s * 1.2 - transit),
        };
        let traj = jittered_trajectory(&mut rng, enter, from, to, speed, spec.speed_jitter, offset)?;
        let (e, x) = traj.time_span();
        last[lane] = Some((e, x));
        end = end.max(x);
        vehicles.push((fleet_vehicle(&mut rng), traj));
    }
    Ok(Traffic { vehicles, duration_s: end + spec.tail_s })
}

/// Traffic in isolated time slots. A `crosstalk_fraction` of far-lane
/// vehicles share their slot with a near-lane vehicle and meet it on the
/// instrumented road; every other vehicle drives alone.
pub fn crosstalk_traffic(layout: &Layout, spec: &TrafficSpec, crosstalk_fraction: f64, seed: u64) -> Result<Traffic> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&crosstalk_fraction) {
        return Err(Error::Config("crosstalk fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc2055);
    let n_near = (spec.vehicles as f64 * spec.near_fraction).round() as usize;
    let n_far = spec.vehicles - n_near;
    let n_pairs = ((n_far as f64 * crosstalk_fraction).round() as usize).min(n_near);
    #[derive(Clone, Copy)]
    enum Slot {
        Pair,
        Near,
        Far,
    }
    let mut slots = vec![Slot::Pair; n_pairs];
    slots.extend(std::iter::repeat_n(Slot::Near, n_near - n_pairs));
    slots.extend(std::iter::repeat_n(Slot::Far, n_far - n_pairs));
    slots.shuffle(&mut rng);

    let (lo, hi) = layout.road_span;
    let mut vehicles: Vec<(VehicleSpec, Trajectory)> = Vec::new();
    let mut t = spec.lead_s;
    for slot in slots {
        let slot_end = match slot {
            Slot::Near | Slot::Far => {
                let traj = slot_trajectory(layout, spec, &mut rng, matches!(slot, Slot::Near), t, None)?;
                let exit = traj.time_span().1;
                vehicles.push((fleet_vehicle(&mut rng), traj));
                exit
            }
            Slot::Pair => {
                let near = slot_trajectory(layout, spec, &mut rng, true, t, None)?;
                let meet_x = lo + (hi - lo) * rng.random_range(0.3..0.7);
                let meet_t = near.time_at(meet_x).expect("meeting point on the road");
                let far = slot_trajectory(layout, spec, &mut rng, false, t, Some((meet_x, meet_t)))?;
                // Shift the pair if the far vehicle would start before the slot.
                let shift = (t - far.time_span().0).max(0.0);
                let mut end = t;
                for traj in [near, far] {
                    let wp = traj.waypoints().iter().map(|&(a, b)| (a + shift, b)).collect();
                    let traj = Trajectory::new(wp, traj.direction(), traj.lane_offset_m())?;
                    end = end.max(traj.time_span().1);
                    vehicles.push((fleet_vehicle(&mut rng), traj));
                }
                end
            }
        };
        t = slot_end + spec.headway_s;
    }
    Ok(Traffic { vehicles, duration_s: t - spec.headway_s + spec.tail_s })
}

fn slot_trajectory(
    layout: &Layout,
    spec: &TrafficSpec,
    rng: &mut ChaCha8Rng,
    near: bool,
    t: f64,
    meet: Option<(f64, f64)>,
) -> Result<Trajectory> {
    let (direction, offset) = spec.lane(near);
    let (from, to) = endpoints(layout, spec, direction);
    let speed = rng.random_range(spec.speed_range.0..=spec.speed_range.1);
    let enter = match meet {
        None => t,
        Some((x, at)) => at - (x - from).abs() / speed,
    };
    Trajectory::constant_speed(enter, from, to, speed, offset)
}
