//! Spatial-domain Bayesian tracking.
//!
//! Channels are the time axis of the recursion: the state `[t, t_dot]` is a
//! vehicle's arrival time at a sensor and its derivative with respect to
//! road position, propagated from sensor to sensor by a constant-slowness
//! model, corrected by detected arrival times, and smoothed backwards with
//! the Rauch-Tung-Striebel recursion. Position and speed follow from the
//! sensor's road position and `1 / t_dot`.

mod chain;
mod kalman;
mod multi;

pub use chain::{
    build_chain, group_by_channel, oriented, track_single, ChainMode, ChainNode, DetectionsByChannel, Kinematics,
    TrackConfig, TrackInit, TrackStep, VehicleTrack,
};
pub use kalman::{associate, innovation_std, predict, rts_smooth, update, InnovationForm, MotionModel, Smoothed, StateEstimate};
pub use multi::{track_multi, validate_segments, MultiConfig, MultiResult, Segment};
