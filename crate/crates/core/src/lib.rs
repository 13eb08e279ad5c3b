//! Traffic monitoring from distributed acoustic sensing (DAS) recordings of
//! roadside telecom fiber.
//!
//! The crate turns a channel-by-time strain matrix into per-vehicle
//! detections, tracks (position and speed along the road) and
//! characteristics (wheelbase and weight). It also contains the driving-test
//! calibration that places every virtual sensor on the road and measures its
//! transmissibility, and a half-space simulator that produces ground-truthed
//! recordings for verification.
//!
//! Pipeline:
//!
//! 1. [`calib`]: clock sync from tap tests, GPS geo-localization, transmissibility.
//! 2. [`detect`]: LOESS smoothing and transmissibility-adaptive prominence detection.
//! 3. [`track`]: spatial-domain Kalman filtering with RTS smoothing, multi-vehicle management.
//! 4. [`characterize`]: wheelbase from wheel-impulse autocorrelation, weight from prominences.
//!
//! [`sim`] generates synthetic scenes and [`eval`] scores the pipeline against them.

pub mod calib;
pub mod characterize;
pub mod detect;
mod error;
pub mod eval;
pub mod filter;
pub mod geo;
pub mod io;
pub mod sim;
mod stats;
pub mod track;
mod types;

pub use error::{Error, Result};
pub use types::{
    classify, CalibrationTable, ChannelCalibration, ChannelMatrix, Detection, Direction, GeoPoint, Pattern, Polarity,
};
