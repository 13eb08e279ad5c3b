//! Pipeline configuration: one TOML file with a section per stage plus
//! optional artifact paths.

use std::path::{Path, PathBuf};

use roadfiber::calib::CalibrationConfig;
use roadfiber::characterize::{WeightConfig, WheelbaseConfig};
use roadfiber::detect::DetectorConfig;
use roadfiber::eval::{ScenarioConfig, ScenarioMatrix};
use roadfiber::track::MultiConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Scene for `simulate`, and the base scenario of `eval`.
    pub scenario: ScenarioConfig,
    pub calibration: CalibrationStage,
    pub detector: DetectorConfig,
    pub tracking: MultiConfig,
    pub characterize: CharacterizeStage,
    /// Variations around `scenario` for `eval`.
    pub eval: ScenarioMatrix,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CalibrationStage {
    #[serde(flatten)]
    pub calibration: CalibrationConfig,
    /// Tap detection threshold in robust noise sigmas.
    pub tap_threshold_sigmas: f64,
    pub tap_dead_time_s: f64,
}

impl Default for CalibrationStage {
    fn default() -> Self {
        Self { calibration: CalibrationConfig::default(), tap_threshold_sigmas: 8.0, tap_dead_time_s: 0.5 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CharacterizeStage {
    /// Calibrated channels this close to a road feature feed the wheelbase estimate.
    pub feature_radius_m: f64,
    pub wheelbase: WheelbaseConfig,
    pub weight: WeightConfig,
}

impl Default for CharacterizeStage {
    fn default() -> Self {
        Self { feature_radius_m: 1.5, wheelbase: WheelbaseConfig::default(), weight: WeightConfig::default() }
    }
}

/// Input locations. Unset entries default to the standard file name inside
/// the output directory; relative paths resolve against the config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub drive: Option<PathBuf>,
    pub gps: Option<PathBuf>,
    pub tap_log: Option<PathBuf>,
    pub centerline: Option<PathBuf>,
    pub recording: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub segments: Option<PathBuf>,
    pub tracks: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

/// Standard artifact names.
pub mod names {
    pub const DRIVE: &str = "drive.f32";
    pub const GPS: &str = "gps.csv";
    pub const TAP_LOG: &str = "tap_log.csv";
    pub const CENTERLINE: &str = "centerline.csv";
    pub const RECORDING: &str = "recording.f32";
    pub const TRUTH: &str = "truth.csv";
    pub const TRUE_CALIBRATION: &str = "true_calibration.csv";
    pub const CALIBRATION: &str = "calibration.csv";
    pub const DETECTIONS: &str = "detections.csv";
    pub const SEGMENTS: &str = "segments.csv";
    pub const TRACKS: &str = "tracks.csv";
    pub const FEATURES: &str = "features.csv";
    pub const CHARACTERS: &str = "characters.csv";
}

pub fn load(path: Option<&Path>) -> Result<(PipelineConfig, PathBuf), CliError> {
    let Some(path) = path else {
        return Ok((PipelineConfig::default(), PathBuf::from(".")));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

/// Where a stage finds one input.
pub struct Resolver<'a> {
    pub base: &'a Path,
    pub out: &'a Path,
}

impl Resolver<'_> {
    fn path(&self, configured: &Option<PathBuf>, default: &str) -> (PathBuf, bool) {
        match configured {
            Some(p) if p.is_absolute() => (p.clone(), true),
            Some(p) => (self.base.join(p), true),
            None => (self.out.join(default), false),
        }
    }

    /// A required input; it must exist before the stage starts.
    pub fn input(&self, configured: &Option<PathBuf>, default: &str) -> Result<PathBuf, CliError> {
        let (p, _) = self.path(configured, default);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Config(format!("input {} does not exist", p.display())))
        }
    }

    /// An optional input: absent defaults are skipped, but a configured path
    /// must exist.
    pub fn optional(&self, configured: &Option<PathBuf>, default: &str) -> Result<Option<PathBuf>, CliError> {
        let (p, explicit) = self.path(configured, default);
        match (p.is_file(), explicit) {
            (true, _) => Ok(Some(p)),
            (false, false) => Ok(None),
            (false, true) => Err(CliError::Config(format!("input {} does not exist", p.display()))),
        }
    }
}
