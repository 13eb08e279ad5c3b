//! One function per subcommand. Every stage reads files and writes files,
//! so any stage can be rerun from the persisted outputs of the previous one.

use std::path::Path;

use roadfiber::calib::{calibrate, detect_taps, GpsTrack, TapEvent};
use roadfiber::characterize::{characterize_tracks, CharacterizeConfig};
use roadfiber::detect::detect_all;
use roadfiber::eval::{emit_plots, feature_channels, run_eval, simulate_campaign, ScenarioMatrix};
use roadfiber::geo::Centerline;
use roadfiber::io::{self, GpsRow, TapLogEntry};
use roadfiber::track::{track_multi, ChainMode, Segment};

use crate::config::{names, PipelineConfig, Resolver};
use crate::CliError;

pub fn simulate(cfg: &PipelineConfig, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut scenario = cfg.scenario.clone();
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let c = simulate_campaign(&scenario)?;
    io::write_matrix(&out.join(names::DRIVE), &c.drive_das)?;
    io::write_matrix(&out.join(names::RECORDING), &c.das)?;
    let gps: Vec<GpsRow> = c
        .drive
        .gps_runs
        .iter()
        .enumerate()
        .flat_map(|(run, g)| g.samples().iter().map(move |&(time_s, lat, lon)| GpsRow { run, time_s, lat, lon }))
        .collect();
    io::write_gps(&out.join(names::GPS), &gps)?;
    let (first, last) = match (c.layout.lead_in.iter().min(), c.layout.lead_in.iter().max()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(CliError::Config("layout has no lead-in channels to tap".into())),
    };
    let log: Vec<TapLogEntry> = c
        .drive
        .taps
        .iter()
        .map(|t| TapLogEntry { reference_time_s: t.reference_time_s, first_channel: first, last_channel: last })
        .collect();
    io::write_tap_log(&out.join(names::TAP_LOG), &log)?;
    io::write_centerline(&out.join(names::CENTERLINE), c.layout.centerline.points())?;
    io::write_ground_truth(&out.join(names::TRUTH), &c.truth)?;
    io::write_calibration(&out.join(names::TRUE_CALIBRATION), &c.layout.sensors)?;
    io::write_positions(&out.join(names::FEATURES), &c.scene.road_features)?;
    io::write_segments(&out.join(names::SEGMENTS), &[Segment { start: 0, end: c.das.channel_count() }])?;
    println!(
        "simulated {} vehicles over {} channels, {:.1} s (seed {})",
        c.truth.vehicles.len(),
        c.das.channel_count(),
        c.das.duration_s(),
        scenario.seed
    );
    Ok(())
}

pub fn calibrate_stage(cfg: &PipelineConfig, paths: &Resolver, out: &Path) -> Result<(), CliError> {
    let p = &cfg.paths;
    let das_path = paths.input(&p.drive, names::DRIVE)?;
    let gps_path = paths.input(&p.gps, names::GPS)?;
    let log_path = paths.input(&p.tap_log, names::TAP_LOG)?;
    let centerline_path = paths.input(&p.centerline, names::CENTERLINE)?;
    let stage = &cfg.calibration;

    let das = io::read_matrix(&das_path)?;
    let centerline = Centerline::new(io::read_centerline(&centerline_path)?)?;
    let runs = io::read_gps(&gps_path)?
        .into_iter()
        .map(|samples| Ok(GpsTrack::new(samples)?.projected_onto(&centerline)))
        .collect::<roadfiber::Result<Vec<_>>>()?;
    let log = io::read_tap_log(&log_path)?;
    let mut channels: Vec<usize> = log.iter().flat_map(|t| t.first_channel..=t.last_channel).collect();
    channels.sort_unstable();
    channels.dedup();
    let found = detect_taps(&das, &channels, stage.tap_threshold_sigmas, stage.tap_dead_time_s)?;
    if found.len() != log.len() {
        return Err(roadfiber::Error::Data(format!("found {} taps in the recording, {} were logged", found.len(), log.len())).into());
    }
    let taps: Vec<TapEvent> = found
        .iter()
        .zip(&log)
        .map(|(&d, l)| TapEvent { das_time_s: d, reference_time_s: l.reference_time_s })
        .collect();
    let result = calibrate(&das, &runs, &taps, &stage.calibration)?;
    io::write_calibration(&out.join(names::CALIBRATION), &result.table)?;
    println!(
        "calibrated {} channels ({} coupled), clock offset {:.4} s",
        result.table.entries().len(),
        result.table.coupled().count(),
        result.clock.offset_s
    );
    Ok(())
}

pub fn detect(cfg: &PipelineConfig, paths: &Resolver, out: &Path) -> Result<(), CliError> {
    let das = io::read_matrix(&paths.input(&cfg.paths.recording, names::RECORDING)?)?;
    let table = io::read_calibration(&paths.input(&cfg.paths.calibration, names::CALIBRATION)?)?;
    let detections = detect_all(&das, &table, &cfg.detector)?;
    io::write_detections(&out.join(names::DETECTIONS), &detections)?;
    println!("{} detections", detections.len());
    Ok(())
}

pub fn track(cfg: &PipelineConfig, paths: &Resolver, out: &Path) -> Result<(), CliError> {
    let detections = io::read_detections(&paths.input(&cfg.paths.detections, names::DETECTIONS)?)?;
    let table = io::read_calibration(&paths.input(&cfg.paths.calibration, names::CALIBRATION)?)?;
    let segments = match paths.optional(&cfg.paths.segments, names::SEGMENTS)? {
        Some(p) => io::read_segments(&p)?,
        None => {
            let end = table.entries().last().map_or(0, |e| e.channel() + 1);
            vec![Segment { start: 0, end }]
        }
    };
    let result = track_multi(&detections, &table, &segments, &cfg.tracking, ChainMode::Calibrated)?;
    io::write_tracks(&out.join(names::TRACKS), &result.tracks)?;
    println!("{} tracks, {} unassociated detections", result.tracks.len(), result.residue.len());
    Ok(())
}

pub fn characterize(cfg: &PipelineConfig, paths: &Resolver, out: &Path) -> Result<(), CliError> {
    let tracks = io::read_tracks(&paths.input(&cfg.paths.tracks, names::TRACKS)?)?;
    let das = io::read_matrix(&paths.input(&cfg.paths.recording, names::RECORDING)?)?;
    let table = io::read_calibration(&paths.input(&cfg.paths.calibration, names::CALIBRATION)?)?;
    let features = match paths.optional(&cfg.paths.features, names::FEATURES)? {
        Some(p) => io::read_positions(&p)?,
        None => Vec::new(),
    };
    let stage = &cfg.characterize;
    let char_cfg = CharacterizeConfig {
        feature_channels: feature_channels(&table, &features, stage.feature_radius_m),
        wheelbase: stage.wheelbase,
        weight: stage.weight,
    };
    let characters = characterize_tracks(&tracks, &das, &table, &char_cfg)?;
    io::write_characters(&out.join(names::CHARACTERS), &characters)?;
    let with = |f: fn(&roadfiber::characterize::VehicleCharacter) -> bool| characters.iter().filter(|c| f(c)).count();
    println!(
        "{} vehicles: {} with wheelbase, {} with weight",
        characters.len(),
        with(|c| c.wheelbase_m.is_some()),
        with(|c| c.weight_tons.is_some())
    );
    Ok(())
}

pub fn eval(cfg: &PipelineConfig, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut matrix = ScenarioMatrix { base: cfg.scenario.clone(), ..cfg.eval.clone() };
    if let Some(seed) = seed {
        matrix.base.seed = seed;
    }
    let scenarios = matrix.expand()?;
    let report = run_eval(&scenarios);
    let files = emit_plots(&report, out)?;
    for (name, error) in &report.failures {
        eprintln!("scenario {name} failed: {error}");
    }
    println!("{} of {} scenarios scored", scenarios.len() - report.failures.len(), scenarios.len());
    for f in files {
        println!("wrote {}", f.display());
    }
    if report.failures.len() == scenarios.len() {
        return Err(roadfiber::Error::Data("every scenario failed".into()).into());
    }
    Ok(())
}
