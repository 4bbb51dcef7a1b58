//! End-to-end recipes shared by the command line, examples and tests:
//! record demonstrations, build training sets, run closed-loop evaluations.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::driveloop::{
    run_loop, AutopilotDriver, ExpertDriver, LightSense, LoopConfig, Models, RaceConfig, RaceMode,
    Rig, RunOutput, RunSummary,
};
use crate::error::{Error, Result};
use crate::pilots::{
    expert_driver, train, ExpertConfig, Sample, SteerNoise, SteeringConfig, SteeringModel,
    ThrottleModel, TrafficModel, TrainHyper, TrainReport,
};
use crate::salience::{
    dilate_mask, line_overlap_score, random_heatmap, saliency_map, Heatmap, SaliencyTarget,
};
use crate::tensorkit::Loss;
use crate::tubstore::{load_dataset, Dataset, DatasetTarget, DriveMode, Tub, TubManifest};
use crate::vehiclesim::{speed_hold_pwm, step_vehicle, Battery, VehicleParams};
use crate::worldsense::{
    build_track, render_camera, render_line_mask, render_road_mask, synth_traffic_dataset,
    CameraConfig, CameraFrame, TrackSpec, TrafficSynthConfig, World,
};

/// Dilation applied to ground-truth line masks before overlap scoring.
pub const LINE_MASK_DILATION: usize = 2;

/// Exploration noise on the expert's executed steering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub theta: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            theta: 0.08,
        }
    }
}

pub fn preset_world(track: &str, seed: u64) -> Result<World> {
    Ok(World::new(
        build_track(&TrackSpec::Preset(track.into()))?,
        seed,
    ))
}

/// Drive the expert for `seconds` of simulated time, recording every tick into a new tub at `dir`.
pub fn record_expert(
    dir: &Path,
    rig: &mut Rig,
    expert: &ExpertConfig,
    noise: Option<NoiseConfig>,
    cfg: &LoopConfig,
) -> Result<(Tub, RunOutput)> {
    let config_doc = serde_json::json!({ "loop": cfg, "expert": expert, "noise": noise });
    let noise = noise
        .map(|n| SteerNoise::new(cfg.seed.wrapping_add(0x4E01), n.sigma, n.theta))
        .transpose()?;
    let mut driver = ExpertDriver::new(expert.clone(), rig.vehicle.clone(), noise);
    let mut tub = Tub::create(
        dir,
        TubManifest::new(rig.camera.width, rig.camera.height, &config_doc, cfg.seed),
    )?;
    let cfg = LoopConfig {
        mode: DriveMode::Manual,
        record: true,
        ..cfg.clone()
    };
    let out = run_loop(
        &cfg,
        rig,
        &mut driver,
        &LightSense::GroundTruth,
        Some(&mut tub),
    )?;
    Ok((tub, out))
}

pub fn steering_samples(model: &SteeringModel, tub: &Tub) -> Result<Vec<Sample>> {
    let Dataset::Steering(set) = load_dataset(tub, DatasetTarget::Steering, 0)? else {
        return Err(Error::Internal(
            "steering load returned another dataset".into(),
        ));
    };
    set.frames
        .iter()
        .zip(&set.targets)
        .map(|(f, t)| model.sample(f, t))
        .collect()
}

pub fn throttle_samples(model: &ThrottleModel, tub: &Tub) -> Result<Vec<Sample>> {
    let Dataset::Throttle(set) = load_dataset(tub, DatasetTarget::Throttle, model.cfg.window)?
    else {
        return Err(Error::Internal(
            "throttle load returned another dataset".into(),
        ));
    };
    (0..set.windows.len())
        .map(|i| model.sample(set.window_at(i), set.windows[i].1))
        .collect()
}

/// `n` synthetic light views, half red on average.
pub fn traffic_samples(model: &TrafficModel, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let cfg = TrafficSynthConfig {
        width: model.cfg.width,
        height: model.cfg.height,
    };
    synth_traffic_dataset(&mut ChaCha8Rng::seed_from_u64(seed), n, 0.5, &cfg)
        .iter()
        .map(|(f, l)| model.sample(f, *l))
        .collect()
}

/// Autopilot run that ends after `laps` crossings of the start line or when time runs out.
pub fn autopilot_laps(
    rig: &mut Rig,
    models: &Models,
    laps: u32,
    seconds: f64,
    cruise_mps: f64,
    seed: u64,
) -> Result<RunOutput> {
    let mut driver = AutopilotDriver::new(models, &rig.camera, &rig.vehicle, cruise_mps)?;
    let cfg = LoopConfig {
        mode: DriveMode::Autopilot,
        seconds,
        seed,
        race: RaceConfig {
            mode: RaceMode::Circuit { laps },
            green_debounce: 3,
        },
        ..LoopConfig::default()
    };
    run_loop(&cfg, rig, &mut driver, &LightSense::GroundTruth, None)
}

/// Rig on a preset track with default vehicle, a full LiPo and the given camera.
pub fn preset_rig(track: &str, seed: u64, camera: CameraConfig) -> Result<Rig> {
    Ok(Rig::new(
        preset_world(track, seed)?,
        VehicleParams::default(),
        Battery::lipo(),
        camera,
    ))
}

/// A frame with its ground-truth masks, row-major like the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFrame {
    pub frame: CameraFrame,
    /// Lane-line pixels, dilated by [`LINE_MASK_DILATION`].
    pub line_mask: Vec<bool>,
    /// Road between the lines; `None` when only the frame's colors are known.
    pub interior_mask: Option<Vec<bool>>,
}

/// `n` on-track frames taken every `stride` ticks of a clean expert drive.
pub fn line_frames(
    rig: &Rig,
    expert: &ExpertConfig,
    n: usize,
    stride: usize,
    loop_hz: f64,
) -> Result<Vec<MaskedFrame>> {
    let dt = 1.0 / loop_hz;
    let mut state = rig.state;
    let mut battery = rig.battery.clone();
    let mut out = Vec::with_capacity(n);
    let mut tick = 0usize;
    while out.len() < n {
        if tick.is_multiple_of(stride.max(1)) {
            let line = render_line_mask(&rig.world, &state, &rig.camera);
            out.push(MaskedFrame {
                frame: render_camera(&rig.world, &state, &rig.camera),
                line_mask: dilate_mask(
                    &line,
                    rig.camera.width,
                    rig.camera.height,
                    LINE_MASK_DILATION,
                ),
                interior_mask: Some(render_road_mask(&rig.world, &state, &rig.camera)),
            });
        }
        let (u, pwm) = expert_driver(&rig.world, &state, expert, &rig.vehicle)?;
        let (next, drained) = step_vehicle(&state, pwm, u, dt, &rig.vehicle, &battery)?;
        state = next;
        battery = drained;
        tick += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyStudy {
    pub scores: Vec<f64>,
    pub baseline_scores: Vec<f64>,
    pub mean_score: f64,
    pub mean_baseline: f64,
    /// `mean_score / mean_baseline`.
    pub ratio: f64,
    /// Top-decile overlap with the lane interior, for frames that carry one. Reported, not judged.
    pub interior_scores: Vec<f64>,
    pub mean_interior: Option<f64>,
}

/// Overlap of chosen-bin saliency with line masks against a seeded random-heatmap baseline.
pub fn saliency_study(
    model: &SteeringModel,
    frames: &[MaskedFrame],
    seed: u64,
) -> Result<(SaliencyStudy, Vec<Heatmap>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(frames.len());
    let mut baseline_scores = Vec::with_capacity(frames.len());
    let mut interior_scores = Vec::new();
    let mut maps = Vec::with_capacity(frames.len());
    for f in frames {
        let hm = saliency_map(model, &f.frame, SaliencyTarget::Chosen)?;
        scores.push(line_overlap_score(&hm, &f.line_mask)?);
        if let Some(interior) = &f.interior_mask {
            interior_scores.push(line_overlap_score(&hm, interior)?);
        }
        let base = random_heatmap(hm.width, hm.height, &mut rng);
        baseline_scores.push(line_overlap_score(&base, &f.line_mask)?);
        maps.push(hm);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (mean_score, mean_baseline) = (mean(&scores), mean(&baseline_scores));
    Ok((
        SaliencyStudy {
            ratio: if mean_baseline > 0.0 {
                mean_score / mean_baseline
            } else {
                f64::INFINITY
            },
            mean_interior: (!interior_scores.is_empty()).then(|| mean(&interior_scores)),
            scores,
            baseline_scores,
            mean_score,
            mean_baseline,
            interior_scores,
        },
        maps,
    ))
}

/// Recording length for a cloning trial: 2100 frames at 25 Hz.
pub const CLONING_RECORD_S: f64 = 84.0;
/// Autopilot speed used by cloning trials, m/s.
pub const CLONING_CRUISE_MPS: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct CloningTrial {
    pub frames: u64,
    pub expert_departure_ticks: u64,
    pub report: TrainReport,
    pub model: SteeringModel,
    pub lap: RunSummary,
}

impl CloningTrial {
    /// One full lap with the car inside the lane on every tick.
    pub fn passed(&self) -> bool {
        self.lap.laps >= 1 && self.lap.departure_ticks == 0
    }
}

/// Record noisy expert laps on the oval into `dir`, train a `size`×`size`
/// steering model for 15 epochs, then drive one autopilot lap on a fresh world.
pub fn behavior_cloning_trial(
    dir: &Path,
    seed: u64,
    size: usize,
    loss: Loss,
) -> Result<CloningTrial> {
    let camera = CameraConfig {
        width: size,
        height: size,
        ..CameraConfig::default()
    };
    let mut rig = preset_rig("oval", seed, camera.clone())?;
    let cfg = LoopConfig {
        seconds: CLONING_RECORD_S,
        seed,
        ..LoopConfig::default()
    };
    let (tub, rec) = record_expert(
        dir,
        &mut rig,
        &ExpertConfig::default(),
        Some(NoiseConfig::default()),
        &cfg,
    )?;
    let mut model = SteeringModel::build(
        SteeringConfig {
            width: size,
            height: size,
            ..SteeringConfig::default()
        },
        seed,
    )?;
    let data = steering_samples(&model, &tub)?;
    let hyper = TrainHyper {
        epochs: 15,
        seed,
        loss,
        ..TrainHyper::default()
    };
    let report = train(
        &mut model.net,
        &data,
        &hyper,
        serde_json::to_value(&model.cfg)?,
    )?;
    let models = Models {
        steering: Some(model),
        ..Models::default()
    };
    let mut rig = preset_rig("oval", seed + 100, camera)?;
    let lap = autopilot_laps(&mut rig, &models, 1, 90.0, CLONING_CRUISE_MPS, seed)?.summary;
    let Some(model) = models.steering else {
        return Err(Error::Internal("steering model vanished".into()));
    };
    Ok(CloningTrial {
        frames: tub.len(),
        expert_departure_ticks: rec.summary.departure_ticks,
        report,
        model,
        lap,
    })
}

/// PWM a speed-hold controller issues while driving straight at `v_target`
/// until the pack is empty, as `(state of charge, pwm)` every `dt` seconds.
pub fn speed_hold_discharge(
    battery: Battery,
    params: &VehicleParams,
    v_target: f64,
    dt: f64,
) -> Result<Vec<(f64, i32)>> {
    if !(v_target > 0.0) {
        return Err(Error::Argument(format!(
            "target speed must be > 0, got {v_target}"
        )));
    }
    let mut state = crate::vehiclesim::VehicleState::default();
    let mut battery = battery;
    let mut out = Vec::new();
    while battery.soc() > 0.0 {
        let pwm = speed_hold_pwm(v_target, params, &battery)?;
        out.push((battery.soc(), pwm));
        let (next, drained) = step_vehicle(&state, pwm, 0.0, dt, params, &battery)?;
        state = next;
        battery = drained;
    }
    Ok(out)
}
