//! The `etg` command line: simulate, drive, train, evaluate, saliency, race.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::driveloop::{
    run_loop, AutopilotDriver, ClockMode, Driver, ExpertDriver, LightSense, LoopConfig, Models,
    RaceConfig, RaceMode, Rig, RunOutput, TeleopDriver, TeleopServer,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::pilots::{
    train, ExpertConfig, MaskBands, SteerNoise, SteeringConfig, SteeringModel, ThrottleConfig,
    ThrottleModel, TrafficConfig, TrafficModel, TrainHyper,
};
use crate::salience::{color_line_mask, dilate_mask, overlay};
use crate::tensorkit::Loss;
use crate::tubstore::{DriveMode, Tub, TubManifest};
use crate::vehiclesim::{Battery, Chemistry, VehicleParams};
use crate::workflows::{
    line_frames, saliency_study, steering_samples, throttle_samples, traffic_samples, MaskedFrame,
    NoiseConfig, LINE_MASK_DILATION,
};
use crate::worldsense::{
    build_track, synth_traffic_dataset, CameraConfig, CameraFrame, LightState, TrackSpec,
    TrafficSynthConfig, UltrasonicConfig, World,
};

pub const CONFIG_ENV: &str = "ETG_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatteryChoice {
    pub chemistry: Chemistry,
    pub soc: f64,
}

impl Default for BatteryChoice {
    fn default() -> Self {
        Self {
            chemistry: Chemistry::LiPo,
            soc: 1.0,
        }
    }
}

/// Every tunable in one document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub seed: u64,
    pub track: TrackSpec,
    pub vehicle: VehicleParams,
    pub battery: BatteryChoice,
    pub camera: CameraConfig,
    pub ultrasonic: UltrasonicConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub expert: ExpertConfig,
    /// Exploration noise for recorded expert runs; `null` disables it.
    pub noise: Option<NoiseConfig>,
    /// Autopilot speed when no throttle model is loaded, m/s.
    pub cruise_mps: f64,
    pub steering: SteeringConfig,
    pub throttle: ThrottleConfig,
    pub traffic: TrafficConfig,
    pub train: TrainHyper,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            track: TrackSpec::default(),
            vehicle: VehicleParams::default(),
            battery: BatteryChoice::default(),
            camera: CameraConfig::default(),
            ultrasonic: UltrasonicConfig::default(),
            loop_cfg: LoopConfig::default(),
            expert: ExpertConfig::default(),
            noise: Some(NoiseConfig::default()),
            cruise_mps: 2.0,
            steering: SteeringConfig::default(),
            throttle: ThrottleConfig::default(),
            traffic: TrafficConfig::default(),
            train: TrainHyper::default(),
        }
    }
}

impl StackConfig {
    /// Explicit path, else `$ETG_CONFIG`, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(env) {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = std::fs::read(&p).map_err(|e| Error::storage(&p, e))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn world(&self) -> Result<World> {
        Ok(World::new(build_track(&self.track)?, self.seed))
    }

    pub fn battery(&self) -> Battery {
        Battery::with_chemistry(self.battery.chemistry).with_soc(self.battery.soc)
    }

    pub fn rig(&self) -> Result<Rig> {
        let mut rig = Rig::new(
            self.world()?,
            self.vehicle.clone(),
            self.battery(),
            self.camera.clone(),
        );
        rig.ultrasonic = self.ultrasonic.clone();
        Ok(rig)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "etg",
    version,
    about = "Simulated RC car: record, train, drive and race"
)]
pub struct Cli {
    /// Configuration document (JSON); defaults to $ETG_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Headless seeded run with the expert or the autopilot; writes a tub and a summary.
    Sim(SimArgs),
    /// Serve the teleop protocol for human driving in real time.
    Drive(DriveArgs),
    /// Train a model from a tub (steering, throttle) or synthetic images (traffic).
    Train(TrainArgs),
    /// Closed-loop metrics for trained models.
    Eval(EvalArgs),
    /// Saliency heatmaps, overlays and line-overlap scores.
    Saliency(SaliencyArgs),
    /// Wait for green, then run a circuit or drag race.
    Race(RaceArgs),
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Track preset: oval, drag or scurve.
    #[arg(long)]
    pub track: Option<String>,
    #[arg(long)]
    pub seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub steering_model: Option<PathBuf>,
    #[arg(long)]
    pub throttle_model: Option<PathBuf>,
    #[arg(long)]
    pub traffic_model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriverKind {
    Expert,
    Autopilot,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, value_enum, default_value = "expert")]
    pub driver: DriverKind,
    /// Drive the expert without exploration noise.
    #[arg(long)]
    pub no_noise: bool,
    /// Tub directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DriveArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long)]
    pub port: Option<u16>,
    /// Tub directory for recording (toggled by the client).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Steering,
    Throttle,
    Traffic,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Steering => "steering",
            ModelKind::Throttle => "throttle",
            ModelKind::Traffic => "traffic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub which: ModelKind,
    #[arg(long)]
    pub tub: Option<PathBuf>,
    /// Synthetic samples for the traffic model.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Weight file to write; the report goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub laps: u32,
    /// Synthetic light images for the traffic accuracy check.
    #[arg(long, default_value_t = 200)]
    pub light_samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub steering_model: PathBuf,
    /// A PNG frame at model resolution.
    #[arg(long)]
    pub frame: Option<PathBuf>,
    #[arg(long)]
    pub tub: Option<PathBuf>,
    /// Record range `start..end` within the tub.
    #[arg(long)]
    pub range: Option<String>,
    /// Render this many on-track frames with ground-truth line masks.
    #[arg(long)]
    pub sim_frames: Option<usize>,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RaceKind {
    Circuit,
    Drag,
}

#[derive(Debug, Args)]
pub struct RaceArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, value_enum, default_value = "circuit")]
    pub kind: RaceKind,
    #[arg(long, default_value_t = 3)]
    pub laps: u32,
    /// Seconds the light stays red.
    #[arg(long, default_value_t = 2.0)]
    pub red_seconds: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `argv`, run, and return the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = StackConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Sim(a) => sim(&mut cfg, a),
        Command::Drive(a) => drive(&mut cfg, a),
        Command::Train(a) => train_cmd(&mut cfg, a),
        Command::Eval(a) => eval(&mut cfg, a),
        Command::Saliency(a) => saliency(&mut cfg, a),
        Command::Race(a) => race(&mut cfg, a),
    }
}

fn apply_world(cfg: &mut StackConfig, w: &WorldArgs) {
    if let Some(s) = w.seed {
        cfg.seed = s;
    }
    cfg.loop_cfg.seed = cfg.seed;
    if let Some(t) = &w.track {
        cfg.track = TrackSpec::Preset(t.clone());
    }
    if let Some(s) = w.seconds {
        cfg.loop_cfg.seconds = s;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn echo_config(dir: &Path, cfg: &StackConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    write_json(&dir.join("config.json"), cfg)
}

fn write_trace(path: &Path, out: &RunOutput) -> Result<()> {
    let mut buf = Vec::new();
    for t in &out.trace {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn load_models(m: &ModelArgs) -> Result<Models> {
    Ok(Models {
        steering: m
            .steering_model
            .as_deref()
            .map(SteeringModel::load)
            .transpose()?,
        throttle: m
            .throttle_model
            .as_deref()
            .map(ThrottleModel::load)
            .transpose()?,
        traffic: m
            .traffic_model
            .as_deref()
            .map(TrafficModel::load)
            .transpose()?,
    })
}

/// Camera at the steering model's resolution when one is loaded.
fn fit_camera(cfg: &mut StackConfig, models: &Models) {
    if let Some(s) = &models.steering {
        cfg.camera.width = s.cfg.width;
        cfg.camera.height = s.cfg.height;
    }
}

fn sim(cfg: &mut StackConfig, a: SimArgs) -> Result<()> {
    apply_world(cfg, &a.world);
    if a.no_noise {
        cfg.noise = None;
    }
    let models = load_models(&a.models)?;
    fit_camera(cfg, &models);
    let mut rig = cfg.rig()?;
    let mut driver: Box<dyn Driver> = match a.driver {
        DriverKind::Expert => {
            let noise = cfg
                .noise
                .map(|n| SteerNoise::new(cfg.seed.wrapping_add(0x4E01), n.sigma, n.theta))
                .transpose()?;
            Box::new(ExpertDriver::new(
                cfg.expert.clone(),
                cfg.vehicle.clone(),
                noise,
            ))
        }
        DriverKind::Autopilot => Box::new(AutopilotDriver::new(
            &models,
            &cfg.camera,
            &cfg.vehicle,
            cfg.cruise_mps,
        )?),
    };
    cfg.loop_cfg.mode = driver.mode();
    cfg.loop_cfg.record = true;
    cfg.loop_cfg.clock = ClockMode::Simulated;
    let doc = serde_json::to_value(&*cfg)?;
    let mut tub = Tub::create(
        &a.out,
        TubManifest::new(cfg.camera.width, cfg.camera.height, &doc, cfg.seed),
    )?;
    let out = run_loop(
        &cfg.loop_cfg,
        &mut rig,
        driver.as_mut(),
        &LightSense::GroundTruth,
        Some(&mut tub),
    )?;
    echo_config(&a.out, cfg)?;
    write_json(&a.out.join("summary.json"), &out.summary)?;
    write_trace(&a.out.join("trace.jsonl"), &out)?;
    println!(
        "{} ticks, {} records, {} departure ticks -> {}",
        out.summary.ticks,
        tub.len(),
        out.summary.departure_ticks,
        a.out.display()
    );
    Ok(())
}

fn drive(cfg: &mut StackConfig, a: DriveArgs) -> Result<()> {
    apply_world(cfg, &a.world);
    if a.world.seconds.is_none() {
        cfg.loop_cfg.seconds = 600.0;
    }
    if let Some(p) = a.port {
        cfg.loop_cfg.teleop_port = p;
    }
    let models = load_models(&a.models)?;
    fit_camera(cfg, &models);
    let autopilot = match &models.steering {
        Some(_) => Some(AutopilotDriver::new(
            &models,
            &cfg.camera,
            &cfg.vehicle,
            cfg.cruise_mps,
        )?),
        None => None,
    };
    let server = TeleopServer::bind(cfg.loop_cfg.teleop_port)?;
    eprintln!("teleop listening on {}", server.local_addr());
    let mut driver = TeleopDriver::new(server, autopilot, cfg.vehicle.clone());
    cfg.loop_cfg.mode = DriveMode::Manual;
    cfg.loop_cfg.record = false;
    cfg.loop_cfg.clock = ClockMode::WallClock;
    let mut rig = cfg.rig()?;
    let mut tub = match &a.out {
        Some(dir) => {
            let doc = serde_json::to_value(&*cfg)?;
            echo_config(dir, cfg)?;
            Some(Tub::create(
                dir,
                TubManifest::new(cfg.camera.width, cfg.camera.height, &doc, cfg.seed),
            )?)
        }
        None => None,
    };
    let out = run_loop(
        &cfg.loop_cfg,
        &mut rig,
        &mut driver,
        &LightSense::GroundTruth,
        tub.as_mut(),
    )?;
    if let Some(dir) = &a.out {
        write_json(&dir.join("summary.json"), &out.summary)?;
    }
    println!(
        "{} ticks at {:.1} Hz",
        out.summary.ticks, out.summary.mean_hz
    );
    Ok(())
}

fn side_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn train_cmd(cfg: &mut StackConfig, a: TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = a.loss {
        cfg.train.loss = match l {
            LossArg::Mse => Loss::Mse,
            LossArg::CrossEntropy => Loss::CrossEntropy,
        };
    }
    let need_tub = || -> Result<Tub> {
        let dir = a
            .tub
            .as_deref()
            .ok_or_else(|| Error::Config(format!("train {} needs --tub", a.which.as_str())))?;
        Tub::open(dir)
    };
    let report = match a.which {
        ModelKind::Steering => {
            let tub = need_tub()?;
            cfg.steering.width = tub.manifest().width;
            cfg.steering.height = tub.manifest().height;
            let mut model = SteeringModel::build(cfg.steering.clone(), cfg.seed)?;
            let data = steering_samples(&model, &tub)?;
            let report = train(
                &mut model.net,
                &data,
                &cfg.train,
                serde_json::to_value(&model.cfg)?,
            )?;
            model.save(&a.out)?;
            report
        }
        ModelKind::Throttle => {
            let tub = need_tub()?;
            let mut model = ThrottleModel::build(cfg.throttle.clone(), cfg.seed)?;
            let data = throttle_samples(&model, &tub)?;
            let report = train(
                &mut model.net,
                &data,
                &cfg.train,
                serde_json::to_value(&model.cfg)?,
            )?;
            model.save(&a.out)?;
            report
        }
        ModelKind::Traffic => {
            let mut model = TrafficModel::build(cfg.traffic.clone(), cfg.seed)?;
            let data = traffic_samples(&model, a.samples, cfg.seed)?;
            let report = train(
                &mut model.net,
                &data,
                &cfg.train,
                serde_json::to_value(&model.cfg)?,
            )?;
            model.save(&a.out)?;
            report
        }
    };
    write_json(&side_path(&a.out, ".report.json"), &report)?;
    write_json(&side_path(&a.out, ".config.json"), cfg)?;
    println!(
        "trained {}: loss {:.5} -> {:.5} over {} epochs -> {}",
        a.which.as_str(),
        report.initial_train_loss,
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        report.epochs_run,
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub laps_completed: u32,
    pub laps_requested: u32,
    pub departure_ticks: u64,
    pub collision_ticks: u64,
    pub max_abs_lane_offset: f64,
    /// Counts of |ΔPWM| between consecutive issued commands: 0, 1-5, 6-10, 11-15, 16-20, >20.
    pub throttle_delta_histogram: [u64; 6],
    /// 95th percentile of |ΔPWM| of the throttle model before smoothing.
    pub raw_throttle_delta_p95: Option<f64>,
    pub light_accuracy: Option<f64>,
    pub sim_time_s: f64,
}

pub fn delta_histogram(pwms: &[i32]) -> [u64; 6] {
    let mut h = [0u64; 6];
    for p in pwms.windows(2) {
        let d = (p[1] - p[0]).unsigned_abs();
        let bucket = match d {
            0 => 0,
            1..=5 => 1,
            6..=10 => 2,
            11..=15 => 3,
            16..=20 => 4,
            _ => 5,
        };
        h[bucket] += 1;
    }
    h
}

/// Nearest-rank percentile of |Δ| over consecutive values.
pub fn delta_percentile(values: &[i32], pct: f64) -> Option<f64> {
    let mut d: Vec<u32> = values
        .windows(2)
        .map(|p| (p[1] - p[0]).unsigned_abs())
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_unstable();
    let rank = ((pct / 100.0) * d.len() as f64).ceil().max(1.0) as usize;
    Some(d[rank.min(d.len()) - 1] as f64)
}

/// Fraction of `n` fresh synthetic light images classified correctly.
pub fn light_accuracy(model: &TrafficModel, n: usize, seed: u64) -> Result<f64> {
    let cfg = TrafficSynthConfig {
        width: model.cfg.width,
        height: model.cfg.height,
    };
    let data = synth_traffic_dataset(&mut ChaCha8Rng::seed_from_u64(seed), n, 0.5, &cfg);
    let mut correct = 0;
    for (f, label) in &data {
        if model.classify(f)?.0 == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n.max(1) as f64)
}

fn eval(cfg: &mut StackConfig, a: EvalArgs) -> Result<()> {
    apply_world(cfg, &a.world);
    if a.world.seconds.is_none() {
        cfg.loop_cfg.seconds = 120.0 * a.laps.max(1) as f64;
    }
    let models = load_models(&a.models)?;
    fit_camera(cfg, &models);
    let mut driver = AutopilotDriver::new(&models, &cfg.camera, &cfg.vehicle, cfg.cruise_mps)?;
    cfg.loop_cfg.mode = DriveMode::Autopilot;
    cfg.loop_cfg.record = false;
    cfg.loop_cfg.race = RaceConfig {
        mode: RaceMode::Circuit { laps: a.laps },
        green_debounce: cfg.loop_cfg.race.green_debounce,
    };
    let mut rig = cfg.rig()?;
    let out = run_loop(
        &cfg.loop_cfg,
        &mut rig,
        &mut driver,
        &LightSense::GroundTruth,
        None,
    )?;
    let pwms: Vec<i32> = out.trace.iter().map(|t| t.throttle_pwm).collect();
    let raw: Vec<i32> = out.trace.iter().filter_map(|t| t.raw_pwm).collect();
    let report = EvalReport {
        laps_completed: out.summary.laps,
        laps_requested: a.laps,
        departure_ticks: out.summary.departure_ticks,
        collision_ticks: out.summary.collision_ticks,
        max_abs_lane_offset: out.summary.max_abs_lane_offset,
        throttle_delta_histogram: delta_histogram(&pwms),
        raw_throttle_delta_p95: delta_percentile(&raw, 95.0),
        light_accuracy: models
            .traffic
            .as_ref()
            .map(|m| light_accuracy(m, a.light_samples, cfg.seed.wrapping_add(0x7E57)))
            .transpose()?,
        sim_time_s: out.summary.sim_time_s,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &a.out {
        echo_config(dir, cfg)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<(u64, u64)> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Error::Argument(format!("range {s:?} must look like start..end")))?;
    let a: u64 = a
        .parse()
        .map_err(|_| Error::Argument(format!("bad range start {a:?}")))?;
    let b: u64 = b
        .parse()
        .map_err(|_| Error::Argument(format!("bad range end {b:?}")))?;
    if a >= b {
        return Err(Error::Argument(format!("empty range {s}")));
    }
    Ok((a, b))
}

fn load_png_frame(path: &Path) -> Result<CameraFrame> {
    let img = image::open(path)?.to_rgb8();
    CameraFrame::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

fn saliency(cfg: &mut StackConfig, a: SaliencyArgs) -> Result<()> {
    apply_world(cfg, &a.world);
    let model = SteeringModel::load(&a.steering_model)?;
    cfg.camera.width = model.cfg.width;
    cfg.camera.height = model.cfg.height;
    let (w, h) = (model.cfg.width, model.cfg.height);
    let from_colors = |frame: CameraFrame| MaskedFrame {
        line_mask: dilate_mask(
            &color_line_mask(&frame, &MaskBands::default()),
            w,
            h,
            LINE_MASK_DILATION,
        ),
        interior_mask: None,
        frame,
    };
    let (frames, mask_source): (Vec<MaskedFrame>, &str) = if let Some(n) = a.sim_frames {
        (
            line_frames(&cfg.rig()?, &cfg.expert, n, 10, cfg.loop_cfg.loop_hz)?,
            "ground_truth",
        )
    } else if let Some(p) = &a.frame {
        (vec![from_colors(load_png_frame(p)?)], "color")
    } else if let Some(dir) = &a.tub {
        let tub = Tub::open(dir)?;
        let (lo, hi) = match &a.range {
            Some(r) => parse_range(r)?,
            None => (0, tub.len()),
        };
        let mut v = Vec::new();
        for seq in lo..hi.min(tub.len()) {
            v.push(from_colors(tub.read_frame(&tub.read_record(seq)?)?));
        }
        (v, "color")
    } else {
        return Err(Error::Config(
            "saliency needs --frame, --tub or --sim-frames".into(),
        ));
    };
    if frames.is_empty() {
        return Err(Error::Data("no frames selected".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::storage(&a.out, e))?;
    let (study, maps) = saliency_study(&model, &frames, cfg.seed)?;
    for (i, (f, hm)) in frames.iter().zip(&maps).enumerate() {
        write_atomic(&a.out.join(format!("heat_{i:04}.png")), &hm.to_png()?)?;
        let blended = overlay(&f.frame, hm, a.alpha)?;
        write_atomic(
            &a.out.join(format!("overlay_{i:04}.png")),
            &crate::tubstore::encode_png(&blended)?,
        )?;
    }
    let doc = serde_json::json!({ "mask_source": mask_source, "study": study });
    write_json(&a.out.join("scores.json"), &doc)?;
    echo_config(&a.out, cfg)?;
    println!(
        "{} frames: mean line overlap {:.3}, random baseline {:.3}, ratio {:.2}{}",
        frames.len(),
        study.mean_score,
        study.mean_baseline,
        study.ratio,
        study
            .mean_interior
            .map(|m| format!(", lane interior {m:.3}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn race(cfg: &mut StackConfig, a: RaceArgs) -> Result<()> {
    if a.world.track.is_none() {
        cfg.track = TrackSpec::Preset(
            match a.kind {
                RaceKind::Circuit => "oval",
                RaceKind::Drag => "drag",
            }
            .into(),
        );
    }
    apply_world(cfg, &a.world);
    if a.world.seconds.is_none() {
        cfg.loop_cfg.seconds = a.red_seconds + 60.0 * a.laps.max(1) as f64;
    }
    let models = load_models(&a.models)?;
    fit_camera(cfg, &models);
    cfg.loop_cfg.race = RaceConfig {
        mode: match a.kind {
            RaceKind::Circuit => RaceMode::Circuit { laps: a.laps },
            RaceKind::Drag => RaceMode::Drag,
        },
        green_debounce: cfg.loop_cfg.race.green_debounce,
    };
    cfg.loop_cfg.record = false;
    let mut rig = cfg.rig()?;
    rig.world.light.state = LightState::Red;
    rig.world.light.green_at_s = Some(a.red_seconds);
    let mut driver: Box<dyn Driver> = if models.steering.is_some() {
        Box::new(AutopilotDriver::new(
            &models,
            &cfg.camera,
            &cfg.vehicle,
            cfg.cruise_mps,
        )?)
    } else {
        Box::new(ExpertDriver::new(
            cfg.expert.clone(),
            cfg.vehicle.clone(),
            None,
        ))
    };
    cfg.loop_cfg.mode = driver.mode();
    let light = match &models.traffic {
        Some(m) => LightSense::Classifier(m.clone()),
        None => LightSense::GroundTruth,
    };
    let out = run_loop(&cfg.loop_cfg, &mut rig, driver.as_mut(), &light, None)?;
    let s = &out.summary;
    println!(
        "phase {}, start {:?}, finish {:?}, laps {}, departure ticks {}",
        s.race_phase.as_str(),
        s.start_t,
        s.finish_t,
        s.laps,
        s.departure_ticks
    );
    if let Some(dir) = &a.out {
        echo_config(dir, cfg)?;
        write_json(&dir.join("summary.json"), &out.summary)?;
        write_trace(&dir.join("trace.jsonl"), &out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(dispatch(["etg", "frobnicate"]), 2);
        assert_eq!(dispatch(["etg", "sim", "--bogus"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        for sub in ["sim", "drive", "train", "eval", "saliency", "race"] {
            assert_eq!(dispatch(["etg", sub, "--help"]), 0, "{sub}");
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 3, "warp_drive": true}"#).unwrap();
        assert!(matches!(StackConfig::load(Some(&p)), Err(Error::Config(_))));
        std::fs::write(&p, r#"{"seed": 3, "loop": {"loop_hz": 24}}"#).unwrap();
        let c = StackConfig::load(Some(&p)).unwrap();
        assert_eq!(
            (c.seed, c.loop_cfg.loop_hz, c.loop_cfg.sensor_hz),
            (3, 24.0, 12.0)
        );
    }

    #[test]
    fn histogram_and_percentile() {
        let p = [220, 220, 223, 240, 260, 300];
        assert_eq!(delta_histogram(&p), [1, 1, 0, 0, 2, 1]);
        assert_eq!(delta_percentile(&p, 95.0), Some(40.0));
        assert_eq!(delta_percentile(&p, 50.0), Some(17.0));
        assert_eq!(delta_percentile(&[1], 95.0), None);
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("3..10").unwrap(), (3, 10));
        assert!(parse_range("10..3").is_err());
        assert!(parse_range("x").is_err());
    }
}
