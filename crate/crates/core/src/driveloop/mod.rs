//! The fixed-rate drive loop: camera, sensor mailbox, pilot, race gate,
//! vehicle step, recording and telemetry.

mod mailbox;
mod race;
mod schedule;
mod teleop;

pub use mailbox::{MailboxRead, SensorMailbox, SensorPoller, SharedMailbox};
pub use race::{
    race_supervisor, LapTracker, RaceConfig, RaceMode, RacePhase, RaceState, ThrottleGate,
    DRAG_RUNOUT_M,
};
pub use schedule::{Event, Schedule};
pub use teleop::{
    ClientMsg, DropOldest, ServerMsg, TelemetryMsg, TeleopEvent, TeleopServer, DEFAULT_TELEOP_PORT,
};

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pilots::{
    expert_driver, smooth_throttle, ExpertConfig, SteerNoise, SteeringModel, ThrottleModel,
    TrafficModel,
};
use crate::tubstore::{encode_png, DriveMode, Tub, TubRecord};
use crate::vehiclesim::{
    battery_voltage, step_vehicle, velocity_to_pwm, Battery, VehicleParams, VehicleState,
};
use crate::worldsense::{
    collision, departed, lane_offset, mix_seed, render_camera, synth_traffic_light, CameraConfig,
    CameraFrame, LightState, SensorSnapshot, TrafficSynthConfig, UltrasonicConfig, World,
};

const SENSOR_STREAM: u64 = 0x5E05;
const LIGHT_STREAM: u64 = 0x1167;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// As fast as possible, bit-deterministic.
    #[default]
    Simulated,
    /// Paced to real time with a sensor poller thread.
    WallClock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub loop_hz: f64,
    pub sensor_hz: f64,
    /// Skip the 20 to 30 Hz loop-rate check.
    pub allow_any_rate: bool,
    pub mode: DriveMode,
    pub record: bool,
    pub race: RaceConfig,
    pub seed: u64,
    /// Throttle model window length.
    pub window: usize,
    pub seconds: f64,
    pub clock: ClockMode,
    /// End the run on the tick the race finishes.
    pub stop_on_finish: bool,
    pub max_throttle_delta: i32,
    pub teleop_port: u16,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            loop_hz: 25.0,
            sensor_hz: 12.0,
            allow_any_rate: false,
            mode: DriveMode::Manual,
            record: false,
            race: RaceConfig::default(),
            seed: 0,
            window: 5,
            seconds: 10.0,
            clock: ClockMode::Simulated,
            stop_on_finish: true,
            max_throttle_delta: 20,
            teleop_port: DEFAULT_TELEOP_PORT,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loop_hz > 0.0 && self.loop_hz.is_finite()) {
            return Err(Error::Config(format!(
                "loop_hz must be > 0, got {}",
                self.loop_hz
            )));
        }
        if !self.allow_any_rate && !(20.0..=30.0).contains(&self.loop_hz) {
            return Err(Error::Config(format!(
                "loop_hz {} outside 20..30 (set allow_any_rate to override)",
                self.loop_hz
            )));
        }
        if !(self.sensor_hz > 0.0 && self.sensor_hz <= self.loop_hz) {
            return Err(Error::Config(format!(
                "sensor_hz must be in (0, loop_hz], got {}",
                self.sensor_hz
            )));
        }
        if !(self.seconds > 0.0 && self.seconds.is_finite()) {
            return Err(Error::Config(format!(
                "seconds must be > 0, got {}",
                self.seconds
            )));
        }
        if self.window < 2 {
            return Err(Error::Config(format!(
                "window must be >= 2, got {}",
                self.window
            )));
        }
        if self.max_throttle_delta < 1 {
            return Err(Error::Config("max_throttle_delta must be >= 1".into()));
        }
        if let RaceMode::Circuit { laps: 0 } = self.race.mode {
            return Err(Error::Config("circuit race needs at least one lap".into()));
        }
        Ok(())
    }

    /// Ticks in a full run.
    pub fn ticks(&self) -> u64 {
        (self.seconds * self.loop_hz).round() as u64
    }
}

/// Everything the loop simulates: world, car, battery and sensor models.
#[derive(Debug, Clone)]
pub struct Rig {
    pub world: World,
    pub vehicle: VehicleParams,
    pub battery: Battery,
    pub camera: CameraConfig,
    pub ultrasonic: UltrasonicConfig,
    pub state: VehicleState,
}

impl Rig {
    /// Car at the track start with a full battery.
    pub fn new(
        world: World,
        vehicle: VehicleParams,
        battery: Battery,
        camera: CameraConfig,
    ) -> Self {
        let state = world.start_state();
        Self {
            world,
            vehicle,
            battery,
            camera,
            ultrasonic: UltrasonicConfig::default(),
            state,
        }
    }
}

/// Inputs a pilot sees on one tick.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub tick: u64,
    pub t: f64,
    pub frame: &'a CameraFrame,
    pub sensors: &'a MailboxRead,
    /// Ground truth, for the expert only.
    pub state: &'a VehicleState,
    pub world: &'a World,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    /// Steering executed this tick.
    pub steer_u: f64,
    /// Steering written to the tub (the clean demonstration).
    pub label_steer_u: f64,
    pub throttle_pwm: i32,
    /// Autopilot throttle before smoothing.
    pub raw_pwm: Option<i32>,
    /// Request to switch recording on or off.
    pub record: Option<bool>,
    pub mode: DriveMode,
}

pub trait Driver {
    fn mode(&self) -> DriveMode;
    fn command(&mut self, obs: &Observation) -> Result<Command>;
    /// Whether [`Driver::telemetry`] should be fed each tick.
    fn wants_telemetry(&self) -> bool {
        false
    }
    fn telemetry(&mut self, _msg: TelemetryMsg) {}
}

/// Pure-pursuit demonstrator with optional exploration noise on the executed steering.
#[derive(Debug, Clone)]
pub struct ExpertDriver {
    pub cfg: ExpertConfig,
    pub params: VehicleParams,
    noise: Option<SteerNoise>,
}

impl ExpertDriver {
    pub fn new(cfg: ExpertConfig, params: VehicleParams, noise: Option<SteerNoise>) -> Self {
        Self { cfg, params, noise }
    }
}

impl Driver for ExpertDriver {
    fn mode(&self) -> DriveMode {
        DriveMode::Manual
    }

    fn command(&mut self, obs: &Observation) -> Result<Command> {
        let (u, pwm) = expert_driver(obs.world, obs.state, &self.cfg, &self.params)?;
        let exec = match &mut self.noise {
            Some(n) => n.perturb(u),
            None => u,
        };
        Ok(Command {
            steer_u: exec,
            label_steer_u: u,
            throttle_pwm: pwm,
            raw_pwm: None,
            record: None,
            mode: DriveMode::Manual,
        })
    }
}

/// Trained pilots available to a run.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub steering: Option<SteeringModel>,
    pub throttle: Option<ThrottleModel>,
    pub traffic: Option<TrafficModel>,
}

/// Steering from the steering model; throttle from the throttle model once its
/// window is full, a fixed cruise PWM before that or without one.
#[derive(Debug, Clone)]
pub struct AutopilotDriver {
    steering: SteeringModel,
    throttle: Option<ThrottleModel>,
    window: VecDeque<(CameraFrame, SensorSnapshot)>,
    params: VehicleParams,
    cruise_pwm: i32,
}

impl AutopilotDriver {
    /// Fails with a configuration error when the steering model is missing or
    /// its input resolution does not match the camera.
    pub fn new(
        models: &Models,
        camera: &CameraConfig,
        params: &VehicleParams,
        cruise_mps: f64,
    ) -> Result<Self> {
        let steering = models
            .steering
            .clone()
            .ok_or_else(|| Error::Config("autopilot needs a steering model".into()))?;
        if (steering.cfg.width, steering.cfg.height) != (camera.width, camera.height) {
            return Err(Error::Config(format!(
                "steering model expects {}x{} frames but the camera renders {}x{}",
                steering.cfg.width, steering.cfg.height, camera.width, camera.height
            )));
        }
        if let Some(t) = &models.throttle {
            if t.cfg.width > camera.width || t.cfg.height > camera.height {
                return Err(Error::Config(format!(
                    "throttle model input {}x{} exceeds camera {}x{}",
                    t.cfg.width, t.cfg.height, camera.width, camera.height
                )));
            }
        }
        Ok(Self {
            steering,
            throttle: models.throttle.clone(),
            window: VecDeque::new(),
            params: params.clone(),
            cruise_pwm: velocity_to_pwm(cruise_mps, params)?,
        })
    }
}

impl Driver for AutopilotDriver {
    fn mode(&self) -> DriveMode {
        DriveMode::Autopilot
    }

    fn command(&mut self, obs: &Observation) -> Result<Command> {
        let steer = self.steering.predict(obs.frame)?;
        let mut raw_pwm = None;
        let mut pwm = self.cruise_pwm;
        if let Some(tm) = &self.throttle {
            let mut snap = obs.sensors.snapshot;
            snap.t = obs.t;
            self.window.push_back((obs.frame.clone(), snap));
            while self.window.len() > tm.cfg.window {
                self.window.pop_front();
            }
            if self.window.len() == tm.cfg.window {
                let p = tm.predict_pwm(self.window.make_contiguous(), &self.params)?;
                raw_pwm = Some(p);
                pwm = p;
            }
        }
        Ok(Command {
            steer_u: steer.steer_u,
            label_steer_u: steer.steer_u,
            throttle_pwm: pwm,
            raw_pwm,
            record: None,
            mode: DriveMode::Autopilot,
        })
    }
}

/// Remote human driver, with an optional autopilot the client can switch to.
pub struct TeleopDriver {
    server: TeleopServer,
    autopilot: Option<AutopilotDriver>,
    params: VehicleParams,
    mode: DriveMode,
    steer: f64,
    throttle: f64,
}

impl TeleopDriver {
    pub fn new(
        server: TeleopServer,
        autopilot: Option<AutopilotDriver>,
        params: VehicleParams,
    ) -> Self {
        Self {
            server,
            autopilot,
            params,
            mode: DriveMode::Manual,
            steer: 0.0,
            throttle: 0.0,
        }
    }

    pub fn server(&self) -> &TeleopServer {
        &self.server
    }
}

/// Control-message throttle in [0, 1] → PWM.
pub fn throttle_to_pwm(throttle: f64, params: &VehicleParams) -> i32 {
    params.pwm_from_fraction(throttle)
}

impl Driver for TeleopDriver {
    fn mode(&self) -> DriveMode {
        self.mode
    }

    fn command(&mut self, obs: &Observation) -> Result<Command> {
        let mut record = None;
        for ev in self.server.drain_events() {
            match ev {
                TeleopEvent::Control {
                    steer,
                    throttle,
                    record: r,
                } => {
                    self.steer = steer;
                    self.throttle = throttle;
                    record = Some(r);
                }
                TeleopEvent::Mode(DriveMode::Autopilot) if self.autopilot.is_none() => {
                    self.server.send(&ServerMsg::Error {
                        detail: "autopilot unavailable: no steering model loaded".into(),
                    });
                }
                TeleopEvent::Mode(m) => self.mode = m,
                TeleopEvent::Disconnected => {
                    self.steer = 0.0;
                    self.throttle = 0.0;
                }
                TeleopEvent::Connected => {}
            }
        }
        if let (DriveMode::Autopilot, Some(ap)) = (self.mode, self.autopilot.as_mut()) {
            let mut c = ap.command(obs)?;
            c.record = record;
            return Ok(c);
        }
        Ok(Command {
            steer_u: self.steer,
            label_steer_u: self.steer,
            throttle_pwm: throttle_to_pwm(self.throttle, &self.params),
            raw_pwm: None,
            record,
            mode: DriveMode::Manual,
        })
    }

    fn wants_telemetry(&self) -> bool {
        self.server.has_driver()
    }

    fn telemetry(&mut self, msg: TelemetryMsg) {
        self.server.send(&ServerMsg::Telemetry(msg));
    }
}

/// How the race supervisor learns the light state.
#[derive(Debug, Clone)]
pub enum LightSense {
    /// Read the simulated light directly.
    GroundTruth,
    /// Classify a synthetic view of the light each tick.
    Classifier(TrafficModel),
}

/// Synthetic camera view of the light on `tick`, seeded from the world.
pub fn light_view(world: &World, tick: u64, cfg: &TrafficSynthConfig) -> CameraFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(world.rng_seed ^ LIGHT_STREAM, tick));
    synth_traffic_light(&mut rng, world.light.state, cfg).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickTrace {
    pub tick: u64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub steer_u: f64,
    pub throttle_pwm: i32,
    pub raw_pwm: Option<i32>,
    pub mode: DriveMode,
    pub lane_offset: f64,
    pub departed: bool,
    pub collided: bool,
    /// `None` until the first sensor publication.
    pub sensor_seq: Option<u64>,
    pub sensor_staleness_s: f64,
    pub light_label: Option<LightState>,
    pub race_phase: RacePhase,
    pub battery_v: f64,
    pub recorded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: u64,
    pub sim_time_s: f64,
    /// Achieved loop rate: ticks per simulated second, or per wall second when paced.
    pub mean_hz: f64,
    pub sensor_published: u64,
    /// Distinct sensor snapshots read by at least one tick.
    pub sensor_consumed: u64,
    /// Fewest and most ticks that read the same snapshot.
    pub reads_per_snapshot: Option<(u64, u64)>,
    pub laps: u32,
    pub lap_times: Vec<f64>,
    pub race_phase: RacePhase,
    pub start_t: Option<f64>,
    pub finish_t: Option<f64>,
    pub departure_ticks: u64,
    pub departure_events: u64,
    pub collision_ticks: u64,
    pub max_abs_lane_offset: f64,
    /// Largest change between consecutive issued throttle commands.
    pub max_throttle_delta: i32,
    pub progress_m: f64,
    pub tub_records: u64,
    pub final_soc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub trace: Vec<TickTrace>,
}

fn frame_b64(frame: &CameraFrame) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(frame)?))
}

enum SensorFeed {
    Simulated {
        poller: Box<SensorPoller>,
        mailbox: SensorMailbox,
    },
    Threaded {
        mailbox: SharedMailbox,
        state: Arc<Mutex<VehicleState>>,
        stop: Arc<AtomicBool>,
        handle: Option<std::thread::JoinHandle<u64>>,
        started: Instant,
    },
}

impl SensorFeed {
    fn read(&self, t: f64) -> MailboxRead {
        match self {
            SensorFeed::Simulated { mailbox, .. } => mailbox.read(t),
            SensorFeed::Threaded {
                mailbox, started, ..
            } => mailbox.read(started.elapsed().as_secs_f64()),
        }
    }

    fn finish(self) -> u64 {
        match self {
            SensorFeed::Simulated { poller, .. } => poller.published(),
            SensorFeed::Threaded {
                stop, mut handle, ..
            } => {
                stop.store(true, Ordering::SeqCst);
                handle.take().and_then(|h| h.join().ok()).unwrap_or(0)
            }
        }
    }
}

/// Run the loop for `cfg.seconds` (or until the race finishes when
/// `stop_on_finish`). In simulated time the whole run is a pure function of
/// its inputs.
pub fn run_loop(
    cfg: &LoopConfig,
    rig: &mut Rig,
    driver: &mut dyn Driver,
    light: &LightSense,
    mut tub: Option<&mut Tub>,
) -> Result<RunOutput> {
    cfg.validate()?;
    rig.vehicle.validate()?;
    rig.battery.validate()?;
    rig.camera.validate()?;
    rig.world.validate()?;
    if cfg.mode != driver.mode() {
        return Err(Error::Config(format!(
            "loop mode {:?} does not match the driver ({:?})",
            cfg.mode,
            driver.mode()
        )));
    }
    if cfg.record && tub.is_none() {
        return Err(Error::Config("recording requested without a tub".into()));
    }
    if let Some(t) = tub.as_deref() {
        let m = t.manifest();
        if (m.width, m.height) != (rig.camera.width, rig.camera.height) {
            return Err(Error::Config(format!(
                "tub stores {}x{} frames but the camera renders {}x{}",
                m.width, m.height, rig.camera.width, rig.camera.height
            )));
        }
    }

    let wall_start = Instant::now();
    let dt = 1.0 / cfg.loop_hz;
    let total_ticks = cfg.ticks();
    let sensor_seed = mix_seed(cfg.seed, SENSOR_STREAM);
    let synth = TrafficSynthConfig::default();

    let mut feed = match cfg.clock {
        ClockMode::Simulated => SensorFeed::Simulated {
            poller: Box::new(SensorPoller::new(
                rig.ultrasonic.clone(),
                cfg.sensor_hz,
                sensor_seed,
            )),
            mailbox: SensorMailbox::default(),
        },
        ClockMode::WallClock => {
            let mailbox = SharedMailbox::default();
            let state = Arc::new(Mutex::new(rig.state));
            let stop = Arc::new(AtomicBool::new(false));
            let started = Instant::now();
            let handle = spawn_poller(
                PollerSetup {
                    world: rig.world.clone(),
                    poller: SensorPoller::new(rig.ultrasonic.clone(), cfg.sensor_hz, sensor_seed),
                    period: Duration::from_secs_f64(1.0 / cfg.sensor_hz),
                },
                mailbox.clone(),
                Arc::clone(&state),
                Arc::clone(&stop),
                started,
            )?;
            SensorFeed::Threaded {
                mailbox,
                state,
                stop,
                handle: Some(handle),
                started,
            }
        }
    };

    let mut race = RaceState::new(&cfg.race);
    let mut laps = LapTracker::new(&rig.world.track, &rig.state);
    let mut crossing = false;
    let mut recording = cfg.record;
    let mut prev_pwm = rig.vehicle.pwm_min;
    let mut trace = Vec::with_capacity(total_ticks as usize);
    let mut read_counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut was_departed = false;
    let mut summary = RunSummary {
        ticks: 0,
        sim_time_s: 0.0,
        mean_hz: 0.0,
        sensor_published: 0,
        sensor_consumed: 0,
        reads_per_snapshot: None,
        laps: 0,
        lap_times: Vec::new(),
        race_phase: race.phase,
        start_t: None,
        finish_t: None,
        departure_ticks: 0,
        departure_events: 0,
        collision_ticks: 0,
        max_abs_lane_offset: 0.0,
        max_throttle_delta: 0,
        progress_m: 0.0,
        tub_records: 0,
        final_soc: rig.battery.soc(),
        wall_time_s: 0.0,
    };

    let schedule = Schedule::new(cfg.loop_hz, cfg.sensor_hz, total_ticks)?;
    let result = (|| -> Result<()> {
        for event in schedule {
            let (tick, t) = match event {
                Event::Sensor { t, .. } => {
                    if let SensorFeed::Simulated { poller, mailbox } = &mut feed {
                        let snap = poller.sample(&rig.world, &rig.state, t)?;
                        mailbox.publish(snap, t);
                    }
                    continue;
                }
                Event::Tick { index, t } => (index, t),
            };
            if let SensorFeed::Threaded { started, .. } = &feed {
                let due = Duration::from_secs_f64(t);
                let now = started.elapsed();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }

            rig.world.advance_light(t);
            rig.state.t = t;
            let frame = render_camera(&rig.world, &rig.state, &rig.camera);
            let read = feed.read(t);
            if !read.empty {
                *read_counts.entry(read.snapshot.seq).or_default() += 1;
            }

            let obs = Observation {
                tick,
                t,
                frame: &frame,
                sensors: &read,
                state: &rig.state,
                world: &rig.world,
            };
            let cmd = driver.command(&obs)?;
            if let Some(r) = cmd.record {
                recording = r && tub.is_some();
            }

            let light_label = if race.phase == RacePhase::WaitingForGreen {
                Some(match light {
                    LightSense::GroundTruth => rig.world.light.state,
                    LightSense::Classifier(m) => {
                        m.classify(&light_view(&rig.world, tick, &synth))?.0
                    }
                })
            } else {
                None
            };
            let (next_race, gate) = race_supervisor(
                &race,
                light_label.unwrap_or(LightState::Green),
                crossing,
                t,
                &cfg.race,
            );
            race = next_race;

            let mut pwm = rig.vehicle.clamp_pwm(cmd.throttle_pwm as i64);
            if gate == ThrottleGate::Stop {
                pwm = rig.vehicle.pwm_min;
            }
            if cmd.mode == DriveMode::Autopilot {
                pwm = smooth_throttle(prev_pwm, pwm, cfg.max_throttle_delta, &rig.vehicle)?;
            }
            summary.max_throttle_delta = summary.max_throttle_delta.max((pwm - prev_pwm).abs());
            prev_pwm = pwm;
            let steer = cmd.steer_u.clamp(-1.0, 1.0);

            if recording {
                if let Some(tub) = tub.as_deref_mut() {
                    let mut snap = read.snapshot;
                    snap.t = t;
                    let rec = TubRecord::new(
                        cmd.label_steer_u.clamp(-1.0, 1.0),
                        pwm,
                        &snap,
                        cmd.mode,
                        t,
                    )?;
                    tub.append(&frame, rec)?;
                    summary.tub_records += 1;
                }
            }

            if driver.wants_telemetry() {
                let fps = match cfg.clock {
                    ClockMode::Simulated => cfg.loop_hz,
                    ClockMode::WallClock => {
                        (tick + 1) as f64 / wall_start.elapsed().as_secs_f64().max(1e-9)
                    }
                };
                driver.telemetry(TelemetryMsg {
                    seq: tick,
                    t,
                    frame_png_b64: frame_b64(&frame)?,
                    steer_u: steer,
                    throttle_pwm: pwm,
                    ultra: read.snapshot.ultra,
                    imu: read.snapshot.accel,
                    mode: cmd.mode,
                    race_phase: race.phase.as_str().into(),
                    fps,
                    battery_v: battery_voltage(&rig.battery),
                    saliency_png_b64: None,
                });
            }

            let (next, drained) =
                step_vehicle(&rig.state, pwm, steer, dt, &rig.vehicle, &rig.battery)?;
            rig.state = next;
            rig.battery = drained;
            if let SensorFeed::Threaded { state, .. } = &feed {
                *state.lock().unwrap_or_else(|e| e.into_inner()) = rig.state;
            }
            crossing = laps.update(&rig.world.track, &rig.state);

            let off = lane_offset(&rig.world, &rig.state);
            let is_departed = departed(&rig.world, &rig.state);
            let collided = collision(&rig.world, &rig.state).is_some();
            summary.max_abs_lane_offset = summary.max_abs_lane_offset.max(off.abs());
            summary.departure_ticks += is_departed as u64;
            summary.departure_events += (is_departed && !was_departed) as u64;
            summary.collision_ticks += collided as u64;
            was_departed = is_departed;
            summary.ticks += 1;

            trace.push(TickTrace {
                tick,
                t,
                x: rig.state.x,
                y: rig.state.y,
                heading: rig.state.heading,
                v: rig.state.v,
                steer_u: steer,
                throttle_pwm: pwm,
                raw_pwm: cmd.raw_pwm,
                mode: cmd.mode,
                lane_offset: off,
                departed: is_departed,
                collided,
                sensor_seq: (!read.empty).then_some(read.snapshot.seq),
                sensor_staleness_s: read.staleness_s,
                light_label,
                race_phase: race.phase,
                battery_v: battery_voltage(&rig.battery),
                recorded: recording,
            });

            if cfg.stop_on_finish && race.phase == RacePhase::Finished {
                break;
            }
        }
        Ok(())
    })();
    summary.sensor_published = feed.finish();
    result?;

    summary.sim_time_s = summary.ticks as f64 * dt;
    summary.wall_time_s = wall_start.elapsed().as_secs_f64();
    summary.mean_hz = match cfg.clock {
        ClockMode::Simulated => cfg.loop_hz,
        ClockMode::WallClock => summary.ticks as f64 / summary.wall_time_s.max(1e-9),
    };
    summary.sensor_consumed = read_counts.len() as u64;
    summary.reads_per_snapshot = read_counts
        .values()
        .fold(None, |acc: Option<(u64, u64)>, &c| {
            Some(acc.map_or((c, c), |(lo, hi)| (lo.min(c), hi.max(c))))
        });
    summary.laps = race.laps_done;
    summary.lap_times = race.lap_times.clone();
    summary.race_phase = race.phase;
    summary.start_t = race.start_t;
    summary.finish_t = race.finish_t;
    summary.progress_m = laps.progress();
    summary.final_soc = rig.battery.soc();
    Ok(RunOutput { summary, trace })
}

struct PollerSetup {
    world: World,
    poller: SensorPoller,
    period: Duration,
}

fn spawn_poller(
    setup: PollerSetup,
    mailbox: SharedMailbox,
    state: Arc<Mutex<VehicleState>>,
    stop: Arc<AtomicBool>,
    started: Instant,
) -> Result<std::thread::JoinHandle<u64>> {
    std::thread::Builder::new()
        .name("sensor-poller".into())
        .spawn(move || {
            let PollerSetup {
                world,
                mut poller,
                period,
            } = setup;
            let mut k: u32 = 0;
            while !stop.load(Ordering::SeqCst) {
                let s = *state.lock().unwrap_or_else(|e| e.into_inner());
                let t = started.elapsed().as_secs_f64();
                if let Ok(snap) = poller.sample(&world, &s, t) {
                    mailbox.publish(snap, t);
                }
                k += 1;
                let due = period * k;
                let now = started.elapsed();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
            poller.published()
        })
        .map_err(|e| Error::Internal(format!("cannot start sensor poller: {e}")))
}
