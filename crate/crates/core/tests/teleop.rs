//! Teleop wire protocol over real sockets.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use etg::driveloop::{
    run_loop, ClockMode, Driver, LightSense, LoopConfig, Observation, SensorMailbox, ServerMsg,
    TeleopDriver, TeleopServer,
};
use etg::tubstore::DriveMode;
use etg::vehiclesim::VehicleParams;
use etg::workflows::preset_rig;
use etg::worldsense::{render_camera, CameraConfig};

fn camera() -> CameraConfig {
    CameraConfig {
        width: 24,
        height: 24,
        ..CameraConfig::default()
    }
}

fn connect(server: &TeleopServer) -> (TcpStream, BufReader<TcpStream>) {
    let s = TcpStream::connect(server.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let r = BufReader::new(s.try_clone().unwrap());
    (s, r)
}

fn read_msg(r: &mut BufReader<TcpStream>) -> ServerMsg {
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    serde_json::from_str(&line).unwrap_or_else(|e| panic!("bad server line {line:?}: {e}"))
}

fn wait_until(mut f: impl FnMut() -> bool) {
    let start = Instant::now();
    while !f() {
        assert!(start.elapsed() < Duration::from_secs(5), "timed out");
        std::thread::sleep(Duration::from_millis(5));
    }
}

/// One command from the driver against a fixed observation.
fn tick(driver: &mut TeleopDriver, n: u64) -> (f64, i32) {
    let rig = preset_rig("oval", 1, camera()).unwrap();
    let frame = render_camera(&rig.world, &rig.state, &rig.camera);
    let sensors = SensorMailbox::default().read(0.0);
    let obs = Observation {
        tick: n,
        t: n as f64 / 25.0,
        frame: &frame,
        sensors: &sensors,
        state: &rig.state,
        world: &rig.world,
    };
    let c = driver.command(&obs).unwrap();
    (c.steer_u, c.throttle_pwm)
}

#[test]
fn control_applies_on_next_tick_and_disconnect_stops() {
    let server = TeleopServer::bind(0).unwrap();
    let mut driver = TeleopDriver::new(server, None, VehicleParams::default());
    assert_eq!(tick(&mut driver, 0), (0.0, 220));

    let (mut s, _r) = connect(driver.server());
    wait_until(|| driver.server().has_driver());
    s.write_all(b"{\"type\":\"control\",\"steer\":-0.5,\"throttle\":0.3,\"record\":false}\n")
        .unwrap();
    // let the reader thread queue the event before the next tick
    std::thread::sleep(Duration::from_millis(200));
    assert_eq!(tick(&mut driver, 1), (-0.5, 280));
    assert_eq!(
        tick(&mut driver, 2),
        (-0.5, 280),
        "control persists between messages"
    );

    drop(s);
    drop(_r);
    wait_until(|| !driver.server().has_driver());
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(tick(&mut driver, 3), (0.0, 220));
}

#[test]
fn malformed_and_out_of_range_get_error_replies() {
    let server = TeleopServer::bind(0).unwrap();
    let (mut s, mut r) = connect(&server);
    wait_until(|| server.has_driver());
    for bad in [
        "{not json\n",
        "{\"type\":\"control\",\"steer\":1.5,\"throttle\":0.1,\"record\":false}\n",
        "{\"type\":\"warp\"}\n",
    ] {
        s.write_all(bad.as_bytes()).unwrap();
        match read_msg(&mut r) {
            ServerMsg::Error { detail } => assert!(!detail.is_empty()),
            other => panic!("expected error for {bad:?}, got {other:?}"),
        }
    }
    assert!(
        server.has_driver(),
        "bad input does not drop the connection"
    );
    assert!(server
        .drain_events()
        .iter()
        .all(|e| !matches!(e, etg::driveloop::TeleopEvent::Control { .. })));
}

#[test]
fn second_client_is_refused_busy() {
    let server = TeleopServer::bind(0).unwrap();
    let (_s1, _r1) = connect(&server);
    wait_until(|| server.has_driver());
    let (_s2, mut r2) = connect(&server);
    match read_msg(&mut r2) {
        ServerMsg::Error { detail } => assert!(detail.starts_with("busy"), "{detail}"),
        other => panic!("expected busy, got {other:?}"),
    }
    let mut rest = String::new();
    assert_eq!(
        r2.read_line(&mut rest).unwrap(),
        0,
        "refused client is closed"
    );
    assert!(server.has_driver(), "first driver keeps the car");
}

#[test]
fn live_wall_clock_loop_streams_telemetry_and_obeys_control() {
    let server = TeleopServer::bind(0).unwrap();
    let (mut s, mut r) = connect(&server);
    let driver_thread = std::thread::spawn(move || {
        let mut driver = TeleopDriver::new(server, None, VehicleParams::default());
        let mut rig = preset_rig("oval", 3, camera()).unwrap();
        let cfg = LoopConfig {
            clock: ClockMode::WallClock,
            seconds: 3.0,
            ..LoopConfig::default()
        };
        run_loop(&cfg, &mut rig, &mut driver, &LightSense::GroundTruth, None).unwrap()
    });

    let ServerMsg::Telemetry(first) = read_msg(&mut r) else {
        panic!("expected telemetry")
    };
    assert_eq!(first.throttle_pwm, 220);
    assert_eq!(first.mode, DriveMode::Manual);
    assert!(!first.frame_png_b64.is_empty());
    s.write_all(b"{\"type\":\"control\",\"steer\":0.2,\"throttle\":0.3,\"record\":false}\n")
        .unwrap();
    let sent_after = first.seq;
    let applied = loop {
        let ServerMsg::Telemetry(m) = read_msg(&mut r) else {
            panic!("expected telemetry")
        };
        if m.throttle_pwm == 280 {
            break m;
        }
        assert!(
            m.seq < sent_after + 25,
            "control not applied within a second"
        );
    };
    assert_eq!(applied.steer_u, 0.2);
    drop(s);
    drop(r);

    let out = driver_thread.join().unwrap();
    let last = out.trace.last().unwrap();
    assert_eq!(
        (last.throttle_pwm, last.steer_u),
        (220, 0.0),
        "disconnect brings the car to a safe stop"
    );
    assert!(out.summary.mean_hz > 20.0, "{}", out.summary.mean_hz);
}
