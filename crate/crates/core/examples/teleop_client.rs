//! Serve the teleop protocol on an ephemeral port and drive the car from a client socket.
//!
//! `cargo run --release --example teleop_client`

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use etg::driveloop::{
    run_loop, ClockMode, LightSense, LoopConfig, ServerMsg, TeleopDriver, TeleopServer,
};
use etg::vehiclesim::VehicleParams;
use etg::workflows::preset_rig;
use etg::worldsense::CameraConfig;

fn main() -> etg::Result<()> {
    let server = TeleopServer::bind(0)?;
    let addr = server.local_addr();
    let car = std::thread::spawn(move || {
        let mut driver = TeleopDriver::new(server, None, VehicleParams::default());
        let mut rig = preset_rig("oval", 1, CameraConfig::default())?;
        let cfg = LoopConfig {
            clock: ClockMode::WallClock,
            seconds: 4.0,
            ..LoopConfig::default()
        };
        run_loop(&cfg, &mut rig, &mut driver, &LightSense::GroundTruth, None)
    });

    let mut stream = TcpStream::connect(addr)?;
    let mut lines = BufReader::new(stream.try_clone()?).lines();
    let mut seen = 0;
    while let Some(Ok(line)) = lines.next() {
        let Ok(ServerMsg::Telemetry(t)) = serde_json::from_str::<ServerMsg>(&line) else {
            println!("server: {line}");
            continue;
        };
        seen += 1;
        if seen == 1 {
            stream.write_all(
                b"{\"type\":\"control\",\"steer\":0.0,\"throttle\":0.15,\"record\":false}\n",
            )?;
        }
        if seen % 25 == 0 {
            println!(
                "tick {:>3}: pwm {} v_batt {:.2} fps {:.1}",
                t.seq, t.throttle_pwm, t.battery_v, t.fps
            );
        }
        if seen == 75 {
            break;
        }
    }
    drop(lines);
    drop(stream);
    let out = car.join().expect("car thread")?;
    let last = out.trace.last().expect("ticks ran");
    println!(
        "after disconnect: pwm {} steer {}; {} ticks at {:.1} Hz",
        last.throttle_pwm, last.steer_u, out.summary.ticks, out.summary.mean_hz
    );
    Ok(())
}
