//! Render the forward camera on each track preset and read the ultrasonic ring.
//!
//! `cargo run --release --example camera_and_sensors -- [out_dir]`

use std::path::PathBuf;

use etg::tubstore::encode_png;
use etg::vehiclesim::VehicleState;
use etg::worldsense::{
    build_track, render_camera, sample_ultrasonic, CameraConfig, Side, TrackSpec, UltrasonicConfig,
    World,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;
    let cfg = CameraConfig::default();
    for preset in ["oval", "drag", "scurve"] {
        let world = World::new(build_track(&TrackSpec::Preset(preset.into()))?, 1);
        let (x0, y0) = world.track.centerline[0];
        let (x1, y1) = world.track.centerline[1];
        let state = VehicleState::at(x0, y0, (y1 - y0).atan2(x1 - x0));
        let frame = render_camera(&world, &state, &cfg);
        let path = out.join(format!("camera_{preset}.png"));
        std::fs::write(&path, encode_png(&frame)?)?;
        let ultra: Vec<u8> = [Side::Front, Side::Left, Side::Right, Side::Back]
            .into_iter()
            .map(|s| sample_ultrasonic(&world, &state, s, &UltrasonicConfig::default()))
            .collect();
        println!(
            "{preset}: {:.1} m, {}x{} frame -> {}, ultrasonic {ultra:?}",
            world.track.length(),
            frame.width,
            frame.height,
            path.display()
        );
    }
    Ok(())
}
