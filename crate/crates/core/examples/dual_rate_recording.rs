//! Record ten seconds of the expert into a tub and inspect the dual-rate timing and dataset.
//!
//! `cargo run --release --example dual_rate_recording -- [tub_dir]`

use std::path::PathBuf;

use etg::driveloop::LoopConfig;
use etg::pilots::ExpertConfig;
use etg::tubstore::{load_dataset, Dataset, DatasetTarget};
use etg::workflows::{preset_rig, record_expert, NoiseConfig};
use etg::worldsense::CameraConfig;

fn main() -> etg::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("etg-tub-{}", std::process::id())));
    let mut rig = preset_rig("oval", 3, CameraConfig::default())?;
    let cfg = LoopConfig {
        seconds: 10.0,
        seed: 3,
        ..LoopConfig::default()
    };
    let (tub, out) = record_expert(
        &dir,
        &mut rig,
        &ExpertConfig::default(),
        Some(NoiseConfig::default()),
        &cfg,
    )?;
    let s = &out.summary;
    println!(
        "{} ticks at {} Hz, {} sensor snapshots at {} Hz, each read {:?} times",
        s.ticks, cfg.loop_hz, s.sensor_published, cfg.sensor_hz, s.reads_per_snapshot
    );
    let stale = out
        .trace
        .iter()
        .map(|t| t.sensor_staleness_s)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    println!(
        "max sensor staleness {:.3}s; {} records in {}",
        stale,
        tub.len(),
        dir.display()
    );

    if let Dataset::Steering(set) = load_dataset(&tub, DatasetTarget::Steering, 0)? {
        let mut counts = [0usize; 10];
        for t in &set.targets {
            counts[t.iter().position(|&v| v == 1.0).unwrap_or(0)] += 1;
        }
        println!("steering bin histogram: {counts:?}");
    }
    if let Dataset::Throttle(set) = load_dataset(&tub, DatasetTarget::Throttle, cfg.window)? {
        println!(
            "{} throttle windows of {} frames",
            set.windows.len(),
            set.window
        );
    }
    Ok(())
}
