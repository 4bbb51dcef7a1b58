//! Train the recurrent throttle model next to a steering model and compare
//! raw against rate-limited throttle on an autopilot lap.
//!
//! `cargo run --release --example throttle_smoothing -- [seed] [epochs]`

use etg::ctrlcli::{delta_histogram, delta_percentile};
use etg::driveloop::Models;
use etg::pilots::{train, ThrottleConfig, ThrottleModel, TrainHyper};
use etg::tensorkit::Loss;
use etg::tubstore::Tub;
use etg::workflows::{
    autopilot_laps, behavior_cloning_trial, preset_rig, throttle_samples, CLONING_CRUISE_MPS,
};
use etg::worldsense::CameraConfig;

fn main() -> etg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(15);
    let dir = std::env::temp_dir().join(format!("etg-throttle-{seed}-{}", std::process::id()));
    let result = run(&dir, seed, epochs);
    std::fs::remove_dir_all(&dir).ok();
    result
}

fn run(dir: &std::path::Path, seed: u64, epochs: usize) -> etg::Result<()> {
    let trial = behavior_cloning_trial(dir, seed, 48, Loss::Mse)?;
    println!(
        "steering lap: {} (departures {})",
        trial.lap.laps, trial.lap.departure_ticks
    );

    let tub = Tub::open(dir)?;
    let mut throttle = ThrottleModel::build(ThrottleConfig::default(), seed)?;
    let data = throttle_samples(&throttle, &tub)?;
    let hyper = TrainHyper {
        epochs,
        seed,
        ..TrainHyper::default()
    };
    let report = train(
        &mut throttle.net,
        &data,
        &hyper,
        serde_json::to_value(&throttle.cfg)?,
    )?;
    println!(
        "throttle trained on {} windows: loss {:.5} -> {:.5}, {:.1}s",
        data.len(),
        report.initial_train_loss,
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        report.wall_time_s
    );

    let camera = CameraConfig {
        width: 48,
        height: 48,
        ..CameraConfig::default()
    };
    let models = Models {
        steering: Some(trial.model),
        throttle: Some(throttle),
        traffic: None,
    };
    let mut rig = preset_rig("oval", seed + 200, camera)?;
    let out = autopilot_laps(&mut rig, &models, 1, 90.0, CLONING_CRUISE_MPS, seed)?;
    let issued: Vec<i32> = out.trace.iter().map(|t| t.throttle_pwm).collect();
    let raw: Vec<i32> = out.trace.iter().filter_map(|t| t.raw_pwm).collect();
    println!(
        "lap {} departures {}: issued |dPWM| max {}, histogram {:?}; raw p95 {:?}",
        out.summary.laps,
        out.summary.departure_ticks,
        out.summary.max_throttle_delta,
        delta_histogram(&issued),
        delta_percentile(&raw, 95.0)
    );
    Ok(())
}
