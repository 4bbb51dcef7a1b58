//! Record expert laps on the oval, train the steering model, then let it drive.
//!
//! `cargo run --release --example behavior_cloning -- [seed] [size] [mse|ce]`

use etg::tensorkit::Loss;
use etg::workflows::behavior_cloning_trial;

fn main() -> etg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(48);
    let loss = match args.get(3).map(String::as_str) {
        Some("ce") => Loss::CrossEntropy,
        _ => Loss::Mse,
    };
    let dir = tempfile_dir(seed);
    let trial = behavior_cloning_trial(&dir, seed, size, loss);
    std::fs::remove_dir_all(&dir).ok();
    let trial = trial?;
    println!(
        "recorded {} frames (expert departure ticks {})",
        trial.frames, trial.expert_departure_ticks
    );
    println!(
        "trained: loss {:.4} -> {:.4}, val {:.4}, {:.1}s",
        trial.report.initial_train_loss,
        trial.report.train_loss.last().copied().unwrap_or(f64::NAN),
        trial.report.val_loss.last().copied().unwrap_or(f64::NAN),
        trial.report.wall_time_s
    );
    let s = &trial.lap;
    println!(
        "autopilot: laps {} in {:.1}s, departures {}, max |offset| {:.2}, progress {:.1} m -> {}",
        s.laps,
        s.sim_time_s,
        s.departure_ticks,
        s.max_abs_lane_offset,
        s.progress_m,
        if trial.passed() { "pass" } else { "fail" }
    );
    Ok(())
}

fn tempfile_dir(seed: u64) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("etg-bc-{seed}-{}", std::process::id()))
}
