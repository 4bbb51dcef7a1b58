//! Train the light classifier on synthetic images, then start a drag race on its verdicts.
//!
//! `cargo run --release --example traffic_light_race -- [samples] [epochs]`

use etg::ctrlcli::light_accuracy;
use etg::driveloop::{run_loop, ExpertDriver, LightSense, LoopConfig, RaceConfig, RaceMode};
use etg::pilots::{train, ExpertConfig, TrafficConfig, TrafficModel, TrainHyper};
use etg::workflows::{preset_rig, traffic_samples};
use etg::worldsense::{CameraConfig, LightState};

fn main() -> etg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let samples: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(15);
    let mut model = TrafficModel::build(TrafficConfig::default(), 1)?;
    let data = traffic_samples(&model, samples, 1)?;
    let hyper = TrainHyper {
        epochs,
        seed: 1,
        ..TrainHyper::default()
    };
    let report = train(&mut model.net, &data, &hyper, serde_json::Value::Null)?;
    println!(
        "trained on {samples} images in {:.0}s, held-out accuracy {:.1}%",
        report.wall_time_s,
        100.0 * light_accuracy(&model, 500, 77)?
    );

    let mut rig = preset_rig("drag", 1, CameraConfig::default())?;
    rig.world.light.state = LightState::Red;
    rig.world.light.green_at_s = Some(1.5);
    let cfg = LoopConfig {
        seconds: 30.0,
        seed: 1,
        race: RaceConfig {
            mode: RaceMode::Drag,
            green_debounce: 3,
        },
        ..LoopConfig::default()
    };
    let mut driver = ExpertDriver::new(ExpertConfig::default(), rig.vehicle.clone(), None);
    let out = run_loop(
        &cfg,
        &mut rig,
        &mut driver,
        &LightSense::Classifier(model),
        None,
    )?;
    let s = &out.summary;
    println!(
        "light green at 1.50s, race started {:?}, finished {:?} ({})",
        s.start_t,
        s.finish_t,
        s.race_phase.as_str()
    );
    Ok(())
}
