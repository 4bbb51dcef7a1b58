//! Train a steering model briefly and write saliency heatmaps and overlays for on-track frames.
//!
//! `cargo run --release --example saliency_maps -- [out_dir]`

use std::path::PathBuf;

use etg::driveloop::LoopConfig;
use etg::pilots::{train, ExpertConfig, SteeringConfig, SteeringModel, TrainHyper};
use etg::salience::overlay;
use etg::tubstore::encode_png;
use etg::workflows::{
    line_frames, preset_rig, record_expert, saliency_study, steering_samples, NoiseConfig,
};
use etg::worldsense::CameraConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("etg-saliency"));
    std::fs::create_dir_all(&out)?;
    let camera = CameraConfig {
        width: 48,
        height: 48,
        ..CameraConfig::default()
    };
    let tub_dir = std::env::temp_dir().join(format!("etg-saliency-tub-{}", std::process::id()));
    let mut rig = preset_rig("oval", 2, camera.clone())?;
    let cfg = LoopConfig {
        seconds: 40.0,
        seed: 2,
        ..LoopConfig::default()
    };
    let (tub, _) = record_expert(
        &tub_dir,
        &mut rig,
        &ExpertConfig::default(),
        Some(NoiseConfig::default()),
        &cfg,
    )?;
    let mut model = SteeringModel::build(
        SteeringConfig {
            width: 48,
            height: 48,
            ..SteeringConfig::default()
        },
        2,
    )?;
    let data = steering_samples(&model, &tub)?;
    std::fs::remove_dir_all(&tub_dir).ok();
    let hyper = TrainHyper {
        epochs: 5,
        seed: 2,
        ..TrainHyper::default()
    };
    train(&mut model.net, &data, &hyper, serde_json::Value::Null)?;

    let rig = preset_rig("oval", 5, camera)?;
    let frames = line_frames(&rig, &ExpertConfig::default(), 12, 25, 25.0)?;
    let (study, maps) = saliency_study(&model, &frames, 5)?;
    for (i, (f, hm)) in frames.iter().zip(&maps).enumerate() {
        std::fs::write(out.join(format!("heat_{i:02}.png")), hm.to_png()?)?;
        std::fs::write(
            out.join(format!("overlay_{i:02}.png")),
            encode_png(&overlay(&f.frame, hm, 0.6)?)?,
        )?;
    }
    println!(
        "line overlap {:.3} vs random {:.3} (x{:.1}), lane interior {:.3}; images in {}",
        study.mean_score,
        study.mean_baseline,
        study.ratio,
        study.mean_interior.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}
