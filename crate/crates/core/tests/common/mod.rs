//! Fixtures shared by the test targets and the acceptance harness.
#![allow(dead_code)]

use std::path::Path;

use etg::driveloop::LoopConfig;
use etg::pilots::{ExpertConfig, SteeringConfig, SteeringModel, ThrottleConfig, ThrottleModel};
use etg::tensorkit::{
    grad_check, one_hot, AuxConcat, GradCheckReport, LayerSpec, Loss, Sequential, Tensor,
};
use etg::tubstore::sha256_hex;
use etg::workflows::{preset_rig, record_expert, NoiseConfig};
use etg::worldsense::CameraConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCase {
    pub name: &'static str,
    pub bound: f64,
    pub run: fn() -> GradCheckReport,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn layers(
    specs: &[LayerSpec],
    input: &[usize],
    loss: Loss,
    dropout_seed: Option<u64>,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut net = Sequential::new(specs, None, &mut rng);
    let x = random(input, &mut rng);
    let out = net.output_shape(input).unwrap();
    let target = match loss {
        Loss::Mse => random(&out, &mut rng),
        Loss::CrossEntropy => {
            let labels: Vec<usize> = (0..out[0]).map(|i| i % out[1]).collect();
            one_hot(&labels, out[1]).unwrap()
        }
    };
    grad_check(&mut net, &x, None, &target, loss, dropout_seed, true).unwrap()
}

fn model(
    net: &mut Sequential,
    input: &[usize],
    aux: Option<&[usize]>,
    target: &[usize],
    loss: Loss,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = random(input, &mut rng);
    let a = aux.map(|s| random(s, &mut rng));
    let t = match loss {
        Loss::Mse => random(target, &mut rng),
        Loss::CrossEntropy => one_hot(&[3], target[1]).unwrap(),
    };
    grad_check(net, &x, a.as_ref(), &t, loss, Some(11), true).unwrap()
}

/// Worst of several reports, keeping the total number of checked entries.
fn worst(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    reports
        .into_iter()
        .reduce(|a, b| {
            let checked = a.checked + b.checked;
            let mut w = if b.max_rel_error > a.max_rel_error {
                b
            } else {
                a
            };
            w.checked = checked;
            w
        })
        .unwrap()
}

fn conv(in_channels: usize, filters: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        filters,
        kernel: 3,
        stride,
    }
}

fn lstm(inputs: usize, units: usize, return_sequences: bool) -> LayerSpec {
    LayerSpec::Lstm {
        inputs,
        units,
        return_sequences,
    }
}

/// Every layer kind, the unrolled LSTM and both driving models at 12x12.
/// Purely linear cases carry the tighter bound.
pub const GRAD_CASES: &[GradCase] = &[
    GradCase {
        name: "conv2d_on_6x6x1",
        bound: 1e-8,
        run: || layers(&[conv(1, 2, 1)], &[1, 1, 6, 6], Loss::Mse, None),
    },
    GradCase {
        name: "conv2d_strided_multichannel",
        // weight gradients sum 18 cancelling terms; roundoff reaches ~1.6e-8
        bound: 1e-7,
        run: || layers(&[conv(3, 2, 2)], &[2, 3, 7, 7], Loss::Mse, None),
    },
    GradCase {
        name: "dense",
        bound: 1e-8,
        run: || {
            layers(
                &[LayerSpec::Dense {
                    inputs: 6,
                    units: 4,
                }],
                &[3, 6],
                Loss::Mse,
                None,
            )
        },
    },
    GradCase {
        name: "relu",
        bound: 1e-4,
        run: || {
            layers(
                &[
                    LayerSpec::Dense {
                        inputs: 5,
                        units: 6,
                    },
                    LayerSpec::Relu,
                ],
                &[3, 5],
                Loss::Mse,
                None,
            )
        },
    },
    GradCase {
        name: "maxpool",
        bound: 1e-4,
        run: || {
            layers(
                &[conv(1, 2, 1), LayerSpec::MaxPool { size: 2, stride: 2 }],
                &[2, 1, 8, 8],
                Loss::Mse,
                None,
            )
        },
    },
    GradCase {
        name: "batchnorm_spatial_and_flat",
        bound: 1e-4,
        run: || {
            worst([
                layers(
                    &[conv(1, 2, 1), LayerSpec::batch_norm(2)],
                    &[3, 1, 5, 5],
                    Loss::Mse,
                    None,
                ),
                layers(
                    &[
                        LayerSpec::Dense {
                            inputs: 4,
                            units: 3,
                        },
                        LayerSpec::batch_norm(3),
                    ],
                    &[5, 4],
                    Loss::Mse,
                    None,
                ),
            ])
        },
    },
    GradCase {
        name: "dropout_with_frozen_mask",
        bound: 1e-8,
        run: || {
            layers(
                &[
                    LayerSpec::Dense {
                        inputs: 4,
                        units: 8,
                    },
                    LayerSpec::Dropout { rate: 0.3 },
                ],
                &[3, 4],
                Loss::Mse,
                Some(5),
            )
        },
    },
    GradCase {
        name: "softmax_cross_entropy",
        bound: 1e-4,
        run: || {
            worst([
                layers(
                    &[
                        LayerSpec::Dense {
                            inputs: 4,
                            units: 5,
                        },
                        LayerSpec::Softmax,
                    ],
                    &[3, 4],
                    Loss::CrossEntropy,
                    None,
                ),
                layers(&[LayerSpec::Softmax], &[2, 4], Loss::Mse, None),
            ])
        },
    },
    GradCase {
        name: "flatten",
        bound: 1e-8,
        run: || {
            layers(
                &[
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: 18,
                        units: 2,
                    },
                ],
                &[2, 2, 3, 3],
                Loss::Mse,
                None,
            )
        },
    },
    GradCase {
        name: "lstm_unrolled_four_steps",
        bound: 1e-4,
        run: || {
            worst([
                layers(&[lstm(3, 4, true)], &[2, 4, 3], Loss::Mse, None),
                layers(&[lstm(3, 4, false)], &[2, 4, 3], Loss::Mse, None),
                layers(
                    &[lstm(3, 4, true), lstm(4, 3, false)],
                    &[2, 4, 3],
                    Loss::Mse,
                    None,
                ),
            ])
        },
    },
    GradCase {
        name: "time_distributed_conv_stack",
        bound: 1e-4,
        run: || {
            layers(
                &[
                    LayerSpec::TimeDistributed {
                        inner: vec![
                            conv(1, 2, 1),
                            LayerSpec::Relu,
                            LayerSpec::MaxPool { size: 2, stride: 2 },
                            LayerSpec::Flatten,
                        ],
                    },
                    lstm(8, 3, false),
                ],
                &[2, 3, 1, 6, 6],
                Loss::Mse,
                None,
            )
        },
    },
    GradCase {
        name: "auxiliary_concat_before_recurrence",
        bound: 1e-4,
        run: || {
            let specs = [
                LayerSpec::TimeDistributed {
                    inner: vec![LayerSpec::Flatten],
                },
                lstm(6, 3, false),
                LayerSpec::Dense {
                    inputs: 3,
                    units: 1,
                },
            ];
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut net = Sequential::new(&specs, Some(AuxConcat { after: 1, width: 2 }), &mut rng);
            let x = random(&[2, 3, 1, 2, 2], &mut rng);
            let aux = random(&[2, 3, 2], &mut rng);
            let t = random(&[2, 1], &mut rng);
            grad_check(&mut net, &x, Some(&aux), &t, Loss::Mse, None, true).unwrap()
        },
    },
    GradCase {
        name: "full_steering_model_at_12x12",
        bound: 1e-4,
        run: || {
            // same layer kinds; two conv/pool blocks fit a 12x12 input
            let cfg = SteeringConfig {
                width: 12,
                height: 12,
                filters: vec![4, 8],
                ..SteeringConfig::default()
            };
            let mut m = SteeringModel::build(cfg, 4).unwrap();
            worst([
                model(&mut m.net, &[1, 3, 12, 12], None, &[1, 10], Loss::Mse),
                model(
                    &mut m.net,
                    &[1, 3, 12, 12],
                    None,
                    &[1, 10],
                    Loss::CrossEntropy,
                ),
            ])
        },
    },
    GradCase {
        name: "full_throttle_model_at_12x12",
        bound: 1e-4,
        run: || {
            let cfg = ThrottleConfig {
                width: 12,
                height: 12,
                ..ThrottleConfig::default()
            };
            let w = cfg.window;
            let mut m = ThrottleModel::build(cfg, 4).unwrap();
            model(
                &mut m.net,
                &[1, w, 3, 12, 12],
                Some(&[1, w, 7]),
                &[1, 1],
                Loss::Mse,
            )
        },
    },
];

pub fn check_grad_case(name: &str) {
    let case = GRAD_CASES
        .iter()
        .find(|c| c.name == name)
        .expect("known case");
    let r = (case.run)();
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.max_rel_error < case.bound,
        "{name}: {r:?} (bound {})",
        case.bound
    );
}

/// Hash of a seeded 100-tick recording: tub files by name, then the trace.
pub const GOLDEN_RUN_SHA256: &str =
    "54cd4bec557df4f5e54cd1ae3ae5e5624a7963427420d12f6afbbff07e87af3d";

/// Seed 7, 100 ticks, 32x32 camera, exploration noise on.
pub fn golden_run(dir: &Path) -> String {
    let camera = CameraConfig {
        width: 32,
        height: 32,
        ..CameraConfig::default()
    };
    let mut rig = preset_rig("oval", 7, camera).unwrap();
    let cfg = LoopConfig {
        seed: 7,
        seconds: 4.0,
        ..LoopConfig::default()
    };
    let (tub, out) = record_expert(
        dir,
        &mut rig,
        &ExpertConfig::default(),
        Some(NoiseConfig::default()),
        &cfg,
    )
    .unwrap();
    assert_eq!(tub.len(), 100);
    hash_dir_and(
        dir,
        out.trace.iter().map(|t| serde_json::to_vec(t).unwrap()),
    )
}

/// SHA-256 over every file in `dir` (sorted by name) followed by `extra` chunks.
pub fn hash_dir_and(dir: &Path, extra: impl IntoIterator<Item = Vec<u8>>) -> String {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut buf = Vec::new();
    for n in &names {
        buf.extend_from_slice(n.as_bytes());
        buf.extend(std::fs::read(dir.join(n)).unwrap());
    }
    for chunk in extra {
        buf.extend(chunk);
    }
    sha256_hex(&buf)
}
