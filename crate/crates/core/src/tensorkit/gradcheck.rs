use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layer::Mode;
use super::loss::Loss;
use super::sequential::Sequential;
use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor in the relative error, so gradients that are zero on both
/// sides compare as absolute differences.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `param 3 (layer 1) [17]` or `input [4]`.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compare analytic gradients of every parameter, and of the input when
/// `check_input` is set, against central differences of the loss in train mode.
/// The loss difference is accumulated per output element.
/// Dropout masks are frozen by reseeding with `dropout_seed` on every pass.
pub fn grad_check(
    net: &mut Sequential,
    input: &Tensor,
    aux: Option<&Tensor>,
    target: &Tensor,
    loss: Loss,
    dropout_seed: Option<u64>,
    check_input: bool,
) -> Result<GradCheckReport> {
    if net.has_active_dropout() && dropout_seed.is_none() {
        return Err(Error::Precondition(
            "train-mode dropout needs a frozen mask seed for gradient checking".into(),
        ));
    }
    let seed = dropout_seed.unwrap_or(0);
    let saved_buffers: Vec<Tensor> = net.buffers().into_iter().cloned().collect();

    let eval = |net: &mut Sequential, x: &Tensor| -> Result<Tensor> {
        net.forward(x, aux, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))
    };

    let pred = net.forward(
        input,
        aux,
        Mode::Train,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let (_, grad) = loss.evaluate(&pred, target)?;
    let (dx, grads) = net.backward(&grad, check_input)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |rel: f64, at: String, report: &mut GradCheckReport| {
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel;
            report.worst = at;
        }
    };

    let owners = net.param_owners();
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = net.params()[pi].data()[j];
            let (hi, lo) = (orig + GRAD_CHECK_STEP, orig - GRAD_CHECK_STEP);
            net.params_mut()[pi].data_mut()[j] = hi;
            let up = eval(net, input)?;
            net.params_mut()[pi].data_mut()[j] = lo;
            let down = eval(net, input)?;
            net.params_mut()[pi].data_mut()[j] = orig;
            let numeric = loss.difference(&up, &down, target)? / (hi - lo);
            record(
                relative_error(g.data()[j], numeric),
                format!("param {pi} (layer {}) [{j}]", owners[pi]),
                &mut report,
            );
        }
    }
    if let Some(dx) = dx {
        let mut x = input.clone();
        for j in 0..x.len() {
            let orig = x.data()[j];
            let (hi, lo) = (orig + GRAD_CHECK_STEP, orig - GRAD_CHECK_STEP);
            x.data_mut()[j] = hi;
            let up = eval(net, &x)?;
            x.data_mut()[j] = lo;
            let down = eval(net, &x)?;
            x.data_mut()[j] = orig;
            let numeric = loss.difference(&up, &down, target)? / (hi - lo);
            record(
                relative_error(dx.data()[j], numeric),
                format!("input [{j}]"),
                &mut report,
            );
        }
    }

    for (b, saved) in net.buffers_mut().into_iter().zip(saved_buffers) {
        *b = saved;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::LayerSpec;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_model_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Sequential::new(
            &[LayerSpec::Dense {
                inputs: 5,
                units: 3,
            }],
            None,
            &mut rng,
        );
        let x = random(&[4, 5], &mut rng);
        let t = random(&[4, 3], &mut rng);
        let r = grad_check(&mut net, &x, None, &t, Loss::Mse, None, true).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 15 + 3 + 20);
    }

    #[test]
    fn unfrozen_dropout_is_precondition_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Sequential::new(
            &[
                LayerSpec::Dense {
                    inputs: 2,
                    units: 2,
                },
                LayerSpec::Dropout { rate: 0.5 },
            ],
            None,
            &mut rng,
        );
        let x = random(&[1, 2], &mut rng);
        let r = grad_check(&mut net, &x, None, &x, Loss::Mse, None, false);
        assert!(matches!(r, Err(Error::Precondition(_))));
        assert!(grad_check(&mut net, &x, None, &x, Loss::Mse, Some(9), false).is_ok());
    }

    #[test]
    fn non_finite_reports_layer_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Sequential::new(
            &[
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 2,
                    units: 1,
                },
            ],
            None,
            &mut rng,
        );
        net.layers[1].params[0].data_mut()[0] = f64::INFINITY;
        let x = Tensor::filled(&[1, 2], 1.0);
        let err = grad_check(
            &mut net,
            &x,
            None,
            &Tensor::zeros(&[1, 1]),
            Loss::Mse,
            None,
            false,
        )
        .unwrap_err();
        match err {
            Error::Numeric { location, .. } => {
                assert!(location.starts_with("layer 1"), "{location}")
            }
            other => panic!("{other}"),
        }
    }
}
