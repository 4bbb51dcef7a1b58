//! Build a small conv net, verify its gradients numerically, then fit a toy target with Adam.
//!
//! `cargo run --release --example gradient_check`

use etg::tensorkit::{
    adam_update, grad_check, mse_loss, AdamState, LayerSpec, Loss, Mode, Sequential, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> etg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let specs = [
        LayerSpec::Conv2d {
            in_channels: 1,
            filters: 3,
            kernel: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: 27,
            units: 1,
        },
    ];
    let mut net = Sequential::new(&specs, None, &mut rng);
    let n = 16;
    let x = Tensor::new(
        vec![n, 1, 8, 8],
        (0..n * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    // target: mean brightness of the left half
    let y: Vec<f64> = (0..n)
        .map(|i| {
            (0..8)
                .flat_map(|r| (0..4).map(move |c| r * 8 + c))
                .map(|k| x.data()[i * 64 + k])
                .sum::<f64>()
                / 32.0
        })
        .collect();
    let y = Tensor::new(vec![n, 1], y)?;

    let report = grad_check(&mut net, &x, None, &y, Loss::Mse, None, true)?;
    println!(
        "gradient check: max relative error {:.2e} over {} entries",
        report.max_rel_error, report.checked
    );

    let mut adam = AdamState::new(net.params(), 1e-2);
    for step in 0..=300 {
        let pred = net.forward(&x, None, Mode::Train, &mut rng)?;
        let (loss, grad) = mse_loss(&pred, &y)?;
        let (_, grads) = net.backward(&grad, false)?;
        adam_update(&mut net.params_mut(), &grads, &mut adam)?;
        if step % 100 == 0 {
            println!("step {step:>3}: mse {loss:.5}");
        }
    }
    Ok(())
}
