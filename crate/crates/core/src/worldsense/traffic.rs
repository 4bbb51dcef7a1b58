use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CameraFrame, LightState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSynthConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for TrafficSynthConfig {
    fn default() -> Self {
        Self {
            width: 150,
            height: 150,
        }
    }
}

/// One synthetic webcam view of a traffic light: cluttered background, dark
/// housing, and a lit disc near pure red or pure green.
pub fn synth_traffic_light<R: Rng + ?Sized>(
    rng: &mut R,
    label: LightState,
    cfg: &TrafficSynthConfig,
) -> (CameraFrame, LightState) {
    let (w, h) = (cfg.width, cfg.height);
    let (wf, hf) = (w as f64, h as f64);

    // muted background gradient
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.65));
    let tilt: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let mut frame = CameraFrame::filled(w, h, [0.0; 3]);
    for row in 0..h {
        let f = row as f64 / hf;
        for col in 0..w {
            let rgb = std::array::from_fn(|c| base[c] + tilt[c] * f);
            frame.set_pixel(row, col, rgb);
        }
    }

    // clutter: low-saturation rectangles
    for _ in 0..rng.random_range(2..6) {
        let gray = rng.random_range(0.15..0.85);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
        let rw = rng.random_range(0.08..0.35) * wf;
        let rh = rng.random_range(0.08..0.35) * hf;
        let x0 = rng.random_range(0.0..wf - rw);
        let y0 = rng.random_range(0.0..hf - rh);
        fill_rect(
            &mut frame,
            x0,
            y0,
            rw,
            rh,
            std::array::from_fn(|c| gray + tint[c]),
        );
    }

    // housing and lamp, jittered around the center by up to 15% of the frame
    let min_dim = wf.min(hf);
    let radius = rng.random_range(0.10..0.18) * min_dim;
    let cx = wf / 2.0 + rng.random_range(-0.15..0.15) * wf;
    let cy = hf / 2.0 + rng.random_range(-0.15..0.15) * hf;
    let housing_gray = rng.random_range(0.03..0.12);
    fill_rect(
        &mut frame,
        cx - 1.5 * radius,
        cy - 1.6 * radius,
        3.0 * radius,
        3.2 * radius,
        [housing_gray; 3],
    );
    let brightness = rng.random_range(0.7..1.0);
    let lamp = match label {
        LightState::Red => [
            brightness,
            brightness * rng.random_range(0.0..0.2),
            brightness * rng.random_range(0.0..0.2),
        ],
        LightState::Green => [
            brightness * rng.random_range(0.0..0.25),
            brightness,
            brightness * rng.random_range(0.0..0.35),
        ],
    };
    for row in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= radius * radius {
                frame.set_pixel(row, col, lamp);
            }
        }
    }

    for v in &mut frame.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    frame.quantize();
    (frame, label)
}

fn fill_rect(frame: &mut CameraFrame, x0: f64, y0: f64, w: f64, h: f64, rgb: [f64; 3]) {
    let c0 = x0.max(0.0).floor() as usize;
    let r0 = y0.max(0.0).floor() as usize;
    let c1 = ((x0 + w).ceil().max(0.0) as usize).min(frame.width);
    let r1 = ((y0 + h).ceil().max(0.0) as usize).min(frame.height);
    for row in r0..r1 {
        for col in c0..c1 {
            frame.set_pixel(row, col, rgb);
        }
    }
}

/// `n` labelled samples, each red with probability `red_fraction`.
pub fn synth_traffic_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    red_fraction: f64,
    cfg: &TrafficSynthConfig,
) -> Vec<(CameraFrame, LightState)> {
    (0..n)
        .map(|_| {
            let label = if rng.random_bool(red_fraction.clamp(0.0, 1.0)) {
                LightState::Red
            } else {
                LightState::Green
            };
            synth_traffic_light(rng, label, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_under_seed() {
        let cfg = TrafficSynthConfig::default();
        let a = synth_traffic_light(&mut ChaCha8Rng::seed_from_u64(7), LightState::Red, &cfg);
        let b = synth_traffic_light(&mut ChaCha8Rng::seed_from_u64(7), LightState::Red, &cfg);
        assert_eq!(a, b);
        a.0.validate().unwrap();
    }

    #[test]
    fn green_lamp_is_green_inside_disc() {
        let cfg = TrafficSynthConfig {
            width: 64,
            height: 64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (f, _) = synth_traffic_light(&mut rng, LightState::Green, &cfg);
            // the disc holds the only strongly green-dominant pixels
            let (mut g, mut r, mut n) = (0.0, 0.0, 0);
            for row in 0..f.height {
                for col in 0..f.width {
                    let p = f.pixel(row, col);
                    if p[1] >= 0.69 && p[1] > p[0] + 0.3 {
                        g += p[1];
                        r += p[0];
                        n += 1;
                    }
                }
            }
            assert!(n > 0);
            assert!(g / n as f64 > r / n as f64);
        }
    }

    #[test]
    fn label_balance_binomial_bound() {
        let cfg = TrafficSynthConfig {
            width: 16,
            height: 16,
        };
        let data = synth_traffic_dataset(&mut ChaCha8Rng::seed_from_u64(5), 1000, 0.5, &cfg);
        let red = data.iter().filter(|(_, l)| *l == LightState::Red).count();
        assert!((400..=600).contains(&red), "{red}");
    }
}
