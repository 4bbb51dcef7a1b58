//! Input-gradient saliency for the steering model and its overlap with lane lines.

use image::ImageEncoder;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pilots::{rgb_to_hsv, MaskBands, SteeringModel, STEERING_BINS};
use crate::tensorkit::{LayerSpec, Mode, Sequential, Tensor};
use crate::worldsense::CameraFrame;

/// Per-pixel attention in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the largest value; first on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// 8-bit grayscale PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut png = Vec::new();
        image::codecs::png::PngEncoder::new(&mut png).write_image(
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(png)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyTarget {
    /// The bin the model picks for this frame.
    Chosen,
    Bin(usize),
}

/// |∂score/∂pixel| maxed over channels and divided by its maximum. `net`
/// maps `[1, C, H, W]` to scores `[1, K]`; a trailing softmax is skipped so
/// the gradient is taken on the pre-softmax score.
pub fn saliency_for_net(
    net: &Sequential,
    input: &Tensor,
    target: SaliencyTarget,
) -> Result<Heatmap> {
    let &[1, c, h, w] = input.shape() else {
        return Err(Error::shape("[1, C, H, W]", input.shape()));
    };
    let trimmed;
    let scorer = match net.layers.last() {
        Some(l) if l.spec == LayerSpec::Softmax => {
            trimmed = Sequential::from_layers(net.layers[..net.layers.len() - 1].to_vec(), net.aux);
            &trimmed
        }
        _ => net,
    };
    // infer mode uses no randomness
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (scores, trace) = scorer.run(input, None, Mode::Infer, &mut rng as &mut dyn RngCore)?;
    let k = scores.len();
    let bin = match target {
        SaliencyTarget::Chosen => scores.argmax(),
        SaliencyTarget::Bin(b) if b < k => b,
        SaliencyTarget::Bin(b) => {
            return Err(Error::Argument(format!("bin {b} outside 0..{}", k - 1)));
        }
    };
    let mut seed = Tensor::zeros(scores.shape());
    seed.data_mut()[bin] = 1.0;
    let (dx, _) = scorer.backprop(&trace, &seed, true)?;
    let dx = dx.ok_or_else(|| Error::Internal("input gradient missing".into()))?;
    let plane = h * w;
    let mut values: Vec<f64> = (0..plane)
        .map(|i| {
            (0..c)
                .map(|ch| dx.data()[ch * plane + i].abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let m = values.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        for v in &mut values {
            *v /= m;
        }
    }
    Ok(Heatmap {
        width: w,
        height: h,
        values,
    })
}

/// Saliency of a steering bin for a frame at the model's resolution.
pub fn saliency_map(
    model: &SteeringModel,
    frame: &CameraFrame,
    target: SaliencyTarget,
) -> Result<Heatmap> {
    if let SaliencyTarget::Bin(b) = target {
        if b >= STEERING_BINS {
            return Err(Error::Argument(format!(
                "bin {b} outside 0..{}",
                STEERING_BINS - 1
            )));
        }
    }
    if (frame.width, frame.height) != (model.cfg.width, model.cfg.height) {
        return Err(Error::shape(
            (model.cfg.width, model.cfg.height),
            (frame.width, frame.height),
        ));
    }
    saliency_for_net(&model.net, &model.batch(&[frame])?, target)
}

/// Blend `heatmap` into `frame` toward pure red with weight `alpha·h`.
pub fn overlay(frame: &CameraFrame, heatmap: &Heatmap, alpha: f64) -> Result<CameraFrame> {
    if (frame.width, frame.height) != (heatmap.width, heatmap.height) || frame.channels != 3 {
        return Err(Error::shape(
            (heatmap.width, heatmap.height, 3),
            (frame.width, frame.height, frame.channels),
        ));
    }
    let mut out = frame.clone();
    for (px, h) in out.pixels.chunks_exact_mut(3).zip(&heatmap.values) {
        let a = (alpha * h).clamp(0.0, 1.0);
        px[0] = (1.0 - a) * px[0] + a;
        px[1] *= 1.0 - a;
        px[2] *= 1.0 - a;
    }
    Ok(out)
}

/// Grow a binary mask by `radius` pixels in every direction (square neighborhood).
pub fn dilate_mask(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            for rr in r.saturating_sub(radius)..(r + radius + 1).min(height) {
                for cc in c.saturating_sub(radius)..(c + radius + 1).min(width) {
                    out[rr * width + cc] = true;
                }
            }
        }
    }
    out
}

/// Fraction of the top-decile heatmap pixels (at least one; ties broken by
/// index) that fall inside `mask`.
pub fn line_overlap_score(heatmap: &Heatmap, mask: &[bool]) -> Result<f64> {
    if mask.len() != heatmap.values.len() {
        return Err(Error::shape(heatmap.values.len(), mask.len()));
    }
    if !heatmap.values.iter().any(|v| *v > 0.0) {
        return Err(Error::Undefined("heatmap is all zero".into()));
    }
    let n = heatmap.values.len();
    let top = n.div_ceil(10);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        heatmap.values[b]
            .total_cmp(&heatmap.values[a])
            .then(a.cmp(&b))
    });
    let hits = order[..top].iter().filter(|&&i| mask[i]).count();
    Ok(hits as f64 / top as f64)
}

/// Lane-line pixels found by color alone, for frames without ground truth.
pub fn color_line_mask(frame: &CameraFrame, bands: &MaskBands) -> Vec<bool> {
    frame
        .pixels
        .chunks_exact(frame.channels)
        .map(|px| bands.contains(rgb_to_hsv([px[0], px[1], px[2]])))
        .collect()
}

/// Uniform random heatmap: the chance-level baseline.
pub fn random_heatmap<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Heatmap {
    Heatmap {
        width,
        height,
        values: (0..width * height).map(|_| rng.random::<f64>()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::SteeringConfig;
    use crate::tensorkit::Layer;
    use proptest::prelude::*;

    fn one_pixel_net(h: usize, w: usize, pixel: usize) -> Sequential {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dense = Layer::new(
            LayerSpec::Dense {
                inputs: 3 * h * w,
                units: 2,
            },
            &mut rng,
        );
        for p in &mut dense.params {
            p.fill(0.0);
        }
        // unit 0 reads channel 1 of `pixel`; layout [units, inputs]
        dense.params[0].data_mut()[h * w + pixel] = 0.7;
        Sequential::from_layers(vec![Layer::new(LayerSpec::Flatten, &mut rng), dense], None)
    }

    #[test]
    fn linear_single_pixel_oracle() {
        let net = one_pixel_net(4, 5, 7);
        let x = Tensor::filled(&[1, 3, 4, 5], 0.3);
        let hm = saliency_for_net(&net, &x, SaliencyTarget::Bin(0)).unwrap();
        assert_eq!((hm.width, hm.height), (5, 4));
        for (i, v) in hm.values.iter().enumerate() {
            assert_eq!(*v, if i == 7 { 1.0 } else { 0.0 });
        }
        let zero = saliency_for_net(&net, &x, SaliencyTarget::Bin(1)).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        assert!(matches!(
            line_overlap_score(&zero, &[false; 20]),
            Err(Error::Undefined(_))
        ));
        assert!(matches!(
            saliency_for_net(&net, &x, SaliencyTarget::Bin(2)),
            Err(Error::Argument(_))
        ));
    }

    fn small_model() -> SteeringModel {
        let cfg = SteeringConfig {
            width: 16,
            height: 16,
            filters: vec![4, 4],
            hidden: 8,
            ..SteeringConfig::default()
        };
        SteeringModel::build(cfg, 5).unwrap()
    }

    fn textured(w: usize, h: usize) -> CameraFrame {
        let mut f = CameraFrame::filled(w, h, [0.0; 3]);
        for (i, v) in f.pixels.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 100.0;
        }
        f
    }

    #[test]
    fn steering_map_is_normalized_and_deterministic() {
        let m = small_model();
        let f = textured(16, 16);
        let a = saliency_map(&m, &f, SaliencyTarget::Chosen).unwrap();
        let b = saliency_map(&m, &f, SaliencyTarget::Chosen).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (16, 16));
        assert_eq!(a.max(), 1.0);
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(
            saliency_map(&m, &f, SaliencyTarget::Bin(10)),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            saliency_map(&m, &textured(8, 8), SaliencyTarget::Chosen),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn scaling_final_dense_keeps_argmax() {
        let mut m = small_model();
        let f = textured(16, 16);
        let before = saliency_map(&m, &f, SaliencyTarget::Bin(3)).unwrap();
        let last_dense = m
            .net
            .layers
            .iter()
            .rposition(|l| matches!(l.spec, LayerSpec::Dense { .. }))
            .unwrap();
        m.net.layers[last_dense].params[0].scale(3.5);
        let after = saliency_map(&m, &f, SaliencyTarget::Bin(3)).unwrap();
        assert_eq!(before.argmax(), after.argmax());
    }

    #[test]
    fn overlay_cases() {
        let f = textured(4, 4);
        let hm = Heatmap {
            width: 4,
            height: 4,
            values: (0..16).map(|i| i as f64 / 15.0).collect(),
        };
        assert_eq!(overlay(&f, &hm, 0.0).unwrap(), f);
        let zero = Heatmap {
            values: vec![0.0; 16],
            ..hm.clone()
        };
        assert_eq!(overlay(&f, &zero, 1.0).unwrap(), f);
        let o = overlay(&f, &hm, 1.0).unwrap();
        assert_eq!(o.pixel(3, 3), [1.0, 0.0, 0.0]);
        assert!(overlay(&textured(3, 4), &hm, 0.5).is_err());
    }

    #[test]
    fn overlap_extremes() {
        let hm = Heatmap {
            width: 10,
            height: 1,
            values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        };
        let mut mask = vec![false; 10];
        mask[9] = true;
        assert_eq!(line_overlap_score(&hm, &mask).unwrap(), 1.0);
        mask[9] = false;
        mask[0] = true;
        assert_eq!(line_overlap_score(&hm, &mask).unwrap(), 0.0);
    }

    #[test]
    fn random_baseline_tracks_mask_area() {
        let (w, h) = (40, 30);
        let mask: Vec<bool> = (0..w * h).map(|i| (i % w) < 10).collect();
        let area = 0.25;
        let mut total = 0.0;
        let seeds = 40;
        for s in 0..seeds {
            let hm = random_heatmap(w, h, &mut ChaCha8Rng::seed_from_u64(s));
            total += line_overlap_score(&hm, &mask).unwrap();
        }
        assert!((total / seeds as f64 - area).abs() < 0.05);
    }

    #[test]
    fn color_mask_finds_line_colors() {
        let mut f = CameraFrame::filled(3, 1, [0.35, 0.35, 0.37]);
        f.set_pixel(0, 1, [0.95, 0.8, 0.15]);
        f.set_pixel(0, 2, [0.95, 0.95, 0.95]);
        assert_eq!(
            color_line_mask(&f, &MaskBands::default()),
            vec![false, true, true]
        );
    }

    #[test]
    fn dilation_radius_two() {
        let mut m = vec![false; 49];
        m[3 * 7 + 3] = true;
        let d = dilate_mask(&m, 7, 7, 2);
        assert_eq!(d.iter().filter(|b| **b).count(), 25);
        assert!(d[7 + 1] && !d[0]);
    }

    proptest! {
        #[test]
        fn overlap_in_unit_interval(vals in proptest::collection::vec(0.0f64..1.0, 20), bits in proptest::collection::vec(any::<bool>(), 20)) {
            let hm = Heatmap { width: 5, height: 4, values: vals };
            if let Ok(s) = line_overlap_score(&hm, &bits) {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
