use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::Tensor;
use crate::worldsense::CameraFrame;

/// Hue/saturation/value bands whose value channel gets boosted.
/// Hue is in degrees, saturation and value in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskBands {
    pub yellow_hue_deg: [f64; 2],
    pub yellow_sat_min: f64,
    pub yellow_val_min: f64,
    pub white_sat_max: f64,
    pub white_val_min: f64,
    pub gain: f64,
}

impl Default for MaskBands {
    fn default() -> Self {
        Self {
            yellow_hue_deg: [35.0, 70.0],
            yellow_sat_min: 0.4,
            yellow_val_min: 0.4,
            white_sat_max: 0.15,
            white_val_min: 0.75,
            gain: 1.6,
        }
    }
}

impl MaskBands {
    pub fn validate(&self) -> Result<()> {
        let [h0, h1] = self.yellow_hue_deg;
        if !(0.0..=360.0).contains(&h0) || !(0.0..=360.0).contains(&h1) || h0 > h1 {
            return Err(Error::Config(format!(
                "yellow hue band {h0}..{h1} outside 0..360"
            )));
        }
        for (name, v) in [
            ("yellow_sat_min", self.yellow_sat_min),
            ("yellow_val_min", self.yellow_val_min),
            ("white_sat_max", self.white_sat_max),
            ("white_val_min", self.white_val_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.gain >= 1.0) {
            return Err(Error::Config(format!(
                "mask gain must be >= 1, got {}",
                self.gain
            )));
        }
        Ok(())
    }

    /// Whether an HSV pixel (hue as a fraction of a turn) lies in either line band.
    pub fn contains(&self, hsv: [f64; 3]) -> bool {
        let [h, s, v] = hsv;
        let hue = h * 360.0;
        let yellow = hue >= self.yellow_hue_deg[0]
            && hue <= self.yellow_hue_deg[1]
            && s >= self.yellow_sat_min
            && v >= self.yellow_val_min;
        let white = s <= self.white_sat_max && v >= self.white_val_min;
        yellow || white
    }
}

/// Colorspace treatment applied before a frame reaches a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PreprocessMode {
    #[default]
    Rgb,
    Hsv,
    HsvMasked(MaskBands),
}

impl PreprocessMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            PreprocessMode::HsvMasked(b) => b.validate(),
            _ => Ok(()),
        }
    }
}

/// RGB → HSV with every channel in [0, 1] (hue as a fraction of a turn).
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h / 6.0, s, max]
}

/// Area-average resample to `width` × `height`; identity when sizes match.
pub fn resize_area(frame: &CameraFrame, width: usize, height: usize) -> CameraFrame {
    if frame.width == width && frame.height == height {
        return frame.clone();
    }
    let ch = frame.channels;
    let sx = frame.width as f64 / width as f64;
    let sy = frame.height as f64 / height as f64;
    let mut out = CameraFrame {
        width,
        height,
        channels: ch,
        pixels: vec![0.0; width * height * ch],
        t: frame.t,
    };
    // fractional coverage of source cells by destination cell [a, b)
    let spans = |a: f64, b: f64, limit: usize| -> Vec<(usize, f64)> {
        let start = a.floor() as usize;
        let end = (b.ceil() as usize).min(limit);
        (start..end)
            .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0)))
            .filter(|(_, w)| *w > 0.0)
            .collect()
    };
    let cols: Vec<Vec<(usize, f64)>> = (0..width)
        .map(|c| spans(c as f64 * sx, (c + 1) as f64 * sx, frame.width))
        .collect();
    for r in 0..height {
        let rows = spans(r as f64 * sy, (r + 1) as f64 * sy, frame.height);
        for (c, col_spans) in cols.iter().enumerate() {
            let mut acc = [0.0; 4];
            let mut total = 0.0;
            for &(sr, wr) in &rows {
                for &(sc, wc) in col_spans {
                    let w = wr * wc;
                    let base = (sr * frame.width + sc) * ch;
                    for k in 0..ch {
                        acc[k] += w * frame.pixels[base + k];
                    }
                    total += w;
                }
            }
            let base = (r * width + c) * ch;
            for k in 0..ch {
                out.pixels[base + k] = acc[k] / total;
            }
        }
    }
    out
}

/// Resize to the model resolution, then apply the colorspace mode.
pub fn preprocess_frame(
    frame: &CameraFrame,
    mode: &PreprocessMode,
    width: usize,
    height: usize,
) -> Result<CameraFrame> {
    if frame.channels != 3 {
        return Err(Error::shape(3, frame.channels));
    }
    let mut out = resize_area(frame, width, height);
    match mode {
        PreprocessMode::Rgb => {}
        PreprocessMode::Hsv => {
            for px in out.pixels.chunks_exact_mut(3) {
                px.copy_from_slice(&rgb_to_hsv([px[0], px[1], px[2]]));
            }
        }
        PreprocessMode::HsvMasked(bands) => {
            for px in out.pixels.chunks_exact_mut(3) {
                let mut hsv = rgb_to_hsv([px[0], px[1], px[2]]);
                if bands.contains(hsv) {
                    hsv[2] = (hsv[2] * bands.gain).min(1.0);
                }
                px.copy_from_slice(&hsv);
            }
        }
    }
    Ok(out)
}

/// Interleaved HWC frame → planar CHW values.
pub fn frame_to_chw(frame: &CameraFrame) -> Vec<f64> {
    let (w, h, c) = (frame.width, frame.height, frame.channels);
    let mut out = vec![0.0; w * h * c];
    for (i, px) in frame.pixels.chunks_exact(c).enumerate() {
        for (k, v) in px.iter().enumerate() {
            out[k * w * h + i] = *v;
        }
    }
    out
}

/// Preprocessed frame as a [1, C, H, W] tensor.
pub fn frame_tensor(
    frame: &CameraFrame,
    mode: &PreprocessMode,
    width: usize,
    height: usize,
) -> Result<Tensor> {
    let f = preprocess_frame(frame, mode, width, height)?;
    Tensor::new(vec![1, f.channels, height, width], frame_to_chw(&f))
}
