use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::{frame_to_chw, preprocess_frame, PreprocessMode};
use super::train::Sample;
use crate::error::{Error, Result};
use crate::tensorkit::{load_weights, save_weights, AuxConcat, LayerSpec, Sequential, Tensor};
use crate::vehiclesim::VehicleParams;
use crate::worldsense::{CameraFrame, LightState, SensorSnapshot};

pub const STEERING_BINS: usize = 10;
/// Gravity used to scale accelerometer features to g units.
const G: f64 = 9.81;

/// Normalized steering command of a bin: `−1 + 2·bin/9`.
pub fn bin_to_steer(bin: usize) -> f64 {
    -1.0 + 2.0 * bin as f64 / (STEERING_BINS - 1) as f64
}

/// Nearest bin to a steering command; ties go to the lower bin.
pub fn steer_to_bin(u: f64) -> Result<usize> {
    if !(u.abs() <= 1.0) {
        return Err(Error::Argument(format!(
            "steering command {u} outside [-1, 1]"
        )));
    }
    let k = ((u + 1.0) * (STEERING_BINS - 1) as f64 / 2.0 - 0.5).ceil();
    Ok(k.clamp(0.0, (STEERING_BINS - 1) as f64) as usize)
}

/// Conv block sizes for a square-ish input; each block is conv(k3, s1) then pool(2, 2).
fn encoder_dims(width: usize, height: usize, blocks: usize, what: &str) -> Result<(usize, usize)> {
    let (mut w, mut h) = (width, height);
    for b in 0..blocks {
        if w < 4 || h < 4 {
            return Err(Error::Config(format!(
                "{what} input {width}x{height} too small for {blocks} conv/pool blocks (block {b} sees {w}x{h})"
            )));
        }
        w = (w - 2) / 2;
        h = (h - 2) / 2;
    }
    Ok((w, h))
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

fn stack_frames(
    frames: &[&CameraFrame],
    mode: &PreprocessMode,
    width: usize,
    height: usize,
) -> Result<Vec<f64>> {
    let mut data = Vec::with_capacity(frames.len() * 3 * width * height);
    for f in frames {
        data.extend(frame_to_chw(&preprocess_frame(f, mode, width, height)?));
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub width: usize,
    pub height: usize,
    pub filters: Vec<usize>,
    pub hidden: usize,
    pub dropout: f64,
    pub preprocess: PreprocessMode,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            filters: vec![8, 16, 32, 32],
            hidden: 64,
            dropout: 0.1,
            preprocess: PreprocessMode::Rgb,
        }
    }
}

impl SteeringConfig {
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        check_dropout(self.dropout)?;
        self.preprocess.validate()?;
        if self.filters.is_empty() || self.hidden == 0 {
            return Err(Error::Config(
                "steering model needs at least one block and a hidden layer".into(),
            ));
        }
        let (w, h) = encoder_dims(self.width, self.height, self.filters.len(), "steering")?;
        let mut specs = Vec::new();
        let mut c = 3;
        for &f in &self.filters {
            specs.push(LayerSpec::Conv2d {
                in_channels: c,
                filters: f,
                kernel: 3,
                stride: 1,
            });
            specs.push(LayerSpec::batch_norm(f));
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool { size: 2, stride: 2 });
            c = f;
        }
        specs.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: c * w * h,
                units: self.hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: self.dropout },
            LayerSpec::Dense {
                inputs: self.hidden,
                units: STEERING_BINS,
            },
            LayerSpec::Softmax,
        ]);
        Ok(specs)
    }
}

/// Ten-way steering distribution and the command it selects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringOutput {
    pub bins: [f64; STEERING_BINS],
    pub chosen_bin: usize,
    pub steer_u: f64,
}

impl SteeringOutput {
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let bins: [f64; STEERING_BINS] = probs
            .try_into()
            .map_err(|_| Error::shape(STEERING_BINS, probs.len()))?;
        let chosen_bin = crate::tensorkit::Tensor::from_vec(probs.to_vec()).argmax();
        Ok(Self {
            bins,
            chosen_bin,
            steer_u: bin_to_steer(chosen_bin),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringModel {
    pub cfg: SteeringConfig,
    pub net: Sequential,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelDoc {
    Steering(SteeringConfig),
    Throttle(ThrottleConfig),
    Traffic(TrafficConfig),
}

fn load_doc(path: &Path) -> Result<(Sequential, ModelDoc)> {
    let (net, manifest) = load_weights(path)?;
    let doc: ModelDoc = serde_json::from_value(manifest.model)?;
    Ok((net, doc))
}

fn check_loaded(net: &Sequential, expected: &[LayerSpec], aux: Option<AuxConcat>) -> Result<()> {
    if net.specs() != expected || net.aux != aux {
        return Err(Error::Data(
            "weight file layers do not match its model config".into(),
        ));
    }
    Ok(())
}

impl SteeringModel {
    pub fn build(cfg: SteeringConfig, seed: u64) -> Result<Self> {
        let specs = cfg.layer_specs()?;
        let net = Sequential::new(&specs, None, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { cfg, net })
    }

    /// Preprocessed batch `[N, 3, H, W]`.
    pub fn batch(&self, frames: &[&CameraFrame]) -> Result<Tensor> {
        let data = stack_frames(
            frames,
            &self.cfg.preprocess,
            self.cfg.width,
            self.cfg.height,
        )?;
        Tensor::new(vec![frames.len(), 3, self.cfg.height, self.cfg.width], data)
    }

    /// Training example for a frame and its bin distribution.
    pub fn sample(&self, frame: &CameraFrame, target: &[f64; STEERING_BINS]) -> Result<Sample> {
        Ok(Sample {
            input: self
                .batch(&[frame])?
                .reshape(&[3, self.cfg.height, self.cfg.width])?,
            aux: None,
            target: Tensor::new(vec![STEERING_BINS], target.to_vec())?,
        })
    }

    pub fn predict(&self, frame: &CameraFrame) -> Result<SteeringOutput> {
        let out = self.net.predict(&self.batch(&[frame])?, None)?;
        SteeringOutput::from_probs(out.data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(
            path,
            &self.net,
            serde_json::to_value(ModelDoc::Steering(self.cfg.clone()))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_doc(path)? {
            (net, ModelDoc::Steering(cfg)) => {
                check_loaded(&net, &cfg.layer_specs()?, None)?;
                Ok(Self { cfg, net })
            }
            _ => Err(Error::Data(format!(
                "{} is not a steering model",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThrottleConfig {
    pub width: usize,
    pub height: usize,
    /// Frames per window.
    pub window: usize,
    pub filters: Vec<usize>,
    /// Hidden width of each of the two stacked LSTM layers.
    pub lstm_units: usize,
    pub dropout: f64,
    pub preprocess: PreprocessMode,
}

impl Default for ThrottleConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            window: 5,
            filters: vec![8, 16],
            lstm_units: 32,
            dropout: 0.1,
            preprocess: PreprocessMode::Rgb,
        }
    }
}

pub const SENSOR_FEATURES: usize = 7;

impl ThrottleConfig {
    pub fn aux(&self) -> AuxConcat {
        AuxConcat {
            after: 1,
            width: SENSOR_FEATURES,
        }
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        check_dropout(self.dropout)?;
        self.preprocess.validate()?;
        if self.window < 2 {
            return Err(Error::Config(format!(
                "throttle window must be >= 2, got {}",
                self.window
            )));
        }
        if self.filters.len() != 2 || self.lstm_units == 0 {
            return Err(Error::Config(
                "throttle encoder takes exactly two conv blocks and lstm_units > 0".into(),
            ));
        }
        let (w, h) = encoder_dims(self.width, self.height, 2, "throttle")?;
        let mut inner = Vec::new();
        let mut c = 3;
        for &f in &self.filters {
            inner.push(LayerSpec::Conv2d {
                in_channels: c,
                filters: f,
                kernel: 3,
                stride: 1,
            });
            inner.push(LayerSpec::Relu);
            inner.push(LayerSpec::MaxPool { size: 2, stride: 2 });
            c = f;
        }
        inner.push(LayerSpec::Flatten);
        let u = self.lstm_units;
        Ok(vec![
            LayerSpec::TimeDistributed { inner },
            LayerSpec::Lstm {
                inputs: c * w * h + SENSOR_FEATURES,
                units: u,
                return_sequences: true,
            },
            LayerSpec::Lstm {
                inputs: u,
                units: u,
                return_sequences: false,
            },
            LayerSpec::Dropout { rate: self.dropout },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: u,
                units: 1,
            },
        ])
    }
}

/// Sensor features scaled for the network: ultrasonic bits and accelerations in g.
pub fn sensor_features(s: &SensorSnapshot) -> [f64; SENSOR_FEATURES] {
    let mut f = s.features();
    for v in &mut f[4..] {
        *v /= G;
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThrottleModel {
    pub cfg: ThrottleConfig,
    pub net: Sequential,
}

impl ThrottleModel {
    pub fn build(cfg: ThrottleConfig, seed: u64) -> Result<Self> {
        let specs = cfg.layer_specs()?;
        let net = Sequential::new(
            &specs,
            Some(cfg.aux()),
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        Ok(Self { cfg, net })
    }

    /// `[N, W, 3, H, W]` frames and `[N, W, 7]` sensor features for full windows.
    pub fn batch(&self, windows: &[&[(CameraFrame, SensorSnapshot)]]) -> Result<(Tensor, Tensor)> {
        let w = self.cfg.window;
        let mut frames = Vec::with_capacity(windows.len() * w);
        let mut feats = Vec::with_capacity(windows.len() * w * SENSOR_FEATURES);
        for win in windows {
            if win.len() != w {
                return Err(Error::State(format!(
                    "throttle window holds {} of {w} frames",
                    win.len()
                )));
            }
            if win.windows(2).any(|p| !(p[1].1.t > p[0].1.t)) {
                return Err(Error::Validation(
                    "throttle window timestamps must increase".into(),
                ));
            }
            for (f, s) in win.iter() {
                frames.push(f);
                feats.extend(sensor_features(s));
            }
        }
        let data = stack_frames(
            &frames,
            &self.cfg.preprocess,
            self.cfg.width,
            self.cfg.height,
        )?;
        let n = windows.len();
        Ok((
            Tensor::new(vec![n, w, 3, self.cfg.height, self.cfg.width], data)?,
            Tensor::new(vec![n, w, SENSOR_FEATURES], feats)?,
        ))
    }

    /// Raw network output (normalized throttle before clamping).
    /// Training example for a window and the normalized throttle of its last step.
    pub fn sample(&self, window: &[(CameraFrame, SensorSnapshot)], target: f64) -> Result<Sample> {
        let (x, aux) = self.batch(&[window])?;
        let (w, h, wd) = (self.cfg.window, self.cfg.height, self.cfg.width);
        Ok(Sample {
            input: x.reshape(&[w, 3, h, wd])?,
            aux: Some(aux.reshape(&[w, SENSOR_FEATURES])?),
            target: Tensor::from_vec(vec![target]),
        })
    }

    pub fn predict_raw(&self, window: &[(CameraFrame, SensorSnapshot)]) -> Result<f64> {
        let (x, aux) = self.batch(&[window])?;
        Ok(self.net.predict(&x, Some(&aux))?.data()[0])
    }

    /// Throttle PWM for a full window; recurrent state starts from zero each call.
    pub fn predict_pwm(
        &self,
        window: &[(CameraFrame, SensorSnapshot)],
        params: &VehicleParams,
    ) -> Result<i32> {
        Ok(params.pwm_from_fraction(self.predict_raw(window)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(
            path,
            &self.net,
            serde_json::to_value(ModelDoc::Throttle(self.cfg.clone()))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_doc(path)? {
            (net, ModelDoc::Throttle(cfg)) => {
                check_loaded(&net, &cfg.layer_specs()?, Some(cfg.aux()))?;
                Ok(Self { cfg, net })
            }
            _ => Err(Error::Data(format!(
                "{} is not a throttle model",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub width: usize,
    pub height: usize,
    pub filters: Vec<usize>,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            width: 150,
            height: 150,
            filters: vec![8, 16, 32],
            hidden: 32,
            dropout: 0.1,
        }
    }
}

impl TrafficConfig {
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        check_dropout(self.dropout)?;
        if self.filters.len() != 3 || self.hidden == 0 {
            return Err(Error::Config(
                "traffic model takes exactly three conv blocks".into(),
            ));
        }
        let (mut w, mut h) = (self.width, self.height);
        let mut specs = Vec::new();
        let mut c = 3;
        for (b, &f) in self.filters.iter().enumerate() {
            // conv k3 s2 then pool 2
            if w < 5 || h < 5 {
                return Err(Error::Config(format!(
                    "traffic input {}x{} too small for three blocks (block {b} sees {w}x{h})",
                    self.width, self.height
                )));
            }
            w = ((w - 3) / 2).div_ceil(2);
            h = ((h - 3) / 2).div_ceil(2);
            specs.push(LayerSpec::Conv2d {
                in_channels: c,
                filters: f,
                kernel: 3,
                stride: 2,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool { size: 2, stride: 2 });
            c = f;
        }
        specs.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: c * w * h,
                units: self.hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: self.dropout },
            LayerSpec::Dense {
                inputs: self.hidden,
                units: 2,
            },
            LayerSpec::Softmax,
        ]);
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficModel {
    pub cfg: TrafficConfig,
    pub net: Sequential,
}

impl TrafficModel {
    pub fn build(cfg: TrafficConfig, seed: u64) -> Result<Self> {
        let specs = cfg.layer_specs()?;
        let net = Sequential::new(&specs, None, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { cfg, net })
    }

    pub fn batch(&self, frames: &[&CameraFrame]) -> Result<Tensor> {
        let data = stack_frames(
            frames,
            &PreprocessMode::Rgb,
            self.cfg.width,
            self.cfg.height,
        )?;
        Tensor::new(vec![frames.len(), 3, self.cfg.height, self.cfg.width], data)
    }

    pub fn sample(&self, frame: &CameraFrame, label: LightState) -> Result<Sample> {
        let mut target = vec![0.0; 2];
        target[label.index()] = 1.0;
        Ok(Sample {
            input: self
                .batch(&[frame])?
                .reshape(&[3, self.cfg.height, self.cfg.width])?,
            aux: None,
            target: Tensor::from_vec(target),
        })
    }

    /// Most probable light state and its probability; frames are area-scaled first.
    pub fn classify(&self, frame: &CameraFrame) -> Result<(LightState, f64)> {
        let out = self.net.predict(&self.batch(&[frame])?, None)?;
        let i = out.argmax();
        Ok((LightState::from_index(i), out.data()[i]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(
            path,
            &self.net,
            serde_json::to_value(ModelDoc::Traffic(self.cfg.clone()))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_doc(path)? {
            (net, ModelDoc::Traffic(cfg)) => {
                check_loaded(&net, &cfg.layer_specs()?, None)?;
                Ok(Self { cfg, net })
            }
            _ => Err(Error::Data(format!(
                "{} is not a traffic model",
                path.display()
            ))),
        }
    }
}

/// Clamp a raw throttle PWM to within `max_delta` of the previous command.
pub fn smooth_throttle(
    prev_pwm: i32,
    raw_pwm: i32,
    max_delta: i32,
    params: &VehicleParams,
) -> Result<i32> {
    for v in [prev_pwm, raw_pwm] {
        if v < params.pwm_min || v > params.pwm_max {
            return Err(Error::range("throttle pwm", v));
        }
    }
    Ok(raw_pwm.clamp(prev_pwm - max_delta, prev_pwm + max_delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bin_mapping() {
        assert_eq!(bin_to_steer(0), -1.0);
        assert_eq!(bin_to_steer(9), 1.0);
        assert!((bin_to_steer(4) + 1.0 / 9.0).abs() < 1e-15);
        for b in 0..10 {
            assert_eq!(steer_to_bin(bin_to_steer(b)).unwrap(), b);
        }
        // midway between bins 4 and 5
        assert_eq!(steer_to_bin(0.0).unwrap(), 4);
        assert!(steer_to_bin(1.5).is_err());
    }

    #[test]
    fn steering_shapes_and_determinism() {
        let m = SteeringModel::build(SteeringConfig::default(), 3).unwrap();
        assert_eq!(m.net.output_shape(&[1, 3, 64, 64]).unwrap(), vec![1, 10]);
        let again = SteeringModel::build(SteeringConfig::default(), 3).unwrap();
        assert_eq!(m, again);
        let out = m
            .predict(&CameraFrame::filled(64, 64, [0.4, 0.5, 0.6]))
            .unwrap();
        assert!((out.bins.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(out.steer_u, bin_to_steer(out.chosen_bin));
        let small = SteeringConfig {
            width: 40,
            height: 40,
            ..Default::default()
        };
        assert!(matches!(
            SteeringModel::build(small, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn throttle_shapes_and_range() {
        let cfg = ThrottleConfig {
            width: 64,
            height: 64,
            ..Default::default()
        };
        let m = ThrottleModel::build(cfg, 1).unwrap();
        let window: Vec<(CameraFrame, SensorSnapshot)> = (0..5)
            .map(|i| {
                let s = SensorSnapshot {
                    t: i as f64 * 0.04,
                    accel: [0.0, 0.0, 9.81],
                    ..Default::default()
                };
                (CameraFrame::filled(64, 64, [0.2; 3]), s)
            })
            .collect();
        let p = VehicleParams::default();
        let pwm = m.predict_pwm(&window, &p).unwrap();
        assert!((220..=420).contains(&pwm));
        assert_eq!(pwm, m.predict_pwm(&window, &p).unwrap());
        assert!(matches!(
            m.predict_pwm(&window[..3], &p),
            Err(Error::State(_))
        ));
        let short = ThrottleConfig {
            window: 1,
            ..Default::default()
        };
        assert!(matches!(
            ThrottleModel::build(short, 0),
            Err(Error::Config(_))
        ));
        assert!(
            matches!(m.cfg.layer_specs().unwrap()[3], LayerSpec::Dropout { rate } if rate == 0.1)
        );
    }

    #[test]
    fn traffic_has_three_blocks_and_two_outputs() {
        let m = TrafficModel::build(TrafficConfig::default(), 2).unwrap();
        let convs = m
            .net
            .specs()
            .iter()
            .filter(|s| matches!(s, LayerSpec::Conv2d { stride: 2, .. }))
            .count();
        assert_eq!(convs, 3);
        let (_, p) = m
            .classify(&CameraFrame::filled(720, 480, [0.3; 3]))
            .unwrap();
        assert!((0.5..=1.0).contains(&p));
        assert!(TrafficModel::build(
            TrafficConfig {
                width: 20,
                height: 20,
                ..Default::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn smoothing_examples() {
        let p = VehicleParams::default();
        assert_eq!(smooth_throttle(300, 340, 20, &p).unwrap(), 320);
        assert_eq!(smooth_throttle(300, 310, 20, &p).unwrap(), 310);
        assert_eq!(smooth_throttle(300, 250, 20, &p).unwrap(), 280);
        assert!(smooth_throttle(200, 250, 20, &p).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steer.etgw");
        let cfg = SteeringConfig {
            width: 24,
            height: 24,
            filters: vec![4, 4],
            ..Default::default()
        };
        let m = SteeringModel::build(cfg, 9).unwrap();
        m.save(&path).unwrap();
        assert_eq!(SteeringModel::load(&path).unwrap(), m);
        assert!(ThrottleModel::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn smoothing_bounded_and_idempotent(prev in 220i32..=420, raw in 220i32..=420) {
            let p = VehicleParams::default();
            let s = smooth_throttle(prev, raw, 20, &p).unwrap();
            prop_assert!((s - prev).abs() <= 20);
            if (raw - prev).abs() <= 20 {
                prop_assert_eq!(s, raw);
            }
        }
    }
}
