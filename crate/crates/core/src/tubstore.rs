//! Drive recordings ("tubs"): one JSON record and one PNG frame per tick.
//!
//! Layout: `manifest.json`, `record_%06d.json`, `frame_%06d.png`.

use std::path::{Path, PathBuf};

use image::ImageEncoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::pilots::{split_indices, steer_to_bin, PreprocessMode, STEERING_BINS};
use crate::vehiclesim::VehicleParams;
use crate::worldsense::{CameraFrame, SensorSnapshot};

pub const TUB_FORMAT: &str = "etg-tub-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriveMode {
    Manual,
    Autopilot,
}

/// One tick of recorded driving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubRecord {
    pub img: String,
    pub steer_u: f64,
    pub steering_bin: usize,
    pub throttle_pwm: i32,
    pub ultra: [u8; 4],
    pub imu: [f64; 3],
    pub mode: DriveMode,
    pub t: f64,
    pub seq: u64,
}

impl TubRecord {
    /// Record for a command and sensor reading; `img` and `seq` are assigned on append.
    pub fn new(
        steer_u: f64,
        throttle_pwm: i32,
        sensors: &SensorSnapshot,
        mode: DriveMode,
        t: f64,
    ) -> Result<Self> {
        Ok(Self {
            img: String::new(),
            steer_u,
            steering_bin: steer_to_bin(steer_u).map_err(|e| Error::Validation(e.to_string()))?,
            throttle_pwm,
            ultra: sensors.ultra,
            imu: sensors.accel,
            mode,
            t,
            seq: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let p = VehicleParams::default();
        if !(self.steer_u.abs() <= 1.0) {
            return Err(Error::Validation(format!(
                "steer_u {} outside [-1, 1]",
                self.steer_u
            )));
        }
        if steer_to_bin(self.steer_u)? != self.steering_bin {
            return Err(Error::Validation(format!(
                "steering_bin {} does not match steer_u {}",
                self.steering_bin, self.steer_u
            )));
        }
        if self.throttle_pwm < p.pwm_min || self.throttle_pwm > p.pwm_max {
            return Err(Error::Validation(format!(
                "throttle_pwm {} outside [{}, {}]",
                self.throttle_pwm, p.pwm_min, p.pwm_max
            )));
        }
        if self.ultra.iter().any(|b| *b > 1) {
            return Err(Error::Validation(format!(
                "ultra bits {:?} must be 0 or 1",
                self.ultra
            )));
        }
        if !self.imu.iter().all(|v| v.is_finite()) || !self.t.is_finite() {
            return Err(Error::Validation("imu and t must be finite".into()));
        }
        Ok(())
    }

    pub fn sensors(&self) -> SensorSnapshot {
        SensorSnapshot {
            ultra: self.ultra,
            accel: self.imu,
            t: self.t,
            seq: self.seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubManifest {
    pub format: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub preprocess: PreprocessMode,
    /// SHA-256 of the run configuration that produced the tub.
    pub config_hash: String,
    pub seed: u64,
}

impl TubManifest {
    pub fn new(width: usize, height: usize, config: &serde_json::Value, seed: u64) -> Self {
        Self {
            format: TUB_FORMAT.into(),
            width,
            height,
            channels: 3,
            preprocess: PreprocessMode::Rgb,
            config_hash: sha256_hex(config.to_string().as_bytes()),
            seed,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// 8-bit RGB PNG of a frame; deterministic for identical frames.
pub fn encode_png(frame: &CameraFrame) -> Result<Vec<u8>> {
    if frame.channels != 3 {
        return Err(Error::shape(3, frame.channels));
    }
    let mut png = Vec::new();
    image::codecs::png::PngEncoder::new(&mut png).write_image(
        &frame.to_rgb8(),
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(png)
}

pub fn record_name(seq: u64) -> String {
    format!("record_{seq:06}.json")
}

pub fn frame_name(seq: u64) -> String {
    format!("frame_{seq:06}.png")
}

/// A tub directory open for appending or reading.
#[derive(Debug)]
pub struct Tub {
    dir: PathBuf,
    manifest: TubManifest,
    count: u64,
    last_t: Option<f64>,
}

impl Tub {
    /// Create a new tub; fails if `dir` already holds one.
    pub fn create(dir: &Path, manifest: TubManifest) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let mpath = dir.join("manifest.json");
        if mpath.exists() {
            return Err(Error::State(format!(
                "{} already contains a tub",
                dir.display()
            )));
        }
        write_atomic(&mpath, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            count: 0,
            last_t: None,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let bytes = std::fs::read(&mpath).map_err(|e| Error::storage(&mpath, e))?;
        let manifest: TubManifest = serde_json::from_slice(&bytes)?;
        let mut count = 0u64;
        for entry in std::fs::read_dir(dir).map_err(|e| Error::storage(dir, e))? {
            let name = entry.map_err(|e| Error::storage(dir, e))?.file_name();
            let name = name.to_string_lossy();
            if name.starts_with("record_") && name.ends_with(".json") {
                count += 1;
            }
        }
        let mut tub = Self {
            dir: dir.to_path_buf(),
            manifest,
            count,
            last_t: None,
        };
        if count > 0 {
            tub.last_t = Some(tub.read_record(count - 1)?.t);
        }
        Ok(tub)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &TubManifest {
        &self.manifest
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Store `frame` and `rec`; assigns and returns the next sequence number.
    pub fn append(&mut self, frame: &CameraFrame, mut rec: TubRecord) -> Result<u64> {
        let seq = self.count;
        rec.seq = seq;
        rec.img = frame_name(seq);
        rec.validate()?;
        if frame.width != self.manifest.width
            || frame.height != self.manifest.height
            || frame.channels != 3
        {
            return Err(Error::Validation(format!(
                "frame {}x{}x{} does not match tub {}x{}x3",
                frame.width,
                frame.height,
                frame.channels,
                self.manifest.width,
                self.manifest.height
            )));
        }
        if let Some(last) = self.last_t {
            if !(rec.t > last) {
                return Err(Error::Validation(format!(
                    "record time {} not after {last}",
                    rec.t
                )));
            }
        }
        write_atomic(&self.dir.join(&rec.img), &encode_png(frame)?)?;
        let mut json = serde_json::to_vec(&rec)?;
        json.push(b'\n');
        write_atomic(&self.dir.join(record_name(seq)), &json)?;
        self.count += 1;
        self.last_t = Some(rec.t);
        Ok(seq)
    }

    pub fn read_record(&self, seq: u64) -> Result<TubRecord> {
        let path = self.dir.join(record_name(seq));
        let bytes = std::fs::read(&path).map_err(|e| Error::storage(&path, e))?;
        let rec: TubRecord = serde_json::from_slice(&bytes)?;
        if rec.seq != seq {
            return Err(Error::Integrity {
                seq,
                detail: format!("record file holds seq {}", rec.seq),
            });
        }
        Ok(rec)
    }

    pub fn read_frame(&self, rec: &TubRecord) -> Result<CameraFrame> {
        let path = self.dir.join(&rec.img);
        if !path.is_file() {
            return Err(Error::Integrity {
                seq: rec.seq,
                detail: format!("missing image {}", rec.img),
            });
        }
        let img = image::open(&path)?.to_rgb8();
        let mut frame =
            CameraFrame::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())?;
        frame.t = rec.t;
        Ok(frame)
    }

    /// All records in sequence order.
    pub fn records(&self) -> Result<Vec<TubRecord>> {
        (0..self.count).map(|s| self.read_record(s)).collect()
    }
}

/// Frames with one-hot steering targets, in sequence order.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringSet {
    pub frames: Vec<CameraFrame>,
    pub targets: Vec<[f64; STEERING_BINS]>,
    pub seqs: Vec<u64>,
}

/// Frames and sensor readings with sliding windows over them.
#[derive(Debug, Clone, PartialEq)]
pub struct ThrottleSet {
    pub steps: Vec<(CameraFrame, SensorSnapshot)>,
    pub window: usize,
    /// First index of each window and the normalized throttle of its last record.
    pub windows: Vec<(usize, f64)>,
}

impl ThrottleSet {
    pub fn window_at(&self, i: usize) -> &[(CameraFrame, SensorSnapshot)] {
        let start = self.windows[i].0;
        &self.steps[start..start + self.window]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTarget {
    Steering,
    Throttle,
    Traffic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Steering(SteeringSet),
    Throttle(ThrottleSet),
}

pub fn one_hot_bin(bin: usize) -> [f64; STEERING_BINS] {
    let mut v = [0.0; STEERING_BINS];
    v[bin] = 1.0;
    v
}

/// Start indices of the `n − w + 1` stride-1 windows of length `w`.
pub fn window_sequences(n: usize, w: usize) -> Result<Vec<usize>> {
    if w < 2 {
        return Err(Error::Argument(format!("window must be >= 2, got {w}")));
    }
    if n < w {
        return Err(Error::Data(format!(
            "{n} records cannot fill a window of {w}"
        )));
    }
    Ok((0..=n - w).collect())
}

/// Load a tub for one model. `window` is used only for throttle data.
pub fn load_dataset(tub: &Tub, target: DatasetTarget, window: usize) -> Result<Dataset> {
    let records = tub.records()?;
    match target {
        DatasetTarget::Steering => {
            let mut set = SteeringSet {
                frames: Vec::with_capacity(records.len()),
                targets: Vec::with_capacity(records.len()),
                seqs: Vec::with_capacity(records.len()),
            };
            for r in &records {
                set.frames.push(tub.read_frame(r)?);
                set.targets.push(one_hot_bin(r.steering_bin));
                set.seqs.push(r.seq);
            }
            Ok(Dataset::Steering(set))
        }
        DatasetTarget::Throttle => {
            let starts = window_sequences(records.len(), window)?;
            let p = VehicleParams::default();
            let mut steps = Vec::with_capacity(records.len());
            for r in &records {
                steps.push((tub.read_frame(r)?, r.sensors()));
            }
            let windows = starts
                .into_iter()
                .map(|s| (s, p.pwm_fraction(records[s + window - 1].throttle_pwm)))
                .collect();
            Ok(Dataset::Throttle(ThrottleSet { steps, window, windows }))
        }
        DatasetTarget::Traffic => Err(Error::Data(
            "tub records carry no traffic-light labels; train the light classifier on synthetic samples".into(),
        )),
    }
}

/// Seeded shuffle and split; disjoint and exhaustive.
pub fn split_dataset<T: Clone>(
    items: &[T],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let (t, v) = split_indices(items.len(), val_fraction, seed);
    Ok((
        t.iter().map(|&i| items[i].clone()).collect(),
        v.iter().map(|&i| items[i].clone()).collect(),
    ))
}
