//! The simulated world and everything the car can sense in it.

mod camera;
mod sensors;
mod track;
mod traffic;

pub use camera::{render_camera, render_line_mask, render_road_mask, CameraConfig};
pub use sensors::{sample_imu, sample_ultrasonic, Side, UltrasonicConfig};
pub use track::{build_track, LineColor, Projection, Track, TrackSpec};
pub use traffic::{synth_traffic_dataset, synth_traffic_light, TrafficSynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehiclesim::VehicleState;

/// Largest wall margin the track index is built to answer for.
pub(crate) const WALL_MARGIN_MAX: f64 = 1.0;

/// A round obstacle standing in for another robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Red,
    Green,
}

impl LightState {
    pub fn index(self) -> usize {
        match self {
            LightState::Red => 0,
            LightState::Green => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            LightState::Red
        } else {
            LightState::Green
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub position: (f64, f64),
    pub state: LightState,
    /// Simulation time at which a red light switches to green.
    #[serde(default)]
    pub green_at_s: Option<f64>,
}

/// Track, obstacles and traffic light. Serializes to the replay document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub track: Track,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub light: TrafficLight,
    pub rng_seed: u64,
    /// Distance of the boundary walls beyond each lane edge.
    #[serde(default = "default_wall_margin")]
    pub wall_margin_m: f64,
}

fn default_wall_margin() -> f64 {
    0.5
}

impl World {
    pub fn new(track: Track, rng_seed: u64) -> Self {
        let (x, y, h) = track.start_pose();
        // light stands beside the start line, left of the lane
        let side = track.lane_width / 2.0 + 0.6;
        let light = TrafficLight {
            position: (
                x + 1.5 * h.cos() - side * h.sin(),
                y + 1.5 * h.sin() + side * h.cos(),
            ),
            state: LightState::Green,
            green_at_s: None,
        };
        Self {
            track,
            obstacles: Vec::new(),
            light,
            rng_seed,
            wall_margin_m: default_wall_margin(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.track.validate()?;
        if let Some(o) = self.obstacles.iter().find(|o| !(o.radius > 0.0)) {
            return Err(Error::Config(format!(
                "obstacle radius must be > 0, got {}",
                o.radius
            )));
        }
        if !(self.wall_margin_m >= 0.0 && self.wall_margin_m <= WALL_MARGIN_MAX) {
            return Err(Error::Config(format!(
                "wall_margin_m must be within [0, {WALL_MARGIN_MAX}]"
            )));
        }
        Ok(())
    }

    /// Apply scheduled light changes for time `t`.
    pub fn advance_light(&mut self, t: f64) {
        if let Some(at) = self.light.green_at_s {
            if t >= at {
                self.light.state = LightState::Green;
            }
        }
    }

    /// Car pose at the start of the track.
    pub fn start_state(&self) -> VehicleState {
        let (x, y, h) = self.track.start_pose();
        VehicleState::at(x, y, h)
    }
}

/// A rendered RGB image, row-major with interleaved channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub t: f64,
}

impl CameraFrame {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            channels: 3,
            pixels,
            t: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::shape("3 channels", self.channels));
        }
        if self.pixels.len() != self.width * self.height * self.channels {
            return Err(Error::shape(
                self.width * self.height * self.channels,
                self.pixels.len(),
            ));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Snap every value to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.pixels {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, bytes.len()));
        }
        Ok(Self {
            width,
            height,
            channels: 3,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            t: 0.0,
        })
    }
}

/// One reading of the four binarized ultrasonics and the IMU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorSnapshot {
    /// front, left, right, back
    pub ultra: [u8; 4],
    pub accel: [f64; 3],
    pub t: f64,
    pub seq: u64,
}

impl SensorSnapshot {
    /// The seven-value metadata vector fed to the throttle model.
    pub fn features(&self) -> [f64; 7] {
        [
            self.ultra[0] as f64,
            self.ultra[1] as f64,
            self.ultra[2] as f64,
            self.ultra[3] as f64,
            self.accel[0],
            self.accel[1],
            self.accel[2],
        ]
    }
}

/// Signed perpendicular distance from the car to the centerline, positive to the left.
pub fn lane_offset(world: &World, state: &VehicleState) -> f64 {
    world.track.project((state.x, state.y)).offset
}

/// True when the car has left its lane.
pub fn departed(world: &World, state: &VehicleState) -> bool {
    lane_offset(world, state).abs() > world.track.lane_width / 2.0
}

/// First obstacle the car's reference point lies inside, if any.
pub fn collision(world: &World, state: &VehicleState) -> Option<usize> {
    world.obstacles.iter().position(|o| {
        let (dx, dy) = (state.x - o.center.0, state.y - o.center.1);
        (dx * dx + dy * dy).sqrt() <= o.radius
    })
}

/// Mix a base seed with a stream discriminator (splitmix64 finalizer).
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn drag_world() -> World {
        World::new(build_track(&TrackSpec::Preset("drag".into())).unwrap(), 1)
    }

    #[test]
    fn lane_offset_examples() {
        let w = drag_world();
        let on = VehicleState::at(10.0, 0.0, 0.0);
        assert_eq!(lane_offset(&w, &on), 0.0);
        let left = VehicleState::at(10.0, 0.2, 0.0);
        assert!((lane_offset(&w, &left) - 0.2).abs() < 1e-12);
        assert!(!departed(&w, &left));
        assert!(departed(&w, &VehicleState::at(10.0, -0.8, 0.0)));
    }

    #[test]
    fn world_json_round_trip() {
        let mut w = drag_world();
        w.obstacles.push(Obstacle {
            center: (5.0, 0.3),
            radius: 0.2,
        });
        let s = serde_json::to_string(&w).unwrap();
        let back: World = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn invalid_obstacle_rejected() {
        let mut w = drag_world();
        w.obstacles.push(Obstacle {
            center: (5.0, 0.3),
            radius: 0.0,
        });
        assert!(w.validate().is_err());
    }

    proptest! {
        #[test]
        fn lane_offset_is_lipschitz_on_straights(x in 1.0f64..39.0, y in -2.0f64..2.0, eps in -0.05f64..0.05) {
            let w = drag_world();
            let a = lane_offset(&w, &VehicleState::at(x, y, 0.0));
            let b = lane_offset(&w, &VehicleState::at(x + eps, y + eps, 0.0));
            prop_assert!((a - b).abs() <= eps.abs() * 2f64.sqrt() + 1e-12);
        }
    }
}
