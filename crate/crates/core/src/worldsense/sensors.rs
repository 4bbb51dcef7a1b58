use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use super::World;
use crate::error::{Error, Result};
use crate::vehiclesim::{wrap_angle, VehicleState};

const GRAVITY: f64 = 9.81;
// boundary distances are compared with this slack so "exactly at threshold" is inclusive
const DIST_EPS: f64 = 1e-9;
const WALL_STEP_M: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Front,
    Left,
    Right,
    Back,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Front, Side::Left, Side::Right, Side::Back];

    fn bearing(self) -> f64 {
        match self {
            Side::Front => 0.0,
            Side::Left => FRAC_PI_2,
            Side::Right => -FRAC_PI_2,
            Side::Back => std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UltrasonicConfig {
    /// Anything at or closer than this reads as 1.
    pub threshold_m: f64,
    pub cone_deg: f64,
    /// Rays cast across the cone.
    pub rays: usize,
    /// IMU noise standard deviation, m/s².
    pub imu_sigma: f64,
}

impl Default for UltrasonicConfig {
    fn default() -> Self {
        Self {
            threshold_m: 0.5,
            cone_deg: 30.0,
            rays: 13,
            imu_sigma: 0.05,
        }
    }
}

fn ray_circle(origin: (f64, f64), dir: (f64, f64), center: (f64, f64), radius: f64) -> Option<f64> {
    let (ox, oy) = (origin.0 - center.0, origin.1 - center.1);
    let c = ox * ox + oy * oy - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = ox * dir.0 + oy * dir.1;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Binarized ultrasonic reading: 1 iff an obstacle or a boundary wall lies
/// within the threshold inside the sensor's cone.
pub fn sample_ultrasonic(
    world: &World,
    state: &VehicleState,
    side: Side,
    cfg: &UltrasonicConfig,
) -> u8 {
    let origin = (state.x, state.y);
    let rays = cfg.rays.max(1);
    let half = cfg.cone_deg.to_radians() / 2.0;
    let wall = world.track.lane_width / 2.0 + world.wall_margin_m;
    let reach = cfg.threshold_m + DIST_EPS;
    for k in 0..rays {
        let frac = if rays == 1 {
            0.5
        } else {
            k as f64 / (rays - 1) as f64
        };
        let a = state.heading + side.bearing() - half + 2.0 * half * frac;
        let dir = (a.cos(), a.sin());
        for o in &world.obstacles {
            if let Some(t) = ray_circle(origin, dir, o.center, o.radius) {
                if t <= reach {
                    return 1;
                }
            }
        }
        let steps = (cfg.threshold_m / WALL_STEP_M).ceil() as usize;
        for i in 0..=steps {
            let t = (i as f64 * WALL_STEP_M).min(cfg.threshold_m);
            let p = (origin.0 + t * dir.0, origin.1 + t * dir.1);
            let beyond = match world.track.project_near(p) {
                Some(proj) => proj.offset.abs() >= wall,
                None => true,
            };
            if beyond {
                return 1;
            }
        }
    }
    0
}

/// Accelerometer reading from two consecutive states: longitudinal Δv/dt,
/// lateral v·yaw-rate (positive to the left), vertical gravity.
pub fn sample_imu<R: Rng + ?Sized>(
    prev: &VehicleState,
    cur: &VehicleState,
    dt: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<[f64; 3]> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("imu dt must be > 0, got {dt}")));
    }
    let yaw_rate = wrap_angle(cur.heading - prev.heading) / dt;
    let mut a = [(cur.v - prev.v) / dt, cur.v * yaw_rate, GRAVITY];
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
        for v in &mut a {
            *v += n.sample(rng);
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsense::{build_track, Obstacle, TrackSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world_with_obstacle_ahead(gap: f64) -> (World, VehicleState) {
        let mut w = World::new(build_track(&TrackSpec::Preset("drag".into())).unwrap(), 0);
        let r = 0.1;
        w.obstacles.push(Obstacle {
            center: (10.0 + gap + r, 0.0),
            radius: r,
        });
        (w, VehicleState::at(10.0, 0.0, 0.0))
    }

    #[test]
    fn threshold_examples() {
        let cfg = UltrasonicConfig::default();
        let (w, s) = world_with_obstacle_ahead(0.3);
        assert_eq!(sample_ultrasonic(&w, &s, Side::Front, &cfg), 1);
        let (w, s) = world_with_obstacle_ahead(0.6);
        assert_eq!(sample_ultrasonic(&w, &s, Side::Front, &cfg), 0);
        let (w, s) = world_with_obstacle_ahead(0.5);
        assert_eq!(sample_ultrasonic(&w, &s, Side::Front, &cfg), 1);
        // the back sensor does not see it
        let (w, s) = world_with_obstacle_ahead(0.3);
        assert_eq!(sample_ultrasonic(&w, &s, Side::Back, &cfg), 0);
    }

    #[test]
    fn walls_trigger_side_sensors_near_the_edge() {
        let cfg = UltrasonicConfig::default();
        let w = World::new(build_track(&TrackSpec::Preset("drag".into())).unwrap(), 0);
        let centered = VehicleState::at(10.0, 0.0, 0.0);
        assert_eq!(sample_ultrasonic(&w, &centered, Side::Left, &cfg), 0);
        // wall sits at 0.75 + 0.5 = 1.25 m left of center
        let near_left = VehicleState::at(10.0, 0.8, 0.0);
        assert_eq!(sample_ultrasonic(&w, &near_left, Side::Left, &cfg), 1);
        assert_eq!(sample_ultrasonic(&w, &near_left, Side::Right, &cfg), 0);
    }

    #[test]
    fn monotone_in_distance() {
        let cfg = UltrasonicConfig::default();
        let mut seen_zero = false;
        for k in 0..60 {
            let (w, s) = world_with_obstacle_ahead(0.02 * k as f64);
            let r = sample_ultrasonic(&w, &s, Side::Front, &cfg);
            if seen_zero {
                assert_eq!(r, 0, "gap {}", 0.02 * k as f64);
            }
            seen_zero |= r == 0;
        }
        assert!(seen_zero);
    }

    #[test]
    fn imu_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = VehicleState {
            v: 3.0,
            ..VehicleState::default()
        };
        assert_eq!(
            sample_imu(&s, &s, 0.1, 0.0, &mut rng).unwrap(),
            [0.0, 0.0, 9.81]
        );

        let a = VehicleState {
            v: 2.0,
            ..VehicleState::default()
        };
        let b = VehicleState {
            v: 3.0,
            ..VehicleState::default()
        };
        assert_eq!(
            sample_imu(&a, &b, 0.5, 0.0, &mut rng).unwrap(),
            [2.0, 0.0, 9.81]
        );

        let p = VehicleState {
            v: 4.0,
            heading: 0.0,
            ..VehicleState::default()
        };
        let c = VehicleState {
            v: 4.0,
            heading: 0.05,
            ..VehicleState::default()
        };
        let imu = sample_imu(&p, &c, 0.1, 0.0, &mut rng).unwrap();
        assert!((imu[1] - 2.0).abs() < 1e-12);

        assert!(sample_imu(&p, &c, 0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn imu_noise_reproducible() {
        let s = VehicleState {
            v: 1.0,
            ..VehicleState::default()
        };
        let a = sample_imu(&s, &s, 0.1, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_imu(&s, &s, 0.1, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[2], 9.81);
    }
}
