use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, CameraFrame, LightState, LineColor, World};
use crate::error::{Error, Result};
use crate::vehiclesim::VehicleState;

pub(crate) const SKY: [f64; 3] = [0.55, 0.70, 0.90];
pub(crate) const ROAD: [f64; 3] = [0.35, 0.35, 0.37];
pub(crate) const GRASS: [f64; 3] = [0.30, 0.42, 0.25];
pub(crate) const WHITE: [f64; 3] = [0.95, 0.95, 0.95];
pub(crate) const YELLOW: [f64; 3] = [0.95, 0.80, 0.15];
pub(crate) const OBSTACLE: [f64; 3] = [0.85, 0.45, 0.10];
pub(crate) const LIGHT_RED: [f64; 3] = [0.90, 0.10, 0.10];
pub(crate) const LIGHT_GREEN: [f64; 3] = [0.10, 0.85, 0.20];
const LIGHT_RADIUS_M: f64 = 0.3;

/// Forward pinhole camera mounted above the rear axle, tilted down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub cam_height_m: f64,
    /// Downward tilt of the optical axis, degrees.
    pub pitch_deg: f64,
    /// Ground beyond this distance renders as plain grass.
    pub max_range_m: f64,
    /// Per-channel Gaussian noise added to every pixel.
    pub noise_sigma: f64,
    /// Sub-samples per pixel side (anti-aliasing).
    pub supersample: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 100.0,
            cam_height_m: 0.25,
            pitch_deg: 20.0,
            max_range_m: 25.0,
            noise_sigma: 0.02,
            supersample: 2,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!(
                "camera must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.cam_height_m > 0.0) {
            return Err(Error::Config(
                "camera fov must be in (0, 180) and height > 0".into(),
            ));
        }
        if self.supersample == 0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "supersample must be >= 1 and noise_sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Sky,
    Grass,
    Road,
    Line(LineColor),
    Obstacle,
    Light(LightState),
}

impl Surface {
    fn color(self) -> [f64; 3] {
        match self {
            Surface::Sky => SKY,
            Surface::Grass => GRASS,
            Surface::Road => ROAD,
            Surface::Line(LineColor::White) => WHITE,
            Surface::Line(LineColor::Yellow) => YELLOW,
            Surface::Obstacle => OBSTACLE,
            Surface::Light(LightState::Red) => LIGHT_RED,
            Surface::Light(LightState::Green) => LIGHT_GREEN,
        }
    }
}

struct Projector {
    focal: f64,
    half_w: f64,
    half_h: f64,
    sin_p: f64,
    cos_p: f64,
    cam_h: f64,
    max_range: f64,
    x: f64,
    y: f64,
    sin_h: f64,
    cos_h: f64,
}

impl Projector {
    fn new(cfg: &CameraConfig, state: &VehicleState) -> Self {
        let (sin_p, cos_p) = cfg.pitch_deg.to_radians().sin_cos();
        let (sin_h, cos_h) = state.heading.sin_cos();
        Self {
            focal: (cfg.width as f64 / 2.0) / (cfg.fov_deg.to_radians() / 2.0).tan(),
            half_w: cfg.width as f64 / 2.0,
            half_h: cfg.height as f64 / 2.0,
            sin_p,
            cos_p,
            cam_h: cfg.cam_height_m,
            max_range: cfg.max_range_m,
            x: state.x,
            y: state.y,
            sin_h,
            cos_h,
        }
    }

    /// World ground point seen at image coordinates (column, row), both
    /// measured in pixels from the top-left corner. `Err(())` is sky, `Ok(None)`
    /// ground beyond range.
    fn ground(&self, u: f64, v: f64) -> std::result::Result<Option<(f64, f64)>, ()> {
        let xc = (u - self.half_w) / self.focal;
        let yc = (v - self.half_h) / self.focal;
        let down = self.sin_p + yc * self.cos_p;
        if down <= 0.0 {
            return Err(());
        }
        let t = self.cam_h / down;
        let fwd = t * (self.cos_p - yc * self.sin_p);
        let left = -t * xc;
        if fwd.hypot(left) > self.max_range {
            return Ok(None);
        }
        Ok(Some((
            self.x + fwd * self.cos_h - left * self.sin_h,
            self.y + fwd * self.sin_h + left * self.cos_h,
        )))
    }
}

fn classify(world: &World, p: (f64, f64)) -> Surface {
    for o in &world.obstacles {
        if (p.0 - o.center.0).hypot(p.1 - o.center.1) <= o.radius {
            return Surface::Obstacle;
        }
    }
    let l = &world.light;
    if (p.0 - l.position.0).hypot(p.1 - l.position.1) <= LIGHT_RADIUS_M {
        return Surface::Light(l.state);
    }
    let track = &world.track;
    match track.project_near(p) {
        None => Surface::Grass,
        Some(proj) => {
            let d = proj.offset.abs();
            let edge = track.lane_width / 2.0;
            let half_line = track.line_width / 2.0;
            if d < edge - half_line {
                Surface::Road
            } else if d <= edge + half_line {
                Surface::Line(if proj.offset > 0.0 {
                    track.left_line
                } else {
                    track.right_line
                })
            } else {
                Surface::Grass
            }
        }
    }
}

fn surface_at(world: &World, proj: &Projector, u: f64, v: f64) -> Surface {
    match proj.ground(u, v) {
        Err(()) => Surface::Sky,
        Ok(None) => Surface::Grass,
        Ok(Some(p)) => classify(world, p),
    }
}

/// Render the forward camera by intersecting each pixel ray with the ground plane.
pub fn render_camera(world: &World, state: &VehicleState, cfg: &CameraConfig) -> CameraFrame {
    let proj = Projector::new(cfg, state);
    let ss = cfg.supersample.max(1);
    let inv = 1.0 / (ss * ss) as f64;
    let mut frame = CameraFrame::filled(cfg.width, cfg.height, [0.0; 3]);
    frame.t = state.t;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(world.rng_seed, state.t.to_bits()));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = col as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = row as f64 + (sy as f64 + 0.5) / ss as f64;
                    let c = surface_at(world, &proj, u, v).color();
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                }
            }
            let mut rgb = [acc[0] * inv, acc[1] * inv, acc[2] * inv];
            if cfg.noise_sigma > 0.0 {
                for c in &mut rgb {
                    *c += noise.sample(&mut rng);
                }
            }
            for c in &mut rgb {
                *c = c.clamp(0.0, 1.0);
            }
            frame.set_pixel(row, col, rgb);
        }
    }
    frame.quantize();
    frame
}

/// Ground-truth lane-line mask (row-major, one flag per pixel center).
pub fn render_line_mask(world: &World, state: &VehicleState, cfg: &CameraConfig) -> Vec<bool> {
    let proj = Projector::new(cfg, state);
    let mut mask = Vec::with_capacity(cfg.width * cfg.height);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let s = surface_at(world, &proj, col as f64 + 0.5, row as f64 + 0.5);
            mask.push(matches!(s, Surface::Line(_)));
        }
    }
    mask
}

/// Ground-truth lane-interior pixels: road surface between the lines.
pub fn render_road_mask(world: &World, state: &VehicleState, cfg: &CameraConfig) -> Vec<bool> {
    let proj = Projector::new(cfg, state);
    let mut mask = Vec::with_capacity(cfg.width * cfg.height);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let s = surface_at(world, &proj, col as f64 + 0.5, row as f64 + 0.5);
            mask.push(matches!(s, Surface::Road));
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsense::{build_track, Track, TrackSpec};

    fn straight_world(line_width: f64) -> World {
        let mut track: Track = build_track(&TrackSpec::Preset("drag".into())).unwrap();
        track.line_width = line_width;
        let mut w = World::new(track, 3);
        w.light.position = (-50.0, -50.0);
        w
    }

    fn color_close(a: [f64; 3], b: [f64; 3]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 0.003)
    }

    #[test]
    fn road_and_line_masks_are_disjoint() {
        let world = World::new(build_track(&TrackSpec::Preset("oval".into())).unwrap(), 1);
        let cfg = CameraConfig::default();
        let state = VehicleState::at(
            world.track.centerline[0].0,
            world.track.centerline[0].1,
            0.0,
        );
        let road = render_road_mask(&world, &state, &cfg);
        let line = render_line_mask(&world, &state, &cfg);
        assert!(road.iter().any(|&r| r) && line.iter().any(|&l| l));
        assert!(road.iter().zip(&line).all(|(&r, &l)| !(r && l)));
    }

    #[test]
    fn empty_world_has_only_ground_and_sky() {
        // a single short segment far away: no lines reach the camera
        let track = Track::new(vec![(500.0, 500.0), (501.0, 500.0)], 1.5, false).unwrap();
        let mut world = World::new(track, 0);
        world.light.position = (900.0, 900.0);
        let cfg = CameraConfig {
            noise_sigma: 0.0,
            ..CameraConfig::default()
        };
        let f = render_camera(&world, &VehicleState::default(), &cfg);
        for row in 0..f.height {
            for col in 0..f.width {
                let p = f.pixel(row, col);
                assert!(
                    color_close(p, SKY) || color_close(p, GRASS),
                    "{row},{col}: {p:?}"
                );
            }
        }
    }

    /// Independent rasterization: build the camera basis explicitly and
    /// solve for the ground intersection of each 8x8 pixel center.
    fn oracle_8x8(cfg: &CameraConfig, lane: f64, line_w: f64) -> Vec<Vec<char>> {
        let pitch = cfg.pitch_deg.to_radians();
        let f = 4.0 / (cfg.fov_deg.to_radians() / 2.0).tan();
        // forward, right, down camera axes in vehicle coordinates (x fwd, y left, z up)
        let fwd = [pitch.cos(), 0.0, -pitch.sin()];
        let right = [0.0, -1.0, 0.0];
        let down = [-pitch.sin(), 0.0, -pitch.cos()];
        let mut out = vec![vec!['.'; 8]; 8];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                let a = (c as f64 + 0.5 - 4.0) / f;
                let b = (r as f64 + 0.5 - 4.0) / f;
                let d: Vec<f64> = (0..3)
                    .map(|k| fwd[k] + a * right[k] + b * down[k])
                    .collect();
                if d[2] >= 0.0 {
                    *cell = 's';
                    continue;
                }
                let t = cfg.cam_height_m / -d[2];
                let lateral = t * d[1];
                let edge = lane / 2.0;
                *cell = if lateral.abs() < edge - line_w / 2.0 {
                    'r'
                } else if lateral.abs() <= edge + line_w / 2.0 {
                    if lateral > 0.0 {
                        'L'
                    } else {
                        'R'
                    }
                } else {
                    'g'
                };
            }
        }
        out
    }

    #[test]
    fn centered_straight_matches_oracle() {
        let cfg = CameraConfig {
            width: 8,
            height: 8,
            fov_deg: 120.0,
            cam_height_m: 0.8,
            pitch_deg: 10.0,
            noise_sigma: 0.0,
            supersample: 1,
            ..CameraConfig::default()
        };
        let world = straight_world(0.4);
        let state = VehicleState::at(5.0, 0.0, 0.0);
        let frame = render_camera(&world, &state, &cfg);
        let oracle = oracle_8x8(&cfg, 1.5, 0.4);
        let mut lines = 0;
        for r in 0..8 {
            for c in 0..8 {
                let expected = match oracle[r][c] {
                    's' => SKY,
                    'r' => ROAD,
                    'L' => YELLOW,
                    'R' => WHITE,
                    _ => GRASS,
                };
                assert!(color_close(frame.pixel(r, c), expected), "pixel {r},{c}");
                if r >= 8 * 2 / 3 {
                    match oracle[r][c] {
                        'L' => {
                            assert!(c < 4);
                            lines += 1;
                        }
                        'R' => {
                            assert!(c >= 4);
                            lines += 1;
                        }
                        _ => {}
                    }
                }
            }
        }
        assert!(
            lines >= 2,
            "oracle should place both lines in the bottom third"
        );
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let world = straight_world(0.1);
        let cfg = CameraConfig::default();
        let s = VehicleState {
            t: 1.25,
            ..VehicleState::at(3.0, 0.3, 0.2)
        };
        let a = render_camera(&world, &s, &cfg);
        let b = render_camera(&world, &s, &cfg);
        assert_eq!(a, b);
        a.validate().unwrap();
        // off-track pose looking backwards
        let off = render_camera(&world, &VehicleState::at(-20.0, 15.0, 2.5), &cfg);
        off.validate().unwrap();
    }

    #[test]
    fn line_mask_hits_lines_only_below_horizon() {
        let world = straight_world(0.1);
        let cfg = CameraConfig::default();
        let mask = render_line_mask(&world, &VehicleState::at(5.0, 0.0, 0.0), &cfg);
        assert!(mask.iter().any(|&m| m));
        // top row is sky
        assert!(!mask[..cfg.width].iter().any(|&m| m));
    }
}
