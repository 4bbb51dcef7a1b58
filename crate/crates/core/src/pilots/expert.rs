use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehiclesim::{velocity_to_pwm, VehicleParams, VehicleState};
use crate::worldsense::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Pure-pursuit lookahead along the centerline, meters.
    pub lookahead_m: f64,
    /// Target speed on straights, m/s.
    pub cruise_mps: f64,
    pub min_speed_mps: f64,
    /// Speed divisor slope: `v = cruise / (1 + gain·|κ|)`.
    pub curvature_gain: f64,
    /// Window over which track curvature is estimated ahead of the car, meters.
    pub curvature_span_m: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            lookahead_m: 1.5,
            cruise_mps: 3.0,
            min_speed_mps: 1.5,
            curvature_gain: 4.0,
            curvature_span_m: 3.0,
        }
    }
}

/// Normalized command that produces wheel angle `delta_deg` at speed `v`
/// (the inverse of the steering law, clamped to [-1, 1]).
pub fn steer_for_angle(delta_deg: f64, v: f64, params: &VehicleParams) -> f64 {
    let gain = params.wheelbase_m * params.steering_ratio * (1.0 + params.slip_coeff * v * v);
    (delta_deg / gain).clamp(-1.0, 1.0)
}

/// Pure-pursuit steering toward the centerline point `lookahead_m` ahead, and a
/// curvature-limited speed converted to PWM.
pub fn expert_driver(
    world: &World,
    state: &VehicleState,
    cfg: &ExpertConfig,
    params: &VehicleParams,
) -> Result<(f64, i32)> {
    let track = &world.track;
    if track.centerline.len() < 2 {
        return Err(Error::Config(
            "expert needs a centerline with at least two points".into(),
        ));
    }
    let proj = track.project((state.x, state.y));
    let (target, _) = track.point_at(proj.s + cfg.lookahead_m);
    let (dx, dy) = (target.0 - state.x, target.1 - state.y);
    let (sin_h, cos_h) = state.heading.sin_cos();
    let fwd = dx * cos_h + dy * sin_h;
    let left = -dx * sin_h + dy * cos_h;
    let dist2 = fwd * fwd + left * left;
    let curvature = if dist2 > 0.0 { 2.0 * left / dist2 } else { 0.0 };
    // left turns need a negative wheel angle
    let delta_deg = -(curvature * params.wheelbase_m).atan().to_degrees();
    let steer_u = steer_for_angle(delta_deg, state.v, params);

    let kappa = track
        .curvature_at(proj.s + cfg.curvature_span_m / 2.0, cfg.curvature_span_m)
        .abs();
    let v = (cfg.cruise_mps / (1.0 + cfg.curvature_gain * kappa))
        .max(cfg.min_speed_mps)
        .min(params.v_max);
    Ok((steer_u, velocity_to_pwm(v, params)?))
}

/// Ornstein-Uhlenbeck steering perturbation for exploratory demonstrations.
#[derive(Debug, Clone)]
pub struct SteerNoise {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    theta: f64,
    state: f64,
}

impl SteerNoise {
    /// `sigma`: stationary standard deviation; `theta`: mean reversion per step.
    pub fn new(seed: u64, sigma: f64, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) || theta == 0.0 {
            return Err(Error::Config(format!(
                "noise reversion {theta} outside (0, 1]"
            )));
        }
        let step_sigma = sigma * (theta * (2.0 - theta)).sqrt();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, step_sigma).map_err(|e| Error::Config(e.to_string()))?,
            theta,
            state: 0.0,
        })
    }

    /// Next perturbed command, clamped to [-1, 1].
    pub fn perturb(&mut self, u: f64) -> f64 {
        self.state = (1.0 - self.theta) * self.state + self.normal.sample(&mut self.rng);
        (u + self.state).clamp(-1.0, 1.0)
    }
}
