//! Kinematic RC car: steering law, PWM actuation calibration, battery sag.
//!
//! Steering sign convention: a positive command steers right, so the
//! heading (counter-clockwise positive, radians) decreases when `u > 0`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Physical constants of the car and its actuation calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Distance between front and rear axle, meters.
    pub wheelbase_m: f64,
    /// Ratio between steering-servo turn and wheel turn.
    pub steering_ratio: f64,
    /// Slip coefficient, s²/m².
    pub slip_coeff: f64,
    pub max_steer_deg: f64,
    pub pwm_min: i32,
    pub pwm_max: i32,
    /// Speed reached at `pwm_max`, m/s.
    pub v_max: f64,
    /// First-order speed response time constant, seconds.
    pub speed_tau_s: f64,
    /// Motor current at full commanded speed, amperes.
    pub full_throttle_current_a: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase_m: 0.325,
            steering_ratio: 15.0,
            slip_coeff: 0.002,
            max_steer_deg: 30.0,
            pwm_min: 220,
            pwm_max: 420,
            v_max: 12.0,
            speed_tau_s: 0.6,
            full_throttle_current_a: 20.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.wheelbase_m > 0.0) {
            return Err(Error::Config(format!(
                "wheelbase_m must be > 0, got {}",
                self.wheelbase_m
            )));
        }
        if !(self.steering_ratio > 0.0) {
            return Err(Error::Config(format!(
                "steering_ratio must be > 0, got {}",
                self.steering_ratio
            )));
        }
        if !(self.max_steer_deg > 0.0 && self.max_steer_deg < 90.0) {
            return Err(Error::Config(format!(
                "max_steer_deg must be in (0, 90), got {}",
                self.max_steer_deg
            )));
        }
        if self.pwm_min >= self.pwm_max {
            return Err(Error::Config(format!(
                "pwm_min ({}) must be below pwm_max ({})",
                self.pwm_min, self.pwm_max
            )));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::Config(format!(
                "v_max must be > 0, got {}",
                self.v_max
            )));
        }
        if !(self.speed_tau_s >= 0.0) || !(self.full_throttle_current_a >= 0.0) {
            return Err(Error::Config(
                "speed_tau_s and full_throttle_current_a must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn pwm_span(&self) -> i32 {
        self.pwm_max - self.pwm_min
    }

    /// Clamp an arbitrary integer into the PWM range.
    pub fn clamp_pwm(&self, pwm: i64) -> i32 {
        pwm.clamp(self.pwm_min as i64, self.pwm_max as i64) as i32
    }

    /// Map a normalized throttle in [0, 1] onto the PWM scale.
    pub fn pwm_from_fraction(&self, fraction: f64) -> i32 {
        let f = if fraction.is_finite() {
            fraction.clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.pwm_min + (f * self.pwm_span() as f64).round() as i32
    }

    pub fn pwm_fraction(&self, pwm: i32) -> f64 {
        (pwm - self.pwm_min) as f64 / self.pwm_span() as f64
    }
}

/// Pose and speed of the car.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Radians, normalized to [-π, π).
    pub heading: f64,
    /// Speed, m/s, never negative.
    pub v: f64,
    /// Simulation time, seconds.
    pub t: f64,
}

impl VehicleState {
    pub fn at(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            v: 0.0,
            t: 0.0,
        }
    }
}

/// Normalize an angle to [-π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can return exactly 2π for tiny negative inputs
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chemistry {
    LiPo,
    NiMH,
}

/// Battery pack with a chemistry-specific discharge curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Battery {
    pub chemistry: Chemistry,
    /// Capacity in ampere-seconds.
    pub capacity_as: f64,
    /// Remaining charge in ampere-seconds.
    pub charge_as: f64,
    pub v_nominal: f64,
    /// (state of charge, volts) breakpoints, ascending by state of charge.
    pub curve: Vec<(f64, f64)>,
}

impl Battery {
    /// Full 4 Ah two-cell LiPo.
    pub fn lipo() -> Self {
        Self {
            chemistry: Chemistry::LiPo,
            capacity_as: 4.0 * 3600.0,
            charge_as: 4.0 * 3600.0,
            v_nominal: 7.4,
            curve: vec![(0.0, 6.00), (0.05, 6.80), (0.2, 7.40), (1.0, 8.40)],
        }
    }

    /// Full 1.8 Ah stock NiMH pack.
    pub fn nimh() -> Self {
        Self {
            chemistry: Chemistry::NiMH,
            capacity_as: 1.8 * 3600.0,
            charge_as: 1.8 * 3600.0,
            v_nominal: 7.2,
            curve: vec![
                (0.0, 5.00),
                (0.2, 6.40),
                (0.5, 7.00),
                (0.8, 7.40),
                (1.0, 8.00),
            ],
        }
    }

    pub fn with_chemistry(chemistry: Chemistry) -> Self {
        match chemistry {
            Chemistry::LiPo => Self::lipo(),
            Chemistry::NiMH => Self::nimh(),
        }
    }

    pub fn with_soc(mut self, soc: f64) -> Self {
        self.charge_as = self.capacity_as * soc.clamp(0.0, 1.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_as > 0.0) {
            return Err(Error::Config("battery capacity must be > 0".into()));
        }
        if !(0.0..=self.capacity_as).contains(&self.charge_as) {
            return Err(Error::Config(format!(
                "battery charge {} outside [0, {}]",
                self.charge_as, self.capacity_as
            )));
        }
        if !(self.v_nominal > 0.0) {
            return Err(Error::Config("battery v_nominal must be > 0".into()));
        }
        if self.curve.is_empty() {
            return Err(Error::Config("battery curve is empty".into()));
        }
        if self.curve.iter().any(|&(_, v)| !(v > 0.0)) {
            return Err(Error::Config(
                "battery curve voltages must be positive".into(),
            ));
        }
        if self.curve.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Config(
                "battery curve must be sorted by state of charge".into(),
            ));
        }
        Ok(())
    }

    pub fn soc(&self) -> f64 {
        (self.charge_as / self.capacity_as).clamp(0.0, 1.0)
    }
}

/// Linear PWM → speed map; `pwm_min` is standstill, `pwm_max` is `v_max`.
pub fn pwm_to_velocity(pwm: i32, params: &VehicleParams) -> Result<f64> {
    if pwm < params.pwm_min || pwm > params.pwm_max {
        return Err(Error::range("throttle pwm", pwm));
    }
    Ok((pwm - params.pwm_min) as f64 * params.v_max / params.pwm_span() as f64)
}

/// Round-to-nearest inverse of [`pwm_to_velocity`].
pub fn velocity_to_pwm(v: f64, params: &VehicleParams) -> Result<i32> {
    if !(0.0..=params.v_max).contains(&v) {
        return Err(Error::range("velocity", v));
    }
    let steps = (v * params.pwm_span() as f64 / params.v_max).round() as i32;
    Ok(params.pwm_min + steps)
}

/// Steering angle in degrees for a normalized command `u`:
/// `θ = u · d_w · K_s · (1 + K_slip · v²)`, clamped to the mechanical limit.
pub fn ackerman_steering(u: f64, v: f64, params: &VehicleParams) -> Result<f64> {
    if !(u.abs() <= 1.0) {
        return Err(Error::Argument(format!(
            "steering command {u} outside [-1, 1]"
        )));
    }
    if !(v >= 0.0) {
        return Err(Error::Argument(format!("speed {v} must be >= 0")));
    }
    let theta = u * params.wheelbase_m * params.steering_ratio * (1.0 + params.slip_coeff * v * v);
    Ok(theta.clamp(-params.max_steer_deg, params.max_steer_deg))
}

/// Piecewise-linear read of the discharge curve at the current state of charge.
pub fn battery_voltage(b: &Battery) -> f64 {
    let soc = b.soc();
    let curve = &b.curve;
    if soc <= curve[0].0 {
        return curve[0].1;
    }
    for w in curve.windows(2) {
        let (s0, v0) = w[0];
        let (s1, v1) = w[1];
        if soc <= s1 {
            return v0 + (v1 - v0) * (soc - s0) / (s1 - s0);
        }
    }
    curve[curve.len() - 1].1
}

/// Fraction of the commanded speed the pack can deliver.
pub fn supply_factor(b: &Battery) -> f64 {
    (battery_voltage(b) / b.v_nominal).clamp(0.0, 1.0)
}

/// Advance the car by `dt` seconds. Returns the new state and the drained battery.
pub fn step_vehicle(
    s: &VehicleState,
    throttle_pwm: i32,
    steer_u: f64,
    dt: f64,
    params: &VehicleParams,
    battery: &Battery,
) -> Result<(VehicleState, Battery)> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("dt must be > 0, got {dt}")));
    }
    let commanded = pwm_to_velocity(throttle_pwm, params)? * supply_factor(battery);
    let theta = ackerman_steering(steer_u, s.v, params)?.to_radians();
    let yaw_rate = -(s.v / params.wheelbase_m) * theta.tan();

    let (sin_h, cos_h) = s.heading.sin_cos();
    let lag = if params.speed_tau_s > 0.0 {
        1.0 - (-dt / params.speed_tau_s).exp()
    } else {
        1.0
    };
    let next = VehicleState {
        x: s.x + s.v * cos_h * dt,
        y: s.y + s.v * sin_h * dt,
        heading: wrap_angle(s.heading + yaw_rate * dt),
        v: (s.v + (commanded - s.v) * lag).max(0.0),
        t: s.t + dt,
    };

    let mut drained = battery.clone();
    let current = params.full_throttle_current_a * params.pwm_fraction(throttle_pwm);
    drained.charge_as = (drained.charge_as - current * dt).max(0.0);
    Ok((next, drained))
}

/// PWM a feed-forward speed-hold controller issues to keep `v_target`
/// given the present battery sag.
pub fn speed_hold_pwm(v_target: f64, params: &VehicleParams, battery: &Battery) -> Result<i32> {
    let factor = supply_factor(battery);
    let needed = if factor > 0.0 {
        v_target / factor
    } else {
        params.v_max
    };
    velocity_to_pwm(needed.clamp(0.0, params.v_max), params)
}
