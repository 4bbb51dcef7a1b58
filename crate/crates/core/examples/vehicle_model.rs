//! Steering law, PWM calibration and battery sag under a speed-hold controller.
//!
//! `cargo run --release --example vehicle_model`

use etg::vehiclesim::{
    ackerman_steering, battery_voltage, pwm_to_velocity, Battery, VehicleParams,
};
use etg::workflows::speed_hold_discharge;

fn main() -> etg::Result<()> {
    let p = VehicleParams::default();
    println!("steering angle (deg) by command and speed:");
    for v in [0.0, 2.0, 6.0, 12.0] {
        let row: Vec<String> = [-1.0, -0.5, 0.0, 0.5, 1.0]
            .iter()
            .map(|&u| ackerman_steering(u, v, &p).map(|d| format!("{d:+.3}")))
            .collect::<etg::Result<_>>()?;
        println!("  v={v:>4} m/s: {}", row.join(" "));
    }
    for pwm in [220, 270, 320, 420] {
        println!("pwm {pwm} -> {:.2} m/s", pwm_to_velocity(pwm, &p)?);
    }
    for battery in [Battery::lipo(), Battery::nimh()] {
        let chem = format!("{:?}", battery.chemistry);
        let run = speed_hold_discharge(battery.clone(), &p, 4.0, 1.0)?;
        let at = |soc: f64| {
            run.iter()
                .find(|(s, _)| *s <= soc)
                .map(|(_, pwm)| *pwm)
                .unwrap_or(0)
        };
        println!(
            "{chem}: {:.2} V full; speed-hold PWM at 100/50/20/10/2% charge: {} {} {} {} {}",
            battery_voltage(&battery),
            at(1.0),
            at(0.5),
            at(0.2),
            at(0.1),
            at(0.02)
        );
    }
    Ok(())
}
