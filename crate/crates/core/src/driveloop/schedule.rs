//! Deterministic interleaving of the main loop and the sensor poller in simulated time.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    /// Sensor publication `index` at time `t`.
    Sensor { index: u64, t: f64 },
    /// Main-loop tick `index` at time `t`.
    Tick { index: u64, t: f64 },
}

impl Event {
    pub fn t(&self) -> f64 {
        match self {
            Event::Sensor { t, .. } | Event::Tick { t, .. } => *t,
        }
    }
}

/// Yields ticks `k / loop_hz` for `k < ticks` and every sensor time
/// `j / sensor_hz` up to the last tick, merged by time with sensors first on ties.
#[derive(Debug, Clone)]
pub struct Schedule {
    loop_hz: f64,
    sensor_hz: f64,
    ticks: u64,
    next_tick: u64,
    next_sensor: u64,
}

impl Schedule {
    pub fn new(loop_hz: f64, sensor_hz: f64, ticks: u64) -> Result<Self> {
        if !(loop_hz > 0.0 && sensor_hz > 0.0 && loop_hz.is_finite() && sensor_hz.is_finite()) {
            return Err(Error::Config(format!(
                "rates must be positive, got {loop_hz} and {sensor_hz}"
            )));
        }
        Ok(Self {
            loop_hz,
            sensor_hz,
            ticks,
            next_tick: 0,
            next_sensor: 0,
        })
    }
}

impl Iterator for Schedule {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        if self.next_tick >= self.ticks {
            return None;
        }
        // j/s <= k/l  ⇔  j·l <= k·s, exact for integer rates
        let sensor_first =
            self.next_sensor as f64 * self.loop_hz <= self.next_tick as f64 * self.sensor_hz;
        if sensor_first {
            let index = self.next_sensor;
            self.next_sensor += 1;
            Some(Event::Sensor {
                index,
                t: index as f64 / self.sensor_hz,
            })
        } else {
            let index = self.next_tick;
            self.next_tick += 1;
            Some(Event::Tick {
                index,
                t: index as f64 / self.loop_hz,
            })
        }
    }
}
