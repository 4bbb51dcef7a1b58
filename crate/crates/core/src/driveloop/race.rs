//! Wait-for-green start, lap counting and finish for circuit and drag races.

use serde::{Deserialize, Serialize};

use crate::vehiclesim::VehicleState;
use crate::worldsense::{LightState, Track};

/// Distance before the end of a drag strip where the finish line sits.
pub const DRAG_RUNOUT_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RaceMode {
    None,
    Circuit { laps: u32 },
    Drag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RacePhase {
    WaitingForGreen,
    Racing,
    Finished,
}

impl RacePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            RacePhase::WaitingForGreen => "waiting_for_green",
            RacePhase::Racing => "racing",
            RacePhase::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaceConfig {
    pub mode: RaceMode,
    /// Consecutive green classifications needed to start.
    pub green_debounce: u32,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            mode: RaceMode::None,
            green_debounce: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceState {
    pub phase: RacePhase,
    pub laps_done: u32,
    pub start_t: Option<f64>,
    pub finish_t: Option<f64>,
    pub lap_times: Vec<f64>,
    green_streak: u32,
}

impl RaceState {
    pub fn new(cfg: &RaceConfig) -> Self {
        Self {
            phase: if cfg.mode == RaceMode::None {
                RacePhase::Racing
            } else {
                RacePhase::WaitingForGreen
            },
            laps_done: 0,
            start_t: None,
            finish_t: None,
            lap_times: Vec::new(),
            green_streak: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThrottleGate {
    Free,
    /// Command PWM 220 regardless of the pilot.
    Stop,
}

/// Advance the race by one tick given this tick's light label and whether the
/// car crossed the start/finish line since the previous tick.
pub fn race_supervisor(
    rs: &RaceState,
    light: LightState,
    crossing: bool,
    t: f64,
    cfg: &RaceConfig,
) -> (RaceState, ThrottleGate) {
    let mut next = rs.clone();
    match rs.phase {
        RacePhase::WaitingForGreen => {
            next.green_streak = if light == LightState::Green {
                rs.green_streak + 1
            } else {
                0
            };
            if next.green_streak >= cfg.green_debounce.max(1) {
                next.phase = RacePhase::Racing;
                next.start_t = Some(t);
                return (next, ThrottleGate::Free);
            }
            (next, ThrottleGate::Stop)
        }
        RacePhase::Racing => {
            if crossing {
                match cfg.mode {
                    RaceMode::None => {
                        next.laps_done += 1;
                        next.lap_times.push(t);
                    }
                    RaceMode::Circuit { laps } => {
                        next.laps_done += 1;
                        next.lap_times.push(t);
                        if next.laps_done >= laps {
                            next.phase = RacePhase::Finished;
                            next.finish_t = Some(t);
                            return (next, ThrottleGate::Stop);
                        }
                    }
                    RaceMode::Drag => {
                        next.phase = RacePhase::Finished;
                        next.finish_t = Some(t);
                        return (next, ThrottleGate::Stop);
                    }
                }
            }
            (next, ThrottleGate::Free)
        }
        RacePhase::Finished => (next, ThrottleGate::Stop),
    }
}

/// Detects forward crossings of the start/finish line: every full loop of a
/// closed track, or the finish line of an open strip.
#[derive(Debug, Clone)]
pub struct LapTracker {
    length: f64,
    is_loop: bool,
    prev_s: f64,
    progress: f64,
    next_mark: f64,
}

impl LapTracker {
    pub fn new(track: &Track, start: &VehicleState) -> Self {
        let length = track.length();
        let s0 = track.project((start.x, start.y)).s;
        Self {
            length,
            is_loop: track.is_loop,
            prev_s: s0,
            progress: if track.is_loop { 0.0 } else { s0 },
            next_mark: if track.is_loop {
                length
            } else {
                length - DRAG_RUNOUT_M
            },
        }
    }

    /// Signed distance travelled along the track since the start.
    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn update(&mut self, track: &Track, state: &VehicleState) -> bool {
        let s = track.project((state.x, state.y)).s;
        let mut ds = s - self.prev_s;
        if self.is_loop {
            ds -= self.length * (ds / self.length).round();
        }
        self.prev_s = s;
        self.progress += ds;
        if self.progress >= self.next_mark {
            self.next_mark = if self.is_loop {
                self.next_mark + self.length
            } else {
                f64::INFINITY
            };
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsense::{build_track, TrackSpec};

    fn circuit(laps: u32) -> RaceConfig {
        RaceConfig {
            mode: RaceMode::Circuit { laps },
            green_debounce: 3,
        }
    }

    #[test]
    fn red_holds_and_three_greens_start() {
        let cfg = circuit(3);
        let mut rs = RaceState::new(&cfg);
        for _ in 0..10 {
            let (n, gate) = race_supervisor(&rs, LightState::Red, false, 0.0, &cfg);
            assert_eq!(gate, ThrottleGate::Stop);
            rs = n;
        }
        let (rs, g1) = race_supervisor(&rs, LightState::Green, false, 1.0, &cfg);
        let (rs, g2) = race_supervisor(&rs, LightState::Green, false, 1.04, &cfg);
        assert_eq!((g1, g2), (ThrottleGate::Stop, ThrottleGate::Stop));
        let (rs, g3) = race_supervisor(&rs, LightState::Green, false, 1.08, &cfg);
        assert_eq!(g3, ThrottleGate::Free);
        assert_eq!(rs.phase, RacePhase::Racing);
        assert_eq!(rs.start_t, Some(1.08));
    }

    #[test]
    fn flicker_resets_debounce() {
        let cfg = circuit(1);
        let rs = RaceState::new(&cfg);
        let (rs, _) = race_supervisor(&rs, LightState::Green, false, 0.0, &cfg);
        let (rs, _) = race_supervisor(&rs, LightState::Green, false, 0.0, &cfg);
        let (rs, _) = race_supervisor(&rs, LightState::Red, false, 0.0, &cfg);
        let (rs, g) = race_supervisor(&rs, LightState::Green, false, 0.0, &cfg);
        assert_eq!(
            (rs.phase, g),
            (RacePhase::WaitingForGreen, ThrottleGate::Stop)
        );
    }

    #[test]
    fn third_crossing_finishes_circuit() {
        let cfg = circuit(3);
        let mut rs = RaceState::new(&cfg);
        for _ in 0..3 {
            rs = race_supervisor(&rs, LightState::Green, false, 0.0, &cfg).0;
        }
        for (i, t) in [10.0, 20.0, 30.0].into_iter().enumerate() {
            let (n, gate) = race_supervisor(&rs, LightState::Green, true, t, &cfg);
            rs = n;
            assert_eq!(gate == ThrottleGate::Stop, i == 2);
        }
        assert_eq!(rs.phase, RacePhase::Finished);
        assert_eq!(rs.finish_t, Some(30.0));
        assert_eq!(rs.laps_done, 3);
        let (after, gate) = race_supervisor(&rs, LightState::Green, true, 31.0, &cfg);
        assert_eq!((after.laps_done, gate), (3, ThrottleGate::Stop));
    }

    #[test]
    fn lap_tracker_counts_one_loop() {
        let track = build_track(&TrackSpec::Preset("oval".into())).unwrap();
        let start = {
            let (x, y, h) = track.start_pose();
            VehicleState::at(x, y, h)
        };
        let mut lt = LapTracker::new(&track, &start);
        let mut crossings = 0;
        let n = 400;
        for k in 1..=n + 5 {
            let (p, _) = track.point_at(track.length() * k as f64 / n as f64);
            if lt.update(&track, &VehicleState::at(p.0, p.1, 0.0)) {
                crossings += 1;
            }
        }
        assert_eq!(crossings, 1);
    }

    #[test]
    fn drag_finish_line() {
        let track = build_track(&TrackSpec::Preset("drag".into())).unwrap();
        let mut lt = LapTracker::new(&track, &VehicleState::at(0.0, 0.0, 0.0));
        assert!(!lt.update(&track, &VehicleState::at(30.0, 0.0, 0.0)));
        assert!(lt.update(&track, &VehicleState::at(36.0, 0.0, 0.0)));
        assert!(!lt.update(&track, &VehicleState::at(38.0, 0.0, 0.0)));
    }
}
