//! Latest-value sensor mailbox and the poller that fills it.

use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::vehiclesim::VehicleState;
use crate::worldsense::{
    sample_imu, sample_ultrasonic, SensorSnapshot, Side, UltrasonicConfig, World,
};

/// What a tick sees when it reads the mailbox.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MailboxRead {
    pub snapshot: SensorSnapshot,
    /// Seconds since publication; infinite before the first one.
    pub staleness_s: f64,
    /// Set until the first publication.
    pub empty: bool,
}

/// Single-slot mailbox: writers replace, readers copy, nobody waits.
#[derive(Debug, Clone, Default)]
pub struct SensorMailbox {
    slot: Option<(SensorSnapshot, f64)>,
}

impl SensorMailbox {
    pub fn publish(&mut self, snapshot: SensorSnapshot, at: f64) {
        if let Some((old, _)) = &self.slot {
            debug_assert!(snapshot.seq > old.seq);
        }
        self.slot = Some((snapshot, at));
    }

    pub fn read(&self, now: f64) -> MailboxRead {
        match self.slot {
            Some((snapshot, at)) => MailboxRead {
                snapshot,
                staleness_s: (now - at).max(0.0),
                empty: false,
            },
            None => MailboxRead {
                snapshot: SensorSnapshot::default(),
                staleness_s: f64::INFINITY,
                empty: true,
            },
        }
    }
}

/// Mailbox shared between a poller thread and the loop.
#[derive(Debug, Clone, Default)]
pub struct SharedMailbox(Arc<Mutex<SensorMailbox>>);

impl SharedMailbox {
    pub fn publish(&self, snapshot: SensorSnapshot, at: f64) {
        self.0
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .publish(snapshot, at);
    }

    pub fn read(&self, now: f64) -> MailboxRead {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).read(now)
    }
}

/// Samples ultrasonic bits and the accelerometer at a fixed rate.
#[derive(Debug, Clone)]
pub struct SensorPoller {
    cfg: UltrasonicConfig,
    period_s: f64,
    prev: Option<VehicleState>,
    rng: ChaCha8Rng,
    seq: u64,
}

impl SensorPoller {
    pub fn new(cfg: UltrasonicConfig, hz: f64, seed: u64) -> Self {
        Self {
            cfg,
            period_s: 1.0 / hz,
            prev: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq: 0,
        }
    }

    /// Snapshot of `state` stamped `t`; acceleration is differenced against the previous sample.
    pub fn sample(
        &mut self,
        world: &World,
        state: &VehicleState,
        t: f64,
    ) -> Result<SensorSnapshot> {
        let ultra = Side::ALL.map(|side| sample_ultrasonic(world, state, side, &self.cfg));
        let prev = self.prev.unwrap_or(*state);
        let accel = sample_imu(
            &prev,
            state,
            self.period_s,
            self.cfg.imu_sigma,
            &mut self.rng,
        )?;
        self.prev = Some(*state);
        let snap = SensorSnapshot {
            ultra,
            accel,
            t,
            seq: self.seq,
        };
        self.seq += 1;
        Ok(snap)
    }

    pub fn published(&self) -> u64 {
        self.seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsense::{build_track, TrackSpec};

    #[test]
    fn empty_mailbox_is_zeroed_and_flagged() {
        let r = SensorMailbox::default().read(1.0);
        assert!(r.empty);
        assert_eq!(r.snapshot, SensorSnapshot::default());
        assert!(r.staleness_s.is_infinite());
    }

    #[test]
    fn latest_wins_and_staleness_grows() {
        let mut m = SensorMailbox::default();
        let mut s = SensorSnapshot::default();
        m.publish(s, 0.0);
        s.seq = 1;
        m.publish(s, 0.5);
        let r = m.read(0.75);
        assert_eq!(r.snapshot.seq, 1);
        assert!((r.staleness_s - 0.25).abs() < 1e-12);
    }

    #[test]
    fn poller_seq_increases() {
        let world = World::new(build_track(&TrackSpec::Preset("oval".into())).unwrap(), 2);
        let mut p = SensorPoller::new(UltrasonicConfig::default(), 12.0, 5);
        let st = world.start_state();
        let a = p.sample(&world, &st, 0.0).unwrap();
        let b = p.sample(&world, &st, 1.0 / 12.0).unwrap();
        assert!(b.seq > a.seq);
        assert_eq!(p.published(), 2);
    }
}
