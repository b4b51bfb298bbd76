//! Liveness of the child's browser add-on, driven by explicit timestamps so
//! tests can use a simulated clock.

use chrono::Duration;
use serde::Serialize;

use cfas_core::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Responsive,
    Unresponsive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    WentUnresponsive,
    Recovered,
}

/// Flags the add-on unresponsive once more than `missed` intervals pass
/// without a heartbeat.
#[derive(Debug, Clone)]
pub struct HeartbeatMonitor {
    interval: Duration,
    missed: u32,
    last: Timestamp,
    status: Liveness,
}

impl HeartbeatMonitor {
    /// Monitoring starts at `now` with a full grace period.
    pub fn new(interval: Duration, missed: u32, now: Timestamp) -> Self {
        Self {
            interval,
            missed: missed.max(1),
            last: now,
            status: Liveness::Responsive,
        }
    }

    pub fn status(&self) -> Liveness {
        self.status
    }

    pub fn last_beat(&self) -> Timestamp {
        self.last
    }

    pub fn beat(&mut self, now: Timestamp) -> Option<Transition> {
        if now > self.last {
            self.last = now;
        }
        match self.status {
            Liveness::Unresponsive => {
                self.status = Liveness::Responsive;
                Some(Transition::Recovered)
            }
            Liveness::Responsive => None,
        }
    }

    pub fn check(&mut self, now: Timestamp) -> Option<Transition> {
        let limit = self.interval * self.missed as i32;
        if self.status == Liveness::Responsive && now - self.last > limit {
            self.status = Liveness::Unresponsive;
            return Some(Transition::WentUnresponsive);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn t(s: i64) -> Timestamp {
        Utc.with_ymd_and_hms(2026, 3, 1, 0, 0, 0).unwrap() + Duration::seconds(s)
    }

    fn monitor() -> HeartbeatMonitor {
        HeartbeatMonitor::new(Duration::seconds(10), 3, t(0))
    }

    #[test]
    fn gap_of_35s_flips_to_unresponsive() {
        let mut m = monitor();
        m.beat(t(10));
        assert_eq!(m.check(t(40)), None);
        assert_eq!(m.check(t(45)), Some(Transition::WentUnresponsive));
        assert_eq!(m.status(), Liveness::Unresponsive);
        assert_eq!(m.check(t(50)), None);
    }

    #[test]
    fn continuous_heartbeats_stay_responsive() {
        let mut m = monitor();
        for s in (10..600).step_by(10) {
            assert_eq!(m.beat(t(s)), None);
            assert_eq!(m.check(t(s + 9)), None);
        }
        assert_eq!(m.status(), Liveness::Responsive);
    }

    #[test]
    fn recovery_after_gap() {
        let mut m = monitor();
        assert_eq!(m.check(t(31)), Some(Transition::WentUnresponsive));
        assert_eq!(m.beat(t(60)), Some(Transition::Recovered));
        assert_eq!(m.status(), Liveness::Responsive);
        assert_eq!(m.check(t(80)), None);
    }
}
