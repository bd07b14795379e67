//! Global logical clock service: a table of countdown timers advanced only by
//! [`TimerTable::tick`]. An absent entry plays the role of "not running".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{Phase, Tick};

/// What a timer guards for one node in one (height, round).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TimerSlot {
    /// Phase timeout τ of the round.
    Phase(Phase),
    /// One extra network delay after the propose timeout for a proposal in flight.
    Grace,
    /// Adversarial sleep σ before the node acts in a phase.
    Sigma(Phase),
    /// Normal execution budget δ of a phase.
    Exec(Phase),
}

impl TimerSlot {
    pub fn label(&self) -> String {
        match self {
            TimerSlot::Phase(p) => format!("timeout:{p}"),
            TimerSlot::Grace => "grace".to_string(),
            TimerSlot::Sigma(p) => format!("sigma:{p}"),
            TimerSlot::Exec(p) => format!("exec:{p}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimerKey {
    pub height: u64,
    pub round: u64,
    pub node: usize,
    pub slot: TimerSlot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeStart {
    Started,
    /// A timer for the key is already running; the request had no effect.
    Ignored,
}

/// Acknowledgement of a reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeOk;

/// Countdown timers keyed by `K`. Expiries come out of [`tick`](Self::tick) in
/// key order, which keeps same-tick expiry handling deterministic.
#[derive(Clone, Debug)]
pub struct TimerTable<K: Ord + Clone = TimerKey> {
    entries: BTreeMap<K, Tick>,
}

impl<K: Ord + Clone> Default for TimerTable<K> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<K: Ord + Clone> TimerTable<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a countdown of `ticks`. It expires on the `ticks`-th following
    /// call to `tick`; a zero countdown expires on the next one.
    pub fn time_start(&mut self, key: K, ticks: Tick) -> TimeStart {
        if self.entries.contains_key(&key) {
            return TimeStart::Ignored;
        }
        self.entries.insert(key, ticks);
        TimeStart::Started
    }

    pub fn get_time(&self, key: &K) -> Option<Tick> {
        self.entries.get(key).copied()
    }

    pub fn reset_time(&mut self, key: &K) -> TimeOk {
        self.entries.remove(key);
        TimeOk
    }

    /// Advances every running timer by one tick and returns those that expired.
    pub fn tick(&mut self) -> Vec<K> {
        let mut expired = Vec::new();
        for (key, remaining) in self.entries.iter_mut() {
            *remaining = remaining.saturating_sub(1);
            if *remaining == 0 {
                expired.push(key.clone());
            }
        }
        for key in &expired {
            self.entries.remove(key);
        }
        expired
    }

    /// Drops every timer matching `pred`.
    pub fn cancel_where(&mut self, mut pred: impl FnMut(&K) -> bool) {
        self.entries.retain(|k, _| !pred(k));
    }

    pub fn running(&self) -> usize {
        self.entries.len()
    }

    /// Smallest remaining countdown among running timers.
    pub fn next_expiry(&self) -> Option<Tick> {
        self.entries.values().copied().min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn start_and_countdown() {
        let mut t: TimerTable<&str> = TimerTable::new();
        assert_eq!(t.time_start("a", 5), TimeStart::Started);
        t.tick();
        t.tick();
        assert_eq!(t.get_time(&"a"), Some(3));
        assert_eq!(t.time_start("a", 9), TimeStart::Ignored);
        assert_eq!(t.get_time(&"a"), Some(3));
    }

    #[test]
    fn expiry_is_sorted_and_clears_entry() {
        let mut t: TimerTable<&str> = TimerTable::new();
        t.time_start("b", 2);
        t.time_start("a", 1);
        assert_eq!(t.tick(), vec!["a"]);
        assert_eq!(t.get_time(&"a"), None);
        assert_eq!(t.get_time(&"b"), Some(1));
        assert_eq!(t.tick(), vec!["b"]);
        assert!(t.tick().is_empty());
    }

    #[test]
    fn reset_cancels_and_allows_restart() {
        let mut t: TimerTable<&str> = TimerTable::new();
        t.time_start("x", 4);
        assert_eq!(t.reset_time(&"x"), TimeOk);
        assert_eq!(t.get_time(&"x"), None);
        t.time_start("x", 2);
        let fired: Vec<_> = (0..6).flat_map(|_| t.tick()).collect();
        assert_eq!(fired, vec!["x"]);
    }

    #[test]
    fn zero_fires_on_next_tick_not_synchronously() {
        let mut t: TimerTable<&str> = TimerTable::new();
        t.time_start("z", 0);
        assert_eq!(t.get_time(&"z"), Some(0));
        assert_eq!(t.tick(), vec!["z"]);
    }

    #[test]
    fn sequential_timers_run_back_to_back() {
        // A sleep of 3 followed by an execution budget of 2 ends after 5 ticks.
        let mut t: TimerTable<&str> = TimerTable::new();
        t.time_start("sigma", 3);
        let mut elapsed = 0;
        loop {
            elapsed += 1;
            let fired = t.tick();
            if fired.contains(&"sigma") {
                t.time_start("delta", 2);
            }
            if fired.contains(&"delta") {
                break;
            }
        }
        assert_eq!(elapsed, 5);
    }

    proptest! {
        #[test]
        fn each_timer_expires_exactly_once_at_its_deadline(
            starts in proptest::collection::vec((0u8..8, 0u64..20, 0u64..30), 1..40)
        ) {
            // (key, start tick, countdown); restarts of a running key are ignored.
            let mut t: TimerTable<u8> = TimerTable::new();
            let mut expected: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
            let mut deadline: BTreeMap<u8, u64> = BTreeMap::new();
            let mut fired: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
            for now in 0..60u64 {
                for &(k, at, d) in &starts {
                    if at == now && t.time_start(k, d) == TimeStart::Started {
                        let due = now + d.max(1);
                        deadline.insert(k, due);
                        expected.entry(k).or_default().push(due);
                    }
                }
                for k in t.tick() {
                    fired.entry(k).or_default().push(now + 1);
                    deadline.remove(&k);
                }
                for (k, due) in &deadline {
                    prop_assert!(t.get_time(k).is_some());
                    prop_assert!(*due > now);
                }
            }
            prop_assert_eq!(fired, expected);
        }
    }
}
