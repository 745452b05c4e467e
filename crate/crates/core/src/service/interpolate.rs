//! Filling missing sensor readings at tick time.

use crate::corridor::{Corridor, Measurement};

pub const FREE_FLOW_SPEED: f64 = 70.0;
pub const FREE_FLOW_OCCUPANCY: f64 = 0.0;

/// A reading usable at tick time: speed (mph) and occupancy.
pub type Reading = (f64, f64);

/// Last valid reading per sensor, with the tick it arrived in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interpolator {
    last: Vec<Option<(Reading, u64)>>,
    /// Maximum age in ticks for holding the last valid reading.
    pub max_hold_ticks: u64,
}

impl Interpolator {
    pub fn new(sensors: usize, max_hold_ticks: u64) -> Self {
        Interpolator {
            last: vec![None; sensors],
            max_hold_ticks,
        }
    }

    /// Builds a complete measurement set for tick number `tick`.
    ///
    /// `fresh[s]` is the reading sensor `s` delivered for this tick, if any.
    /// Missing sensors take, in order: their last valid reading if at most
    /// `max_hold_ticks` old; the mean of the nearest fresh sensors on each
    /// side; free-flow defaults.
    pub fn fill(
        &mut self,
        corridor: &Corridor,
        fresh: &[Option<Reading>],
        tick: u64,
        timestamp: i64,
    ) -> Vec<Measurement> {
        debug_assert_eq!(fresh.len(), corridor.sensors().len());
        if self.last.len() != fresh.len() {
            self.last = vec![None; fresh.len()];
        }
        for (slot, r) in self.last.iter_mut().zip(fresh) {
            if let Some(r) = r {
                *slot = Some((*r, tick));
            }
        }
        let mut out = Vec::with_capacity(fresh.len());
        for (s, sensor) in corridor.sensors().iter().enumerate() {
            let (reading, interpolated) = match fresh[s] {
                Some(r) => (r, false),
                None => (self.fallback(fresh, s, tick), true),
            };
            let mut m = Measurement::new(sensor.id.clone(), timestamp, reading.0, reading.1);
            m.interpolated = interpolated;
            out.push(m);
        }
        out
    }

    fn fallback(&self, fresh: &[Option<Reading>], s: usize, tick: u64) -> Reading {
        if let Some((r, at)) = self.last[s] {
            if tick - at <= self.max_hold_ticks {
                return r;
            }
        }
        let downstream = fresh[..s].iter().rev().find_map(|r| *r);
        let upstream = fresh[s + 1..].iter().find_map(|r| *r);
        match (downstream, upstream) {
            (Some(a), Some(b)) => ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => (FREE_FLOW_SPEED, FREE_FLOW_OCCUPANCY),
        }
    }
}
