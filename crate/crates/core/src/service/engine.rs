//! The decision loop core: buffers readings, decides when ticks fall due,
//! interpolates and runs the guard pipeline. Shared by the live service,
//! offline replay and the closed-loop runner so all three agree exactly.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::interpolate::{Interpolator, Reading};
use super::log::{DecisionRecord, RejectionRecord};
use super::messages::{Health, Message};
use crate::corridor::{Corridor, Measurement, SpeedLimit};
use crate::error::{Error, Result};
use crate::guards::{pipeline_step, GuardConfig, PipelineState};
use crate::marl::Policy;

/// A sensor reading as received; `None` fields mark missing data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: String,
    pub timestamp: i64,
    pub speed: Option<f64>,
    pub occupancy: Option<f64>,
}

impl SensorReading {
    fn usable(&self) -> Option<Reading> {
        match (self.speed, self.occupancy) {
            (Some(s), Some(o)) if s.is_finite() && o.is_finite() => Some((s, o)),
            _ => None,
        }
    }

    pub fn to_message(&self) -> Message {
        Message::SensorUpdate {
            sensor_id: self.sensor_id.clone(),
            timestamp: self.timestamp,
            speed: self.speed,
            occupancy: self.occupancy,
        }
    }
}

impl From<&Measurement> for SensorReading {
    fn from(m: &Measurement) -> Self {
        SensorReading {
            sensor_id: m.sensor_id.clone(),
            timestamp: m.timestamp,
            speed: m.valid.then_some(m.speed),
            occupancy: m.valid.then_some(m.occupancy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub tick_seconds: u32,
    pub guards: GuardConfig,
    /// Fill missing readings; when off, missing sensors trigger the
    /// gantry fail-safe instead.
    pub interpolate: bool,
    pub max_hold_ticks: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tick_seconds: 30,
            guards: GuardConfig::default(),
            interpolate: true,
            max_hold_ticks: 3,
        }
    }
}

/// Event-time tick schedule: ticks at multiples of the period; the tick at
/// `T` covers readings with timestamps up to and including `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventClock {
    period: i64,
    next: Option<i64>,
}

impl EventClock {
    pub fn new(period: u32) -> Self {
        EventClock {
            period: i64::from(period.max(1)),
            next: None,
        }
    }

    pub fn next_tick(&self) -> Option<i64> {
        self.next
    }

    /// Ticks that fall due once a reading stamped `ts` arrives, in order;
    /// the schedule moves past them. The first reading only schedules.
    pub fn due(&mut self, ts: i64) -> Vec<i64> {
        let period = self.period;
        // First tick: the smallest multiple of the period at or after `ts`.
        let next = *self.next.get_or_insert_with(|| -(-ts).div_euclid(period) * period);
        let mut out = Vec::new();
        let mut t = next;
        while ts > t {
            out.push(t);
            t += self.period;
        }
        self.next = Some(t);
        out
    }

    /// Whether a reading stamped `ts` belongs to a tick that already ran.
    pub fn is_late(&self, ts: i64) -> bool {
        self.next.is_some_and(|n| ts <= n - self.period)
    }

    /// Marks the scheduled tick as run and returns its time.
    pub fn advance(&mut self) -> Option<i64> {
        let t = self.next?;
        self.next = Some(t + self.period);
        Some(t)
    }
}

/// Output of one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub timestamp: i64,
    pub records: Vec<DecisionRecord>,
}

impl TickOutput {
    pub fn commands(&self) -> Vec<Message> {
        self.records
            .iter()
            .map(|r| Message::SpeedLimitCommand {
                gantry_id: r.gantry_id.clone(),
                timestamp: r.tick_timestamp,
                limit: r.final_limit,
                attribution: r.attribution,
            })
            .collect()
    }

    pub fn finals(&self) -> Vec<SpeedLimit> {
        self.records.iter().map(|r| r.final_limit).collect()
    }
}

pub struct Engine {
    corridor: Corridor,
    policy: Arc<dyn Policy>,
    config: EngineConfig,
    clock: EventClock,
    state: PipelineState,
    before_last_tick: Vec<Option<SpeedLimit>>,
    interpolator: Interpolator,
    window: Vec<Option<Reading>>,
    pending: bool,
    health: Health,
}

impl Engine {
    pub fn new(corridor: Corridor, policy: Arc<dyn Policy>, config: EngineConfig) -> Result<Self> {
        config.guards.validate()?;
        if config.tick_seconds == 0 {
            return Err(Error::Config("tick_seconds must be positive".into()));
        }
        let n = corridor.len();
        let sensors = corridor.sensors().len();
        Ok(Engine {
            clock: EventClock::new(config.tick_seconds),
            state: PipelineState::new(n),
            before_last_tick: vec![None; n],
            interpolator: Interpolator::new(sensors, config.max_hold_ticks),
            window: vec![None; sensors],
            pending: false,
            health: Health::default(),
            corridor,
            policy,
            config,
        })
    }

    pub fn corridor(&self) -> &Corridor {
        &self.corridor
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn health(&self) -> Health {
        self.health.clone()
    }

    pub fn note_error(&mut self) {
        self.health.errors += 1;
    }

    /// Limits currently posted, one per gantry.
    pub fn posted(&self) -> &[Option<SpeedLimit>] {
        &self.state.posted
    }

    /// Event-clock ingestion: runs every tick that falls due before
    /// buffering the reading. Readings for ticks already run are dropped.
    pub fn ingest(&mut self, reading: &SensorReading) -> Result<Vec<TickOutput>> {
        let s = self.sensor(&reading.sensor_id)?;
        if self.clock.is_late(reading.timestamp) {
            self.health.late_readings += 1;
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for t in self.clock.due(reading.timestamp) {
            out.push(self.run_tick(t)?);
        }
        self.buffer(s, reading);
        Ok(out)
    }

    /// Wall-clock ingestion: buffers for the next explicit `tick_at`.
    pub fn buffer_reading(&mut self, reading: &SensorReading) -> Result<()> {
        let s = self.sensor(&reading.sensor_id)?;
        self.buffer(s, reading);
        Ok(())
    }

    /// Event clock: runs the scheduled tick if readings are waiting for it.
    pub fn flush(&mut self) -> Result<Option<TickOutput>> {
        if !self.pending {
            return Ok(None);
        }
        match self.clock.advance() {
            Some(t) => self.run_tick(t).map(Some),
            None => Ok(None),
        }
    }

    /// Wall clock: runs a tick stamped `timestamp` over whatever is buffered.
    pub fn tick_at(&mut self, timestamp: i64) -> Result<TickOutput> {
        self.run_tick(timestamp)
    }

    /// Reverts a refused command to the limit posted before it.
    pub fn reject(&mut self, gantry_id: &str, timestamp: i64, reason: &str) -> Result<RejectionRecord> {
        let g = self
            .corridor
            .gantry_index(gantry_id)
            .ok_or_else(|| Error::Protocol(format!("unknown gantry {gantry_id:?}")))?;
        if self.health.last_tick_timestamp != Some(timestamp) {
            return Err(Error::Protocol(format!(
                "rejection for {gantry_id} at {timestamp} does not match the latest tick"
            )));
        }
        let rejected = self.state.posted[g].unwrap_or(self.corridor.default_max());
        let retained = self.before_last_tick[g];
        self.state.posted[g] = retained;
        self.health.rejections += 1;
        Ok(RejectionRecord {
            tick_timestamp: timestamp,
            gantry_id: gantry_id.to_string(),
            rejected,
            retained,
            reason: reason.to_string(),
        })
    }

    fn sensor(&self, id: &str) -> Result<usize> {
        self.corridor
            .sensor_index(id)
            .ok_or_else(|| Error::Protocol(format!("unknown sensor {id:?}")))
    }

    fn buffer(&mut self, s: usize, reading: &SensorReading) {
        self.window[s] = reading.usable();
        self.pending = true;
    }

    fn run_tick(&mut self, timestamp: i64) -> Result<TickOutput> {
        let started = Instant::now();
        let fresh = std::mem::replace(&mut self.window, vec![None; self.corridor.sensors().len()]);
        self.pending = false;
        let measurements = if self.config.interpolate {
            self.interpolator
                .fill(&self.corridor, &fresh, self.health.ticks, timestamp)
        } else {
            self.corridor
                .sensors()
                .iter()
                .zip(&fresh)
                .map(|(s, r)| match r {
                    Some((v, o)) => Measurement::new(s.id.clone(), timestamp, *v, *o),
                    None => Measurement {
                        valid: false,
                        ..Measurement::new(s.id.clone(), timestamp, 0.0, 0.0)
                    },
                })
                .collect()
        };
        let out = pipeline_step(
            &self.corridor,
            &measurements,
            &*self.policy,
            &self.config.guards,
            &self.state,
        )?;
        let critical = self.corridor.critical_sensors();
        let records: Vec<DecisionRecord> = out
            .decisions
            .iter()
            .enumerate()
            .map(|(i, d)| DecisionRecord::from_decision(timestamp, d, measurements[critical[i]].interpolated))
            .collect();
        self.health.errors += records.iter().filter(|r| r.fail_safe).count() as u64;
        self.before_last_tick = std::mem::replace(&mut self.state, out.state).posted;
        self.health.ticks += 1;
        self.health.last_tick_timestamp = Some(timestamp);
        self.health.last_tick_latency_us = started.elapsed().as_micros() as u64;
        Ok(TickOutput { timestamp, records })
    }
}
