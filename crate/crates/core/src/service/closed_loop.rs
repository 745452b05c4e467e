//! In-process deployment loop: the simulator stands in for the field and
//! the engine posts limits back into it.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::engine::{Engine, EngineConfig, SensorReading, TickOutput};
use super::log::DecisionSink;
use super::replay::{write_sensor_row, ReplaySummary, SENSOR_CSV_HEADER};
use crate::corridor::SpeedLimit;
use crate::error::Result;
use crate::guards::verify_constraints;
use crate::marl::{ConstantPolicy, Policy};
use crate::sim::{ScenarioConfig, Simulator};

pub enum Control {
    /// No limits posted; no decisions logged.
    NoControl,
    /// A policy that always prefers one limit, run through the guards.
    Fixed(SpeedLimit),
    /// A learned or scripted policy run through the guards.
    Policy(Arc<dyn Policy>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopSummary {
    pub decisions: ReplaySummary,
    /// Violations of each kind across all ticks.
    pub violations: BTreeMap<String, u64>,
    pub vehicle_hours: f64,
    pub vehicle_miles: f64,
    pub mean_speed_mph: f64,
    pub simulated_seconds: f64,
}

/// Runs the scenario to its horizon. Every sensor readout is written to
/// `measurements` (CSV) and fed to the engine exactly as a replay of that
/// CSV would feed it, so replaying the file reproduces the decision log.
pub fn run_closed_loop<W: Write>(
    scenario: &ScenarioConfig,
    control: Control,
    engine_config: EngineConfig,
    sink: &mut dyn DecisionSink,
    measurements: W,
) -> Result<ClosedLoopSummary> {
    let mut sim = Simulator::new(scenario)?;
    let corridor = sim.corridor().clone();
    let mut engine = match control {
        Control::NoControl => None,
        Control::Fixed(l) => Some(Engine::new(
            corridor.clone(),
            Arc::new(ConstantPolicy(l)),
            engine_config.clone(),
        )?),
        Control::Policy(p) => Some(Engine::new(corridor.clone(), p, engine_config.clone())?),
    };
    let mut csv = csv::Writer::from_writer(measurements);
    csv.write_record(SENSOR_CSV_HEADER)?;
    let mut summary = ClosedLoopSummary::default();
    let tick = i64::from(engine_config.tick_seconds);
    let interval = scenario.sim.sensor_interval;

    let mut handle = |t: TickOutput, sim: &mut Simulator, summary: &mut ClosedLoopSummary| -> Result<()> {
        for r in &t.records {
            sink.record(r)?;
        }
        let finals: Vec<u32> = t.records.iter().map(|r| r.final_limit.mph()).collect();
        for v in verify_constraints(&finals, &corridor, &engine_config.guards) {
            *summary.violations.entry(format!("{:?}", v.kind)).or_default() += 1;
        }
        summary.decisions.add_tick(&t);
        sim.apply_speed_limits(&t.finals())
    };

    while !sim.is_finished() {
        sim.run_for(interval);
        for m in sim.take_measurements() {
            let reading = SensorReading::from(&m);
            write_sensor_row(&mut csv, &reading)?;
            summary.decisions.readings += 1;
            if let Some(e) = engine.as_mut() {
                for t in e.ingest(&reading)? {
                    handle(t, &mut sim, &mut summary)?;
                }
            }
        }
        if let Some(e) = engine.as_mut() {
            if sim.timestamp().rem_euclid(tick) == 0 {
                if let Some(t) = e.flush()? {
                    handle(t, &mut sim, &mut summary)?;
                }
            }
        }
    }
    if let Some(e) = engine.as_mut() {
        if let Some(t) = e.flush()? {
            handle(t, &mut sim, &mut summary)?;
        }
        summary.decisions.late_readings = e.health().late_readings;
    }
    csv.flush()?;
    sink.flush()?;
    let totals = sim.totals();
    summary.vehicle_hours = totals.vht();
    summary.vehicle_miles = totals.vmt;
    summary.mean_speed_mph = totals.mean_speed();
    summary.simulated_seconds = sim.time();
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::service::log::MemorySink;
    use crate::service::replay::{read_sensor_csv, replay};
    use crate::sim::testing_scenario;

    fn short(seed: u64) -> ScenarioConfig {
        let mut s = testing_scenario(seed);
        s.sim.horizon = 900.0;
        s
    }

    #[test]
    fn replay_of_closed_loop_reproduces_log() {
        let s = short(3);
        let mut sink = MemorySink::new();
        let mut csv = Vec::new();
        let policy = Arc::new(crate::marl::ScriptedPolicy(
            (0..34).map(|i| SpeedLimit::from_index(i % 5)).collect(),
        ));
        let summary = run_closed_loop(
            &s,
            Control::Policy(policy.clone()),
            EngineConfig::default(),
            &mut sink,
            &mut csv,
        )
        .unwrap();
        assert_eq!(summary.decisions.ticks, 30);
        assert_eq!(sink.records().len(), 30 * 34);
        assert!(!summary.violations.contains_key("Bounce"));
        assert!(!summary.violations.contains_key("AboveMax"));

        let readings = read_sensor_csv(&csv[..]).unwrap();
        let corridor = s.corridor.build().unwrap();
        let mut engine = Engine::new(corridor, policy, EngineConfig::default()).unwrap();
        let mut replayed = MemorySink::new();
        replay(&readings, &mut engine, &mut replayed).unwrap();
        assert_eq!(replayed.records(), sink.records());
    }

    #[test]
    fn no_control_logs_nothing() {
        let s = short(1);
        let mut sink = MemorySink::new();
        let mut csv = Vec::new();
        let summary = run_closed_loop(&s, Control::NoControl, EngineConfig::default(), &mut sink, &mut csv).unwrap();
        assert!(sink.records().is_empty());
        assert_eq!(summary.decisions.readings, 30 * 34);
        assert!(summary.vehicle_hours > 0.0);
    }

    #[test]
    fn zero_horizon_is_empty() {
        let mut s = short(1);
        s.sim.horizon = 0.0;
        let mut sink = MemorySink::new();
        let mut csv = Vec::new();
        let summary = run_closed_loop(
            &s,
            Control::Fixed(SpeedLimit::MAX),
            EngineConfig::default(),
            &mut sink,
            &mut csv,
        )
        .unwrap();
        assert_eq!(summary.decisions.ticks, 0);
        assert_eq!(String::from_utf8(csv).unwrap(), "sensor_id,timestamp,speed,occupancy\n");
    }
}
