//! Sensor CSV input/output and open-loop replay through the engine.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::engine::{Engine, SensorReading, TickOutput};
use super::log::DecisionSink;
use crate::error::{Error, Result};

pub const SENSOR_CSV_HEADER: [&str; 4] = ["sensor_id", "timestamp", "speed", "occupancy"];

/// Parses `sensor_id,timestamp,speed,occupancy` rows; empty speed or
/// occupancy marks missing data. Errors carry the 1-based file line.
pub fn read_sensor_csv<R: Read>(input: R) -> Result<Vec<SensorReading>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Schema {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != SENSOR_CSV_HEADER {
        return Err(Error::Schema {
            line: 1,
            message: format!("expected header {}", SENSOR_CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Schema {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Schema { line, message };
        if row.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", row.len())));
        }
        if row[0].is_empty() {
            return Err(bad("empty sensor_id".into()));
        }
        let timestamp: i64 = row[1]
            .parse()
            .map_err(|_| bad(format!("bad timestamp {:?}", &row[1])))?;
        let opt = |i: usize, name: &str| -> Result<Option<f64>> {
            if row[i].is_empty() {
                return Ok(None);
            }
            let v: f64 = row[i].parse().map_err(|_| bad(format!("bad {name} {:?}", &row[i])))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite {name}")));
            }
            Ok(Some(v))
        };
        out.push(SensorReading {
            sensor_id: row[0].to_string(),
            timestamp,
            speed: opt(2, "speed")?,
            occupancy: opt(3, "occupancy")?,
        });
    }
    Ok(out)
}

pub fn write_sensor_csv<W: Write>(readings: &[SensorReading], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SENSOR_CSV_HEADER)?;
    for r in readings {
        write_sensor_row(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sensor_row<W: Write>(w: &mut csv::Writer<W>, r: &SensorReading) -> Result<()> {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        r.sensor_id.clone(),
        r.timestamp.to_string(),
        fmt(r.speed),
        fmt(r.occupancy),
    ])?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub readings: u64,
    pub ticks: u64,
    pub records: u64,
    pub interpolated: u64,
    pub fail_safe: u64,
    pub late_readings: u64,
    pub attribution: BTreeMap<String, u64>,
}

impl ReplaySummary {
    pub fn add_tick(&mut self, tick: &TickOutput) {
        self.ticks += 1;
        for r in &tick.records {
            self.records += 1;
            self.interpolated += u64::from(r.interpolated);
            self.fail_safe += u64::from(r.fail_safe);
            *self.attribution.entry(r.attribution.to_string()).or_default() += 1;
        }
    }
}

/// Feeds readings in file order through the event clock, then ticks out
/// whatever remains buffered.
pub fn replay(readings: &[SensorReading], engine: &mut Engine, sink: &mut dyn DecisionSink) -> Result<ReplaySummary> {
    let mut summary = ReplaySummary::default();
    let mut emit = |tick: TickOutput, summary: &mut ReplaySummary| -> Result<()> {
        for r in &tick.records {
            sink.record(r)?;
        }
        summary.add_tick(&tick);
        Ok(())
    };
    for r in readings {
        summary.readings += 1;
        for tick in engine.ingest(r)? {
            emit(tick, &mut summary)?;
        }
    }
    if let Some(tick) = engine.flush()? {
        emit(tick, &mut summary)?;
    }
    sink.flush()?;
    summary.late_readings = engine.health().late_readings;
    Ok(summary)
}
