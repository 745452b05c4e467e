//! Time-space views: binned speed fields, virtual vehicle trajectories and
//! gridded posted limits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corridor::{Corridor, Direction};
use crate::error::{Error, Result};
use crate::guards::Attribution;
use crate::service::{DecisionRecord, SensorReading};

/// Lowest speed a virtual vehicle travels at, so it always makes progress.
pub const MIN_TRAVEL_SPEED_MPH: f64 = 2.0;

/// Mean sensor speed per (time bin, sensor). Columns are sensors sorted by
/// milepost ascending; a cell is `None` when no valid reading fell in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedField {
    pub direction: Direction,
    pub bin_seconds: i64,
    /// Start of each bin; consecutive and evenly spaced.
    pub bin_starts: Vec<i64>,
    pub sensor_ids: Vec<String>,
    pub mileposts: Vec<f64>,
    pub speeds: Vec<Vec<Option<f64>>>,
}

impl SpeedField {
    pub fn from_readings(corridor: &Corridor, readings: &[SensorReading], bin_seconds: i64) -> Result<Self> {
        if bin_seconds <= 0 {
            return Err(Error::Config("bin length must be positive".into()));
        }
        if readings.is_empty() {
            return Err(Error::Empty("no sensor readings"));
        }
        let mut order: Vec<usize> = (0..corridor.sensors().len()).collect();
        order.sort_by(|&a, &b| {
            corridor.sensors()[a]
                .milepost
                .total_cmp(&corridor.sensors()[b].milepost)
        });
        let mut column = vec![0; order.len()];
        for (col, &s) in order.iter().enumerate() {
            column[s] = col;
        }
        let t0 = readings
            .iter()
            .map(|r| r.timestamp)
            .min()
            .unwrap()
            .div_euclid(bin_seconds)
            * bin_seconds;
        let t1 = readings
            .iter()
            .map(|r| r.timestamp)
            .max()
            .unwrap()
            .div_euclid(bin_seconds)
            * bin_seconds;
        let bins = ((t1 - t0) / bin_seconds + 1) as usize;
        let mut sums = vec![vec![(0.0, 0u32); order.len()]; bins];
        for r in readings {
            let s = corridor
                .sensor_index(&r.sensor_id)
                .ok_or_else(|| Error::Config(format!("unknown sensor {:?}", r.sensor_id)))?;
            if let Some(v) = r.speed {
                let cell = &mut sums[((r.timestamp.div_euclid(bin_seconds) * bin_seconds - t0) / bin_seconds) as usize]
                    [column[s]];
                cell.0 += v;
                cell.1 += 1;
            }
        }
        Ok(SpeedField {
            direction: corridor.direction(),
            bin_seconds,
            bin_starts: (0..bins as i64).map(|k| t0 + k * bin_seconds).collect(),
            sensor_ids: order.iter().map(|&s| corridor.sensors()[s].id.clone()).collect(),
            mileposts: order.iter().map(|&s| corridor.sensors()[s].milepost).collect(),
            speeds: sums
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|(sum, n)| (n > 0).then(|| sum / n as f64))
                        .collect()
                })
                .collect(),
        })
    }

    pub fn start(&self) -> i64 {
        self.bin_starts[0]
    }

    pub fn end(&self) -> i64 {
        self.start() + self.bin_starts.len() as i64 * self.bin_seconds
    }

    /// Column whose milepost is nearest. A point exactly between two
    /// sensors belongs to the one downstream of it.
    fn column(&self, milepost: f64) -> usize {
        let k = self.mileposts.partition_point(|&m| m < milepost);
        if k == 0 {
            return 0;
        }
        if k == self.mileposts.len() {
            return k - 1;
        }
        let (below, above) = (milepost - self.mileposts[k - 1], self.mileposts[k] - milepost);
        match self.direction {
            Direction::Increasing if below < above => k - 1,
            Direction::Increasing => k,
            Direction::Decreasing if below <= above => k - 1,
            Direction::Decreasing => k,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_grid(out, &self.bin_starts, &self.sensor_ids, &self.speeds, |v| {
            format!("{v:.3}")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Seconds since the epoch; fractional at the exit point.
    pub time: f64,
    pub milepost: f64,
    /// Speed driven from this point on, in mph.
    pub speed: f64,
}

/// Drives a vehicle through the field from `(start_time, start_milepost)`.
/// Speed is piecewise constant: the cell of the nearest sensor column in the
/// current time bin, floored at 2 mph; an empty cell keeps the previous
/// speed. Positions are integrated exactly across column boundaries and
/// reported at every bin boundary until the vehicle leaves the sensor span
/// or the recording ends.
pub fn virtual_vehicle(field: &SpeedField, start_time: f64, start_milepost: f64) -> Result<Vec<TrajectoryPoint>> {
    let (lo, hi) = (field.mileposts[0], *field.mileposts.last().unwrap());
    if !(lo..=hi).contains(&start_milepost) {
        return Err(Error::OutOfBounds(format!(
            "milepost {start_milepost} outside [{lo}, {hi}]"
        )));
    }
    if !(field.start() as f64..field.end() as f64).contains(&start_time) {
        return Err(Error::OutOfBounds(format!(
            "time {start_time} outside [{}, {})",
            field.start(),
            field.end()
        )));
    }
    let dir = field.direction;
    let exit = match dir {
        Direction::Increasing => hi,
        Direction::Decreasing => lo,
    };
    let bin_s = field.bin_seconds as f64;
    let start = field.start() as f64;
    let mut t = start_time;
    let mut x = start_milepost;
    let mut last: Option<f64> = None;
    let mut col = field.column(x);
    let mut at_bin_start = true;
    let mut out = Vec::new();
    loop {
        let bin = ((t - start) / bin_s).floor() as usize;
        let v = field.speeds[bin][col]
            .or(last)
            .unwrap_or(MIN_TRAVEL_SPEED_MPH)
            .max(MIN_TRAVEL_SPEED_MPH);
        last = Some(v);
        if at_bin_start {
            out.push(TrajectoryPoint {
                time: t,
                milepost: x,
                speed: v,
            });
        }
        if x == exit {
            break;
        }
        // The column ends midway to the next sensor downstream.
        let (edge, next) = match dir {
            Direction::Increasing if col + 1 == field.mileposts.len() => (hi, col),
            Direction::Increasing => (0.5 * (field.mileposts[col] + field.mileposts[col + 1]), col + 1),
            Direction::Decreasing if col == 0 => (lo, col),
            Direction::Decreasing => (0.5 * (field.mileposts[col - 1] + field.mileposts[col]), col - 1),
        };
        let bin_end = start + (bin + 1) as f64 * bin_s;
        let t_edge = t + dir.downstream_distance(x, edge).max(0.0) / v * 3600.0;
        if t_edge <= bin_end {
            t = t_edge;
            x = edge;
            col = next;
            at_bin_start = t == bin_end;
        } else {
            x = dir.advance(x, v * (bin_end - t) / 3600.0);
            t = bin_end;
            at_bin_start = true;
        }
        if x == exit || t >= field.end() as f64 {
            out.push(TrajectoryPoint {
                time: t,
                milepost: x,
                speed: v,
            });
            break;
        }
    }
    Ok(out)
}

/// Posted limit faced by a vehicle: the nearest gantry at or downstream of
/// its position. `None` once the vehicle is past the last gantry or before
/// that gantry has any logged decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub time: f64,
    pub milepost: f64,
    pub travel_speed: f64,
    pub gantry_id: Option<String>,
    pub posted: Option<u32>,
}

pub fn vsl_encounter_series(
    trajectory: &[TrajectoryPoint],
    records: &[DecisionRecord],
    corridor: &Corridor,
) -> Vec<Encounter> {
    let mut history: BTreeMap<&str, Vec<(i64, u32)>> = BTreeMap::new();
    for r in records {
        history
            .entry(&r.gantry_id)
            .or_default()
            .push((r.tick_timestamp, r.final_limit.mph()));
    }
    for h in history.values_mut() {
        h.sort_by_key(|e| e.0);
    }
    let dir = corridor.direction();
    trajectory
        .iter()
        .map(|p| {
            let gantry = corridor
                .gantries()
                .iter()
                .filter(|g| dir.downstream_distance(p.milepost, g.milepost) >= 0.0)
                .min_by(|a, b| {
                    dir.downstream_distance(p.milepost, a.milepost)
                        .total_cmp(&dir.downstream_distance(p.milepost, b.milepost))
                });
            let posted = gantry.and_then(|g| {
                let h = history.get(g.id.as_str())?;
                let k = h.partition_point(|e| e.0 as f64 <= p.time);
                (k > 0).then(|| h[k - 1].1)
            });
            Encounter {
                time: p.time,
                milepost: p.milepost,
                travel_speed: p.speed,
                gantry_id: gantry.map(|g| g.id.clone()),
                posted,
            }
        })
        .collect()
}

pub fn write_encounters_csv<W: std::io::Write>(series: &[Encounter], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "milepost", "travel_speed", "gantry_id", "posted"])?;
    for e in series {
        w.write_record([
            format!("{:.3}", e.time),
            format!("{:.4}", e.milepost),
            format!("{:.3}", e.travel_speed),
            e.gantry_id.clone().unwrap_or_default(),
            e.posted.map(|p| p.to_string()).unwrap_or_else(|| "NA".into()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Posted limits per (tick, gantry), gantries in corridor order. The
/// policy-only grid keeps a cell only where the policy action was posted
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitGrid {
    pub ticks: Vec<i64>,
    pub gantry_ids: Vec<String>,
    pub posted: Vec<Vec<Option<u32>>>,
    pub policy_only: Vec<Vec<Option<u32>>>,
}

impl LimitGrid {
    pub fn from_records(corridor: &Corridor, records: &[DecisionRecord]) -> Result<Self> {
        let mut ticks: Vec<i64> = records.iter().map(|r| r.tick_timestamp).collect();
        ticks.sort_unstable();
        ticks.dedup();
        let n = corridor.len();
        let mut posted = vec![vec![None; n]; ticks.len()];
        let mut policy_only = vec![vec![None; n]; ticks.len()];
        for r in records {
            let g = corridor
                .gantry_index(&r.gantry_id)
                .ok_or_else(|| Error::Config(format!("unknown gantry {:?}", r.gantry_id)))?;
            let t = ticks.binary_search(&r.tick_timestamp).unwrap();
            posted[t][g] = Some(r.final_limit.mph());
            policy_only[t][g] = (r.attribution == Attribution::Policy).then(|| r.final_limit.mph());
        }
        Ok(LimitGrid {
            ticks,
            gantry_ids: corridor.gantries().iter().map(|g| g.id.clone()).collect(),
            posted,
            policy_only,
        })
    }

    pub fn write_posted_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_grid(out, &self.ticks, &self.gantry_ids, &self.posted, |v| v.to_string())
    }

    pub fn write_policy_only_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_grid(out, &self.ticks, &self.gantry_ids, &self.policy_only, |v| v.to_string())
    }
}

fn write_grid<W: std::io::Write, T: Copy>(
    out: W,
    rows: &[i64],
    columns: &[String],
    cells: &[Vec<Option<T>>],
    fmt: impl Fn(T) -> String,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("timestamp".to_string()).chain(columns.iter().cloned()))?;
    for (t, row) in rows.iter().zip(cells) {
        w.write_record(std::iter::once(t.to_string()).chain(row.iter().map(|c| c.map(&fmt).unwrap_or_default())))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corridor::{CorridorConfig, GantryConfig, Observation, SensorConfig, SpeedLimit};

    /// Sensors at integer mileposts 0..=10, one gantry per sensor.
    fn corridor(direction: Direction) -> Corridor {
        CorridorConfig {
            direction,
            default_max: 70,
            sensor_radius_mi: 0.5,
            gantries: (0..=10)
                .map(|k| GantryConfig {
                    id: format!("g{k}"),
                    milepost: k as f64,
                    max_limit: None,
                })
                .collect(),
            sensors: (0..=10)
                .map(|k| SensorConfig {
                    id: format!("s{k}"),
                    milepost: k as f64,
                })
                .collect(),
        }
        .build()
        .unwrap()
    }

    fn readings(c: &Corridor, seconds: i64, speed: impl Fn(f64) -> Option<f64>) -> Vec<SensorReading> {
        (0..seconds / 30)
            .flat_map(|k| c.sensors().iter().map(move |s| (k, s)).collect::<Vec<_>>())
            .map(|(k, s)| SensorReading {
                sensor_id: s.id.clone(),
                timestamp: k * 30,
                speed: speed(s.milepost),
                occupancy: Some(0.1),
            })
            .collect()
    }

    #[test]
    fn field_bins_means() {
        let c = corridor(Direction::Increasing);
        let mut rs = readings(&c, 60, |_| Some(60.0));
        rs.push(SensorReading {
            sensor_id: "s3".into(),
            timestamp: 45,
            speed: Some(40.0),
            occupancy: None,
        });
        rs.push(SensorReading {
            sensor_id: "s4".into(),
            timestamp: 10,
            speed: None,
            occupancy: None,
        });
        let f = SpeedField::from_readings(&c, &rs, 30).unwrap();
        assert_eq!(f.bin_starts, vec![0, 30]);
        assert_eq!(f.speeds[1][3], Some(50.0));
        assert_eq!(f.speeds[0][4], Some(60.0));
        assert!(SpeedField::from_readings(&c, &[], 30).is_err());
    }

    #[test]
    fn uniform_sixty_is_a_mile_a_minute() {
        let c = corridor(Direction::Increasing);
        let f = SpeedField::from_readings(&c, &readings(&c, 1200, |_| Some(60.0)), 30).unwrap();
        let traj = virtual_vehicle(&f, 0.0, 0.0).unwrap();
        for p in &traj {
            assert!((p.milepost - p.time / 60.0).abs() < 1e-9, "{p:?}");
        }
        let last = traj.last().unwrap();
        assert_eq!(last.milepost, 10.0);
        assert!((last.time - 600.0).abs() < 1e-6);
    }

    #[test]
    fn two_regions_match_hand_integration() {
        // 70 mph on sensors 0..=4, 30 mph on 5..=10: the speed changes at the
        // column edge at milepost 4.5.
        let c = corridor(Direction::Increasing);
        let f = SpeedField::from_readings(&c, &readings(&c, 3600, |m| Some(if m < 4.6 { 70.0 } else { 30.0 })), 30)
            .unwrap();
        let traj = virtual_vehicle(&f, 0.0, 0.0).unwrap();
        let oracle = 4.5 / 70.0 * 3600.0 + 5.5 / 30.0 * 3600.0;
        assert!((traj.last().unwrap().time - oracle).abs() < 1e-6);
        // Decreasing travel covers the same stretch in the other order.
        let c = corridor(Direction::Decreasing);
        let f = SpeedField::from_readings(&c, &readings(&c, 3600, |m| Some(if m < 4.6 { 70.0 } else { 30.0 })), 30)
            .unwrap();
        let traj = virtual_vehicle(&f, 0.0, 10.0).unwrap();
        assert_eq!(traj.last().unwrap().milepost, 0.0);
        assert!((traj.last().unwrap().time - oracle).abs() < 1e-6);
    }

    #[test]
    fn speed_floor_and_gaps() {
        let c = corridor(Direction::Increasing);
        let f = SpeedField::from_readings(&c, &readings(&c, 600, |_| Some(0.0)), 30).unwrap();
        let traj = virtual_vehicle(&f, 0.0, 0.0).unwrap();
        assert!(traj.iter().all(|p| p.speed == MIN_TRAVEL_SPEED_MPH));
        // 2 mph for 600 s covers exactly a third of a mile.
        assert!((traj.last().unwrap().milepost - 2.0 * 600.0 / 3600.0).abs() < 1e-9);
        let f = SpeedField::from_readings(&c, &readings(&c, 600, |m| (m < 0.5).then_some(36.0)), 30).unwrap();
        let traj = virtual_vehicle(&f, 0.0, 0.0).unwrap();
        assert!(traj.iter().all(|p| p.speed == 36.0));
    }

    #[test]
    fn out_of_bounds_start() {
        let c = corridor(Direction::Increasing);
        let f = SpeedField::from_readings(&c, &readings(&c, 60, |_| Some(60.0)), 30).unwrap();
        assert!(matches!(virtual_vehicle(&f, 0.0, 11.0), Err(Error::OutOfBounds(_))));
        assert!(matches!(virtual_vehicle(&f, 60.0, 1.0), Err(Error::OutOfBounds(_))));
        assert!(matches!(virtual_vehicle(&f, -1.0, 1.0), Err(Error::OutOfBounds(_))));
    }

    fn record(t: i64, g: &str, limit: u32, attribution: Attribution) -> DecisionRecord {
        let l = SpeedLimit::new(limit).unwrap();
        DecisionRecord {
            tick_timestamp: t,
            gantry_id: g.into(),
            observation: Observation([0.0; 5]),
            policy_action: l,
            after_sm: l,
            after_mslc: l,
            final_limit: l,
            attribution,
            interpolated: false,
            fail_safe: false,
        }
    }

    #[test]
    fn encounters_use_gantry_ahead() {
        let c = corridor(Direction::Increasing);
        let recs = vec![
            record(0, "g3", 50, Attribution::Policy),
            record(30, "g3", 40, Attribution::Policy),
            record(0, "g10", 60, Attribution::Policy),
        ];
        let pts = [
            TrajectoryPoint {
                time: 10.0,
                milepost: 2.5,
                speed: 60.0,
            },
            TrajectoryPoint {
                time: 30.0,
                milepost: 3.0,
                speed: 60.0,
            },
            TrajectoryPoint {
                time: 31.0,
                milepost: 9.5,
                speed: 60.0,
            },
            TrajectoryPoint {
                time: 31.0,
                milepost: 7.5,
                speed: 60.0,
            },
            TrajectoryPoint {
                time: 40.0,
                milepost: 10.2,
                speed: 60.0,
            },
        ];
        let e = vsl_encounter_series(&pts, &recs, &c);
        assert_eq!(e[0].posted, Some(50));
        assert_eq!(e[1].posted, Some(40));
        assert_eq!(e[2].posted, Some(60));
        assert_eq!(e[3].gantry_id.as_deref(), Some("g8"));
        assert_eq!(e[3].posted, None);
        assert_eq!(e[4].gantry_id, None);
        let mut buf = Vec::new();
        write_encounters_csv(&e, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .lines()
            .last()
            .unwrap()
            .ends_with(",,NA"));
    }

    #[test]
    fn limit_grid_masks_non_policy_cells() {
        let c = corridor(Direction::Increasing);
        let recs = vec![
            record(0, "g0", 50, Attribution::Policy),
            record(0, "g1", 60, Attribution::SpeedMatching),
            record(30, "g0", 70, Attribution::Debounce),
        ];
        let g = LimitGrid::from_records(&c, &recs).unwrap();
        assert_eq!(g.ticks, vec![0, 30]);
        let i0 = c.gantry_index("g0").unwrap();
        let i1 = c.gantry_index("g1").unwrap();
        assert_eq!(g.posted[0][i0], Some(50));
        assert_eq!(g.posted[0][i1], Some(60));
        assert_eq!(g.policy_only[0][i0], Some(50));
        assert_eq!(g.policy_only[0][i1], None);
        assert_eq!(g.policy_only[1][i0], None);
        let mut buf = Vec::new();
        g.write_posted_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(LimitGrid::from_records(&c, &[record(0, "zz", 50, Attribution::Policy)]).is_err());
    }
}
