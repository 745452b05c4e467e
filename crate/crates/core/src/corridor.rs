//! Corridor topology: gantries, sensors, downstream ordering, critical sensor
//! assignment, and normalized agent observations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of discrete speed limit actions.
pub const NUM_ACTIONS: usize = 5;

/// Speed normalization ceiling (mph). Faster readings saturate at 1.0.
pub const SPEED_NORM_MPH: f64 = 80.0;

/// Action normalization (mph), the top of the action grid.
pub const ACTION_NORM_MPH: f64 = 70.0;

/// Default search radius for a gantry's critical sensor.
pub const DEFAULT_SENSOR_RADIUS_MI: f64 = 2.0;

/// A displayable speed limit: one of 30, 40, 50, 60 or 70 mph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct SpeedLimit(u32);

impl SpeedLimit {
    pub const MIN: SpeedLimit = SpeedLimit(30);
    pub const MAX: SpeedLimit = SpeedLimit(70);
    pub const GRID: [SpeedLimit; NUM_ACTIONS] = [
        SpeedLimit(30),
        SpeedLimit(40),
        SpeedLimit(50),
        SpeedLimit(60),
        SpeedLimit(70),
    ];

    pub fn new(mph: u32) -> Result<Self> {
        if (30..=70).contains(&mph) && mph % 10 == 0 {
            Ok(SpeedLimit(mph))
        } else {
            Err(Error::OffGrid(mph))
        }
    }

    pub fn from_index(index: usize) -> Self {
        Self::GRID[index]
    }

    /// Position on the action grid (30 mph is 0).
    pub fn index(self) -> usize {
        ((self.0 - 30) / 10) as usize
    }

    pub fn mph(self) -> u32 {
        self.0
    }

    /// Largest grid value not above `mph`, floored at 30.
    pub fn snap_down(mph: u32) -> Self {
        let clamped = mph.clamp(30, 70);
        SpeedLimit(clamped - clamped % 10)
    }
}

impl TryFrom<u32> for SpeedLimit {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        SpeedLimit::new(value)
    }
}

impl From<SpeedLimit> for u32 {
    fn from(value: SpeedLimit) -> Self {
        value.0
    }
}

impl fmt::Display for SpeedLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Direction of travel relative to the milepost numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Traffic moves toward larger mileposts.
    Increasing,
    /// Traffic moves toward smaller mileposts.
    Decreasing,
}

impl Direction {
    /// Signed distance travelled from `from` to `to`; positive when `to` lies downstream.
    pub fn downstream_distance(self, from: f64, to: f64) -> f64 {
        match self {
            Direction::Increasing => to - from,
            Direction::Decreasing => from - to,
        }
    }

    /// Milepost reached after travelling `distance` miles downstream of `from`.
    pub fn advance(self, from: f64, distance: f64) -> f64 {
        match self {
            Direction::Increasing => from + distance,
            Direction::Decreasing => from - distance,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Increasing => f.write_str("increasing"),
            Direction::Decreasing => f.write_str("decreasing"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gantry {
    pub id: String,
    pub milepost: f64,
    pub direction: Direction,
    /// Legal maximum at this gantry in mph; may be off-grid (55, 65).
    pub max_limit: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: String,
    pub milepost: f64,
    pub direction: Direction,
}

/// A sensor reading. Speeds in mph, occupancy as a fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub sensor_id: String,
    pub timestamp: i64,
    pub speed: f64,
    pub occupancy: f64,
    pub valid: bool,
    #[serde(default)]
    pub interpolated: bool,
}

impl Measurement {
    pub fn new(sensor_id: impl Into<String>, timestamp: i64, speed: f64, occupancy: f64) -> Self {
        Measurement {
            sensor_id: sensor_id.into(),
            timestamp,
            speed: speed.max(0.0),
            occupancy: occupancy.clamp(0.0, 1.0),
            valid: true,
            interpolated: false,
        }
    }
}

/// Normalized agent state: downstream intent, own speed and occupancy,
/// upstream speed and occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub [f64; 5]);

impl Observation {
    pub fn a_down(&self) -> f64 {
        self.0[0]
    }
    pub fn speed(&self) -> f64 {
        self.0[1]
    }
    pub fn occupancy(&self) -> f64 {
        self.0[2]
    }
    pub fn speed_up(&self) -> f64 {
        self.0[3]
    }
    pub fn occupancy_up(&self) -> f64 {
        self.0[4]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn normalize_speed(mph: f64) -> f64 {
    mph.clamp(0.0, SPEED_NORM_MPH) / SPEED_NORM_MPH
}

/// Builds an agent's observation from its downstream neighbour's intended
/// action and the two relevant sensor readings.
pub fn build_observation(downstream_intended: SpeedLimit, own: &Measurement, upstream: &Measurement) -> Observation {
    Observation([
        f64::from(downstream_intended.mph()) / ACTION_NORM_MPH,
        normalize_speed(own.speed),
        own.occupancy.clamp(0.0, 1.0),
        normalize_speed(upstream.speed),
        upstream.occupancy.clamp(0.0, 1.0),
    ])
}

/// Orders gantries so that index 0 is the most downstream one.
pub fn order_downstream_to_upstream(mut gantries: Vec<Gantry>, direction: Direction) -> Result<Vec<Gantry>> {
    if let Some(g) = gantries.iter().find(|g| g.direction != direction) {
        return Err(Error::Config(format!(
            "gantry {} travels {} but the corridor travels {}",
            g.id, g.direction, direction
        )));
    }
    gantries.sort_by(|a, b| {
        let ord = a.milepost.total_cmp(&b.milepost);
        match direction {
            Direction::Decreasing => ord,
            Direction::Increasing => ord.reverse(),
        }
    });
    for pair in gantries.windows(2) {
        if pair[0].milepost == pair[1].milepost {
            return Err(Error::DuplicateMilepost {
                first: pair[0].id.clone(),
                second: pair[1].id.clone(),
                milepost: pair[0].milepost,
            });
        }
    }
    Ok(gantries)
}

/// Maps each gantry to the nearest sensor at or downstream of it within
/// `radius_mi`. Returned indices refer to `sensors`.
pub fn assign_critical_sensors(gantries: &[Gantry], sensors: &[Sensor], radius_mi: f64) -> Result<Vec<usize>> {
    if sensors.is_empty() {
        return Err(Error::Empty("corridor has no sensors"));
    }
    gantries
        .iter()
        .map(|g| {
            let mut best: Option<(f64, usize)> = None;
            for (idx, s) in sensors.iter().enumerate() {
                if s.direction != g.direction {
                    continue;
                }
                let d = g.direction.downstream_distance(g.milepost, s.milepost);
                if d < 0.0 || d > radius_mi {
                    continue;
                }
                // Strict comparison keeps the first of equidistant sensors.
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, idx));
                }
            }
            best.map(|(_, idx)| idx).ok_or_else(|| Error::NoCriticalSensor {
                gantry: g.id.clone(),
                radius_mi,
            })
        })
        .collect()
}

/// Gantry and sensor layout for one direction of travel.
#[derive(Debug, Clone, PartialEq)]
pub struct Corridor {
    gantries: Vec<Gantry>,
    sensors: Vec<Sensor>,
    direction: Direction,
    default_max: SpeedLimit,
    critical: Vec<usize>,
}

impl Corridor {
    pub fn new(
        gantries: Vec<Gantry>,
        mut sensors: Vec<Sensor>,
        direction: Direction,
        default_max: SpeedLimit,
        sensor_radius_mi: f64,
    ) -> Result<Self> {
        if gantries.is_empty() {
            return Err(Error::Empty("corridor has no gantries"));
        }
        let gantries = order_downstream_to_upstream(gantries, direction)?;
        if let Some(s) = sensors.iter().find(|s| s.direction != direction) {
            return Err(Error::Config(format!("sensor {} travels {}", s.id, s.direction)));
        }
        sensors.sort_by(|a, b| {
            let ord = a.milepost.total_cmp(&b.milepost);
            match direction {
                Direction::Decreasing => ord,
                Direction::Increasing => ord.reverse(),
            }
        });
        for (i, s) in sensors.iter().enumerate() {
            if sensors[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Config(format!("duplicate sensor id {}", s.id)));
            }
        }
        for (i, g) in gantries.iter().enumerate() {
            if gantries[..i].iter().any(|o| o.id == g.id) {
                return Err(Error::Config(format!("duplicate gantry id {}", g.id)));
            }
        }
        let critical = assign_critical_sensors(&gantries, &sensors, sensor_radius_mi)?;
        Ok(Corridor {
            gantries,
            sensors,
            direction,
            default_max,
            critical,
        })
    }

    /// Gantries, most downstream first.
    pub fn gantries(&self) -> &[Gantry] {
        &self.gantries
    }

    /// Sensors, most downstream first.
    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn default_max(&self) -> SpeedLimit {
        self.default_max
    }

    pub fn len(&self) -> usize {
        self.gantries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gantries.is_empty()
    }

    /// Index into [`Corridor::sensors`] of each gantry's critical sensor.
    pub fn critical_sensors(&self) -> &[usize] {
        &self.critical
    }

    pub fn critical_sensor(&self, gantry: usize) -> &Sensor {
        &self.sensors[self.critical[gantry]]
    }

    pub fn gantry_index(&self, id: &str) -> Option<usize> {
        self.gantries.iter().position(|g| g.id == id)
    }

    pub fn sensor_index(&self, id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.id == id)
    }

    /// Whether a gantry's cap differs from the corridor default.
    pub fn has_custom_max(&self, gantry: usize) -> bool {
        self.gantries[gantry].max_limit != self.default_max.mph()
    }

    /// Milepost range covered by gantries and sensors, as (low, high).
    pub fn milepost_bounds(&self) -> (f64, f64) {
        let all = self
            .gantries
            .iter()
            .map(|g| g.milepost)
            .chain(self.sensors.iter().map(|s| s.milepost));
        all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m), hi.max(m)))
    }

    /// Observation for gantry `index`. The upstream features come from the
    /// next gantry upstream, or from the gantry's own sensor at the upstream end.
    pub fn observation(
        &self,
        index: usize,
        downstream_intended: SpeedLimit,
        measurements: &[Measurement],
    ) -> Observation {
        let own = &measurements[self.critical[index]];
        let upstream = if index + 1 < self.gantries.len() {
            &measurements[self.critical[index + 1]]
        } else {
            own
        };
        build_observation(downstream_intended, own, upstream)
    }

    pub fn to_config(&self) -> CorridorConfig {
        CorridorConfig {
            direction: self.direction,
            default_max: self.default_max.mph(),
            sensor_radius_mi: DEFAULT_SENSOR_RADIUS_MI,
            gantries: self
                .gantries
                .iter()
                .map(|g| GantryConfig {
                    id: g.id.clone(),
                    milepost: g.milepost,
                    max_limit: Some(g.max_limit),
                })
                .collect(),
            sensors: self
                .sensors
                .iter()
                .map(|s| SensorConfig {
                    id: s.id.clone(),
                    milepost: s.milepost,
                })
                .collect(),
        }
    }
}

fn default_radius() -> f64 {
    DEFAULT_SENSOR_RADIUS_MI
}

fn default_max_mph() -> u32 {
    70
}

/// On-disk corridor definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorConfig {
    pub direction: Direction,
    #[serde(default = "default_max_mph")]
    pub default_max: u32,
    #[serde(default = "default_radius")]
    pub sensor_radius_mi: f64,
    pub gantries: Vec<GantryConfig>,
    pub sensors: Vec<SensorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GantryConfig {
    pub id: String,
    pub milepost: f64,
    /// Defaults to the corridor's `default_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_limit: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub id: String,
    pub milepost: f64,
}

impl CorridorConfig {
    pub fn build(&self) -> Result<Corridor> {
        let default_max = SpeedLimit::new(self.default_max)
            .map_err(|_| Error::Config(format!("default_max {} must be on the grid", self.default_max)))?;
        let gantries = self
            .gantries
            .iter()
            .map(|g| {
                let max_limit = g.max_limit.unwrap_or(self.default_max);
                if !(30..=70).contains(&max_limit) {
                    return Err(Error::Config(format!(
                        "gantry {}: max_limit {} outside [30, 70]",
                        g.id, max_limit
                    )));
                }
                Ok(Gantry {
                    id: g.id.clone(),
                    milepost: g.milepost,
                    direction: self.direction,
                    max_limit,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sensors = self
            .sensors
            .iter()
            .map(|s| Sensor {
                id: s.id.clone(),
                milepost: s.milepost,
                direction: self.direction,
            })
            .collect();
        Corridor::new(gantries, sensors, self.direction, default_max, self.sensor_radius_mi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gantry(id: &str, mp: f64, direction: Direction) -> Gantry {
        Gantry {
            id: id.into(),
            milepost: mp,
            direction,
            max_limit: 70,
        }
    }

    fn sensor(id: &str, mp: f64, direction: Direction) -> Sensor {
        Sensor {
            id: id.into(),
            milepost: mp,
            direction,
        }
    }

    fn mileposts(gs: &[Gantry]) -> Vec<f64> {
        gs.iter().map(|g| g.milepost).collect()
    }

    #[test]
    fn speed_limit_grid() {
        assert!(SpeedLimit::new(45).is_err());
        assert!(SpeedLimit::new(80).is_err());
        assert!(SpeedLimit::new(20).is_err());
        for (i, s) in SpeedLimit::GRID.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(SpeedLimit::from_index(i), *s);
        }
        assert_eq!(SpeedLimit::snap_down(65).mph(), 60);
        assert_eq!(SpeedLimit::snap_down(55).mph(), 50);
        assert_eq!(SpeedLimit::snap_down(10).mph(), 30);
        let json = serde_json::to_string(&SpeedLimit::new(50).unwrap()).unwrap();
        assert_eq!(json, "50");
        assert!(serde_json::from_str::<SpeedLimit>("55").is_err());
    }

    #[test]
    fn ordering_decreasing_direction() {
        let d = Direction::Decreasing;
        let gs = vec![gantry("a", 60.0, d), gantry("b", 58.0, d), gantry("c", 59.0, d)];
        let ordered = order_downstream_to_upstream(gs, d).unwrap();
        assert_eq!(mileposts(&ordered), vec![58.0, 59.0, 60.0]);
    }

    #[test]
    fn ordering_increasing_direction() {
        let d = Direction::Increasing;
        let ordered = order_downstream_to_upstream(vec![gantry("a", 53.0, d), gantry("b", 70.0, d)], d).unwrap();
        assert_eq!(mileposts(&ordered), vec![70.0, 53.0]);
    }

    #[test]
    fn ordering_single_and_duplicates() {
        let d = Direction::Decreasing;
        let single = order_downstream_to_upstream(vec![gantry("a", 61.5, d)], d).unwrap();
        assert_eq!(single[0].id, "a");
        let err = order_downstream_to_upstream(vec![gantry("a", 60.0, d), gantry("b", 60.0, d)], d).unwrap_err();
        assert!(matches!(err, Error::DuplicateMilepost { .. }));
        let err = order_downstream_to_upstream(vec![gantry("a", 60.0, Direction::Increasing)], d).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn critical_sensor_nearest_downstream() {
        let d = Direction::Decreasing;
        let gs = vec![gantry("g", 60.0, d)];
        let ss = vec![sensor("far", 59.5, d), sensor("near", 59.9, d)];
        let map = assign_critical_sensors(&gs, &ss, 2.0).unwrap();
        assert_eq!(ss[map[0]].id, "near");
    }

    #[test]
    fn critical_sensor_upstream_only_is_error() {
        let d = Direction::Decreasing;
        let err = assign_critical_sensors(&[gantry("g60", 60.0, d)], &[sensor("s", 60.5, d)], 2.0).unwrap_err();
        match err {
            Error::NoCriticalSensor { gantry, .. } => assert_eq!(gantry, "g60"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn critical_sensor_outside_radius_is_error() {
        let d = Direction::Increasing;
        let err = assign_critical_sensors(&[gantry("g", 10.0, d)], &[sensor("s", 12.5, d)], 2.0).unwrap_err();
        assert!(matches!(err, Error::NoCriticalSensor { .. }));
    }

    #[test]
    fn critical_sensor_34_gantry_layout() {
        let d = Direction::Decreasing;
        let gs: Vec<Gantry> = (0..34)
            .map(|i| gantry(&format!("g{i}"), 70.0 - 0.5 * i as f64, d))
            .collect();
        let ss: Vec<Sensor> = (0..34)
            .map(|i| sensor(&format!("s{i}"), 70.0 - 0.5 * i as f64 - 0.1, d))
            .collect();
        let map = assign_critical_sensors(&gs, &ss, 2.0).unwrap();
        // Brute force: for each gantry scan every sensor for the minimum
        // non-negative downstream distance.
        for (gi, g) in gs.iter().enumerate() {
            let expected = ss
                .iter()
                .enumerate()
                .filter(|(_, s)| g.milepost - s.milepost >= 0.0)
                .min_by(|a, b| (g.milepost - a.1.milepost).total_cmp(&(g.milepost - b.1.milepost)))
                .map(|(i, _)| i)
                .unwrap();
            assert_eq!(map[gi], expected);
            assert_eq!(ss[map[gi]].id, format!("s{gi}"));
        }
    }

    #[test]
    fn observation_normalization() {
        let m = |s, o| Measurement::new("x", 0, s, o);
        let o = build_observation(SpeedLimit::MAX, &m(80.0, 0.0), &m(80.0, 0.0));
        assert_eq!(o.0, [1.0, 1.0, 0.0, 1.0, 0.0]);
        let o = build_observation(SpeedLimit::MIN, &m(0.0, 1.0), &m(0.0, 1.0));
        assert_eq!(o.0, [30.0 / 70.0, 0.0, 1.0, 0.0, 1.0]);
        let o = build_observation(SpeedLimit::new(50).unwrap(), &m(40.0, 0.2), &m(60.0, 0.1));
        let expected = [0.714286, 0.5, 0.2, 0.75, 0.1];
        for (a, b) in o.0.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let o = build_observation(SpeedLimit::MAX, &m(95.0, 0.3), &m(85.0, 0.3));
        assert_eq!(o.speed(), 1.0);
        assert_eq!(o.speed_up(), 1.0);
    }

    #[test]
    fn corridor_upstream_boundary_reuses_own_sensor() {
        let cfg = CorridorConfig {
            direction: Direction::Increasing,
            default_max: 70,
            sensor_radius_mi: 2.0,
            gantries: vec![
                GantryConfig {
                    id: "g1".into(),
                    milepost: 1.0,
                    max_limit: None,
                },
                GantryConfig {
                    id: "g2".into(),
                    milepost: 0.5,
                    max_limit: Some(55),
                },
            ],
            sensors: vec![
                SensorConfig {
                    id: "s1".into(),
                    milepost: 1.1,
                },
                SensorConfig {
                    id: "s2".into(),
                    milepost: 0.6,
                },
            ],
        };
        let c = cfg.build().unwrap();
        assert_eq!(c.gantries()[0].id, "g1");
        assert!(c.has_custom_max(1));
        let ms = vec![
            Measurement::new("s1", 0, 40.0, 0.2),
            Measurement::new("s2", 0, 60.0, 0.1),
        ];
        let down = c.observation(0, c.default_max(), &ms);
        assert_eq!(down.a_down(), 1.0);
        assert_eq!(down.speed_up(), 0.75);
        let up = c.observation(1, SpeedLimit::new(50).unwrap(), &ms);
        assert_eq!(up.speed(), up.speed_up());
        assert_eq!(up.occupancy(), up.occupancy_up());
    }
}
