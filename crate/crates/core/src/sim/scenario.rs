//! Scenario configuration and the built-in training and testing layouts.

use serde::{Deserialize, Serialize};

use crate::corridor::{CorridorConfig, Direction, GantryConfig, SensorConfig, DEFAULT_SENSOR_RADIUS_MI};
use crate::error::{Error, Result};
use crate::rng;

use rand::Rng;

/// 2024-04-22 06:00 US Central (daylight time), on a whole minute.
pub const DEFAULT_START_EPOCH: i64 = 1_713_783_600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    /// Free-flow speed, mph.
    pub v_free: f64,
    /// Capacity, veh/hr/lane.
    pub q_max: f64,
    /// Jam density, veh/mi/lane.
    pub k_jam: f64,
}

impl Default for FundamentalDiagram {
    fn default() -> Self {
        FundamentalDiagram {
            v_free: 70.0,
            q_max: 2000.0,
            k_jam: 200.0,
        }
    }
}

impl FundamentalDiagram {
    pub fn critical_density(&self) -> f64 {
        self.q_max / self.v_free
    }

    /// Backward wave speed of the triangular diagram, mph.
    pub fn wave_speed(&self) -> f64 {
        self.q_max / (self.k_jam - self.critical_density())
    }

    fn validate(&self) -> Result<()> {
        if !(self.v_free > 0.0 && self.q_max > 0.0 && self.k_jam > self.critical_density()) {
            return Err(Error::Config(format!(
                "fundamental diagram needs v_free > 0, q_max > 0 and k_jam > q_max / v_free: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One step of a piecewise-constant inflow schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandStep {
    /// Seconds since simulation start.
    pub start_s: f64,
    /// veh/hr/lane.
    pub flow: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DemandProfile(pub Vec<DemandStep>);

impl DemandProfile {
    pub fn constant(flow: f64) -> Self {
        DemandProfile(vec![DemandStep { start_s: 0.0, flow }])
    }

    pub fn steps(steps: &[(f64, f64)]) -> Self {
        DemandProfile(
            steps
                .iter()
                .map(|&(start_s, flow)| DemandStep { start_s, flow })
                .collect(),
        )
    }

    /// Flow in effect at `t` seconds; zero before the first step.
    pub fn flow_at(&self, t: f64) -> f64 {
        self.0
            .iter()
            .take_while(|s| s.start_s <= t)
            .last()
            .map_or(0.0, |s| s.flow)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        DemandProfile(
            self.0
                .iter()
                .map(|s| DemandStep {
                    start_s: s.start_s,
                    flow: s.flow * factor,
                })
                .collect(),
        )
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        for s in &self.0 {
            if !(s.flow >= 0.0) || !s.start_s.is_finite() {
                return Err(Error::Config(format!("{what}: invalid demand step {s:?}")));
            }
        }
        if self.0.windows(2).any(|w| w[1].start_s <= w[0].start_s) {
            return Err(Error::Config(format!(
                "{what}: demand start times must strictly increase"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Milepost where traffic enters the modelled segment.
    pub upstream_milepost: f64,
    pub length_mi: f64,
    pub lanes: u32,
    pub cell_length_mi: f64,
    /// Total discharge capacity at the downstream end (veh/hr), unlimited if absent.
    /// Zero closes the segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream_capacity_vph: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampConfig {
    pub id: String,
    /// Milepost of the merge point.
    pub milepost: f64,
    pub lanes: u32,
    pub demand: DemandProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorNoise {
    /// Standard deviation of additive speed noise, mph.
    pub speed_sd: f64,
    /// Standard deviation of additive occupancy noise.
    pub occupancy_sd: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Integration step, seconds.
    pub dt: f64,
    /// Fraction of traffic obeying posted limits.
    pub compliance: f64,
    /// Sensor aggregation window, seconds. Must be a multiple of `dt`.
    pub sensor_interval: f64,
    /// Simulated duration, seconds.
    pub horizon: f64,
    pub seed: u64,
    #[serde(default = "default_start_epoch")]
    pub start_epoch: i64,
    /// Relative standard deviation of five-minute demand fluctuations.
    #[serde(default)]
    pub demand_noise: f64,
    #[serde(default)]
    pub sensor_noise: SensorNoise,
    /// Start from the free-flow equilibrium of the initial demand instead of an empty road.
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

fn default_start_epoch() -> i64 {
    DEFAULT_START_EPOCH
}

impl SimConfig {
    pub fn steps_per_interval(&self) -> u64 {
        (self.sensor_interval / self.dt).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config("sim.dt must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.compliance) {
            return Err(Error::Config(format!(
                "sim.compliance {} outside [0, 1]",
                self.compliance
            )));
        }
        let ratio = self.sensor_interval / self.dt;
        if !(self.sensor_interval > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "sim.sensor_interval {} is not a positive multiple of dt {}",
                self.sensor_interval, self.dt
            )));
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::Config("sim.horizon must be non-negative".into()));
        }
        if self.demand_noise < 0.0 || self.sensor_noise.speed_sd < 0.0 || self.sensor_noise.occupancy_sd < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// A complete simulation scenario: corridor, road geometry, traffic physics and demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub sim: SimConfig,
    pub geometry: Geometry,
    #[serde(default)]
    pub fundamental: FundamentalDiagram,
    pub mainline_demand: DemandProfile,
    #[serde(default)]
    pub ramps: Vec<RampConfig>,
    pub corridor: CorridorConfig,
}

/// Domain shift applied on top of a nominal scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub demand_scale: f64,
    pub v_free: Option<f64>,
    pub q_max: Option<f64>,
    pub sensor_noise: SensorNoise,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            demand_scale: 1.0,
            v_free: None,
            q_max: None,
            sensor_noise: SensorNoise::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.fundamental.validate()?;
        let g = &self.geometry;
        if !(g.length_mi > 0.0 && g.cell_length_mi > 0.0 && g.lanes > 0) {
            return Err(Error::Config(
                "geometry needs positive length, cell length and lanes".into(),
            ));
        }
        let dt_h = self.sim.dt / 3600.0;
        let fd = &self.fundamental;
        if fd.v_free * dt_h > g.cell_length_mi + 1e-12 || fd.wave_speed() * dt_h > g.cell_length_mi + 1e-12 {
            return Err(Error::Config(format!(
                "CFL violated: dt {} s is too long for {} mi cells at {} mph",
                self.sim.dt, g.cell_length_mi, fd.v_free
            )));
        }
        if let Some(cap) = g.downstream_capacity_vph {
            if !(cap >= 0.0) {
                return Err(Error::Config("downstream_capacity_vph must be non-negative".into()));
            }
        }
        self.mainline_demand.validate("mainline_demand")?;
        for r in &self.ramps {
            r.demand.validate(&format!("ramp {}", r.id))?;
            let x = self.distance_along(r.milepost);
            if !(0.0..g.length_mi).contains(&x) || r.lanes == 0 {
                return Err(Error::Config(format!(
                    "ramp {} lies outside the segment or has no lanes",
                    r.id
                )));
            }
        }
        if self.corridor.direction != self.direction() {
            return Err(Error::Config("corridor and geometry directions disagree".into()));
        }
        for m in self
            .corridor
            .gantries
            .iter()
            .map(|g| (&g.id, g.milepost))
            .chain(self.corridor.sensors.iter().map(|s| (&s.id, s.milepost)))
        {
            let x = self.distance_along(m.1);
            if !(0.0..=g.length_mi).contains(&x) {
                return Err(Error::Config(format!(
                    "{} at milepost {} lies outside the segment",
                    m.0, m.1
                )));
            }
        }
        Ok(())
    }

    pub fn direction(&self) -> Direction {
        self.corridor.direction
    }

    /// Distance (mi) downstream of the segment entry.
    pub fn distance_along(&self, milepost: f64) -> f64 {
        self.direction()
            .downstream_distance(self.geometry.upstream_milepost, milepost)
    }

    pub fn milepost_at(&self, distance: f64) -> f64 {
        self.direction().advance(self.geometry.upstream_milepost, distance)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self
    }

    pub fn perturbed(&self, p: &Perturbation) -> Self {
        let mut out = self.clone();
        out.mainline_demand = out.mainline_demand.scaled(p.demand_scale);
        for r in &mut out.ramps {
            r.demand = r.demand.scaled(p.demand_scale);
        }
        if let Some(v) = p.v_free {
            out.fundamental.v_free = v;
        }
        if let Some(q) = p.q_max {
            out.fundamental.q_max = q;
        }
        out.sim.sensor_noise = p.sensor_noise;
        out.name = format!("{}-perturbed", self.name);
        out
    }
}

/// Seven-mile, four-lane segment with eight gantries at half-mile spacing
/// upstream of a two-lane on-ramp merge and a sensor at every gantry.
pub fn training_scenario() -> ScenarioConfig {
    let direction = Direction::Decreasing;
    let upstream_milepost = 67.0;
    let at = |x: f64| direction.advance(upstream_milepost, x);
    // Most downstream gantry half a mile above the merge at x = 6.0.
    let gantries: Vec<GantryConfig> = (0..8)
        .map(|i| GantryConfig {
            id: format!("g{}", i + 1),
            milepost: at(5.5 - 0.5 * i as f64),
            max_limit: None,
        })
        .collect();
    let sensors = (0..8)
        .map(|i| SensorConfig {
            id: format!("s{}", i + 1),
            milepost: at(5.5 - 0.5 * i as f64),
        })
        .collect();
    ScenarioConfig {
        name: "training".into(),
        sim: SimConfig {
            dt: 2.0,
            compliance: 0.05,
            sensor_interval: 60.0,
            horizon: 7200.0,
            seed: 0,
            start_epoch: DEFAULT_START_EPOCH,
            demand_noise: 0.05,
            sensor_noise: SensorNoise::default(),
            warm_start: true,
        },
        geometry: Geometry {
            upstream_milepost,
            length_mi: 7.0,
            lanes: 4,
            cell_length_mi: 0.1,
            downstream_capacity_vph: None,
        },
        fundamental: FundamentalDiagram::default(),
        mainline_demand: DemandProfile::steps(&[(0.0, 1850.0), (3600.0, 925.0)]),
        ramps: vec![RampConfig {
            id: "merge".into(),
            milepost: at(6.0),
            lanes: 2,
            demand: DemandProfile::constant(1000.0),
        }],
        corridor: CorridorConfig {
            direction,
            default_max: 70,
            sensor_radius_mi: DEFAULT_SENSOR_RADIUS_MI,
            gantries,
            sensors,
        },
    }
}

/// Seventeen-mile segment (mileposts 70 to 53, traffic toward lower mileposts)
/// with 34 gantries at half-mile spacing, each followed by a sensor 0 to 0.2 mi
/// downstream. Two on-ramps and a reduced-capacity downstream end create
/// congestion at several places. The six most downstream gantries carry
/// custom caps (55 and 65 mph).
pub fn testing_scenario(seed: u64) -> ScenarioConfig {
    let direction = Direction::Decreasing;
    let upstream_milepost = 70.0;
    let at = |x: f64| direction.advance(upstream_milepost, x);
    let mut layout = rng::stream(seed, "testing-layout");
    let n = 34;
    let mut gantries = Vec::with_capacity(n);
    let mut sensors = Vec::with_capacity(n);
    for k in 0..n {
        // k = 0 is the upstream end.
        let x = 0.25 + 0.5 * k as f64;
        let downstream_rank = n - 1 - k;
        let max_limit = match downstream_rank {
            0..=2 => Some(55),
            3..=5 => Some(65),
            _ => None,
        };
        gantries.push(GantryConfig {
            id: format!("wb{:02}", downstream_rank + 1),
            milepost: round6(at(x)),
            max_limit,
        });
        let offset: f64 = layout.random_range(0.0..=0.2);
        sensors.push(SensorConfig {
            id: format!("rds{:02}", downstream_rank + 1),
            milepost: round6(at(x + offset)),
        });
    }
    ScenarioConfig {
        name: "testing".into(),
        sim: SimConfig {
            dt: 2.0,
            compliance: 0.05,
            sensor_interval: 30.0,
            horizon: 10800.0,
            seed,
            start_epoch: DEFAULT_START_EPOCH,
            demand_noise: 0.05,
            sensor_noise: SensorNoise::default(),
            warm_start: true,
        },
        geometry: Geometry {
            upstream_milepost,
            length_mi: 17.0,
            lanes: 4,
            cell_length_mi: 0.1,
            downstream_capacity_vph: Some(7000.0),
        },
        fundamental: FundamentalDiagram::default(),
        mainline_demand: DemandProfile::steps(&[(0.0, 1300.0), (1800.0, 1650.0), (5400.0, 1750.0), (7200.0, 1100.0)]),
        ramps: vec![
            RampConfig {
                id: "ramp-65".into(),
                milepost: at(5.0),
                lanes: 1,
                demand: DemandProfile::constant(800.0),
            },
            RampConfig {
                id: "ramp-59".into(),
                milepost: at(11.0),
                lanes: 2,
                demand: DemandProfile::steps(&[(0.0, 500.0), (1800.0, 700.0)]),
            },
        ],
        corridor: CorridorConfig {
            direction,
            default_max: 70,
            sensor_radius_mi: DEFAULT_SENSOR_RADIUS_MI,
            gantries,
            sensors,
        },
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}
