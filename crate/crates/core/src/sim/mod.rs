//! Cell transmission model freeway simulator.
//!
//! The mainline is a chain of equal-length cells with a triangular fundamental
//! diagram. Vehicles enter through a point queue at the upstream end and
//! through on-ramp point queues that merge with demand-proportional priority.
//! Posted limits lower the free-flow branch of the governed cells in
//! proportion to driver compliance.

mod scenario;

pub use scenario::{
    testing_scenario, training_scenario, DemandProfile, DemandStep, FundamentalDiagram, Geometry, Perturbation,
    RampConfig, ScenarioConfig, SensorNoise, SimConfig, DEFAULT_START_EPOCH,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corridor::{Corridor, Measurement, SpeedLimit};
use crate::error::{Error, Result};
use crate::rng;

/// Length of a demand fluctuation block, seconds.
const NOISE_BLOCK_S: f64 = 300.0;

/// Effective free-flow speed under a posted limit and partial compliance.
pub fn effective_speed(limit_mph: f64, v_free: f64, compliance: f64) -> f64 {
    compliance * limit_mph.min(v_free) + (1.0 - compliance) * v_free
}

#[derive(Debug, Clone)]
struct Ramp {
    cell: usize,
    lanes: f64,
    queue: f64,
    demand: DemandProfile,
    factors: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct SensorAcc {
    flow: f64,
    flow_speed: f64,
    density: f64,
    steps: u64,
}

/// Running totals since the start of the run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimTotals {
    /// Vehicles that arrived at the entry and ramp queues.
    pub inflow: f64,
    /// Vehicles that left through the downstream boundary.
    pub outflow: f64,
    /// Vehicle-hours spent on the mainline cells.
    pub vht_mainline: f64,
    /// Vehicle-hours spent waiting in entry and ramp queues.
    pub vht_queued: f64,
    /// Vehicle-miles travelled on the mainline.
    pub vmt: f64,
}

impl SimTotals {
    pub fn vht(&self) -> f64 {
        self.vht_mainline + self.vht_queued
    }

    /// Space-mean speed over the run, mph.
    pub fn mean_speed(&self) -> f64 {
        if self.vht_mainline > 0.0 {
            self.vmt / self.vht_mainline
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    config: ScenarioConfig,
    corridor: Corridor,
    fd: FundamentalDiagram,
    wave_speed: f64,
    lanes: f64,
    cell_len: f64,
    dt_h: f64,
    density: Vec<f64>,
    outflow: Vec<f64>,
    v_eff: Vec<f64>,
    governing: Vec<Option<usize>>,
    entry_queue: f64,
    main_factors: Vec<f64>,
    ramps: Vec<Ramp>,
    sensor_cells: Vec<usize>,
    acc: Vec<SensorAcc>,
    steps: u64,
    totals: SimTotals,
    noise_rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let corridor = config.corridor.build()?;
        let g = &config.geometry;
        let n_cells = (g.length_mi / g.cell_length_mi).round() as usize;
        if n_cells == 0 {
            return Err(Error::Config("segment shorter than one cell".into()));
        }
        let cell_len = g.length_mi / n_cells as f64;
        let cell_of = |x: f64| ((x / cell_len).floor().max(0.0) as usize).min(n_cells - 1);

        let blocks = (config.sim.horizon / NOISE_BLOCK_S).ceil() as usize + 1;
        let noise = config.sim.demand_noise;
        let factors = |label: &str| -> Vec<f64> {
            if noise == 0.0 {
                return vec![1.0; blocks];
            }
            let mut r = rng::stream(config.sim.seed, label);
            let normal = Normal::new(0.0, noise).expect("finite noise level");
            (0..blocks).map(|_| (1.0 + normal.sample(&mut r)).max(0.0)).collect()
        };

        let ramps = config
            .ramps
            .iter()
            .map(|r| Ramp {
                cell: cell_of(config.distance_along(r.milepost)),
                lanes: f64::from(r.lanes),
                queue: 0.0,
                demand: r.demand.clone(),
                factors: factors(&format!("demand-ramp-{}", r.id)),
            })
            .collect::<Vec<_>>();

        // A gantry governs the cells from its own position down to the next
        // downstream gantry; the most downstream one covers one spacing.
        let xs: Vec<f64> = corridor
            .gantries()
            .iter()
            .map(|gt| config.distance_along(gt.milepost))
            .collect();
        let mut governing = vec![None; n_cells];
        for (gi, &x) in xs.iter().enumerate() {
            let end = if gi == 0 {
                let span = xs.get(1).map_or(0.5, |up| x - up);
                x + span
            } else {
                xs[gi - 1]
            };
            for (c, slot) in governing.iter_mut().enumerate() {
                let centre = (c as f64 + 0.5) * cell_len;
                if centre >= x && centre < end {
                    *slot = Some(gi);
                }
            }
        }

        let sensor_cells = corridor
            .sensors()
            .iter()
            .map(|s| cell_of(config.distance_along(s.milepost)))
            .collect::<Vec<_>>();

        let fd = config.fundamental;
        let mut density = vec![0.0; n_cells];
        if config.sim.warm_start {
            let lanes = f64::from(g.lanes);
            for (c, k) in density.iter_mut().enumerate() {
                let mut flow = config.mainline_demand.flow_at(0.0) * lanes;
                for r in ramps.iter().filter(|r| r.cell <= c) {
                    flow += r.demand.flow_at(0.0) * r.lanes;
                }
                let per_lane = (flow / lanes).min(fd.q_max);
                *k = per_lane / fd.v_free;
            }
        }

        let n_sensors = sensor_cells.len();
        Ok(Simulator {
            corridor,
            fd,
            wave_speed: fd.wave_speed(),
            lanes: f64::from(g.lanes),
            cell_len,
            dt_h: config.sim.dt / 3600.0,
            outflow: vec![0.0; n_cells],
            v_eff: vec![fd.v_free; n_cells],
            governing,
            entry_queue: 0.0,
            main_factors: factors("demand-mainline"),
            ramps,
            sensor_cells,
            acc: vec![SensorAcc::default(); n_sensors],
            steps: 0,
            totals: SimTotals::default(),
            noise_rng: rng::stream(config.sim.seed, "sensor-noise"),
            density,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn corridor(&self) -> &Corridor {
        &self.corridor
    }

    pub fn num_cells(&self) -> usize {
        self.density.len()
    }

    pub fn cell_length(&self) -> f64 {
        self.cell_len
    }

    pub fn densities(&self) -> &[f64] {
        &self.density
    }

    pub fn effective_speeds(&self) -> &[f64] {
        &self.v_eff
    }

    pub fn fundamental(&self) -> &FundamentalDiagram {
        &self.fd
    }

    /// Seconds since the start of the run.
    pub fn time(&self) -> f64 {
        self.steps as f64 * self.config.sim.dt
    }

    pub fn timestamp(&self) -> i64 {
        self.config.sim.start_epoch + self.time().round() as i64
    }

    pub fn is_finished(&self) -> bool {
        self.time() >= self.config.sim.horizon - 1e-9
    }

    pub fn totals(&self) -> SimTotals {
        self.totals
    }

    /// Overrides a cell's density, e.g. to set up an experiment.
    pub fn set_density(&mut self, cell: usize, density: f64) {
        self.density[cell] = density.clamp(0.0, self.fd.k_jam);
    }

    /// Vehicles on the mainline plus those waiting in entry and ramp queues.
    pub fn total_vehicles(&self) -> f64 {
        let on_road: f64 = self.density.iter().map(|k| k * self.cell_len * self.lanes).sum();
        on_road + self.entry_queue + self.ramps.iter().map(|r| r.queue).sum::<f64>()
    }

    /// Posts one limit per gantry (corridor order, most downstream first).
    pub fn apply_speed_limits(&mut self, limits: &[SpeedLimit]) -> Result<()> {
        if limits.len() != self.corridor.len() {
            return Err(Error::LimitCount {
                expected: self.corridor.len(),
                got: limits.len(),
            });
        }
        let c = self.config.sim.compliance;
        for (v, gov) in self.v_eff.iter_mut().zip(&self.governing) {
            *v = match gov {
                Some(gi) => effective_speed(f64::from(limits[*gi].mph()), self.fd.v_free, c),
                None => self.fd.v_free,
            };
        }
        Ok(())
    }

    /// Removes every posted limit.
    pub fn clear_speed_limits(&mut self) {
        self.v_eff.fill(self.fd.v_free);
    }

    fn demand_factor(factors: &[f64], t: f64) -> f64 {
        let block = (t / NOISE_BLOCK_S) as usize;
        factors.get(block).copied().unwrap_or(1.0)
    }

    /// Advances the model by one `dt`.
    pub fn step(&mut self) {
        let t = self.time();
        let h = self.dt_h;
        let n = self.density.len();
        let q_cap = self.fd.q_max * self.lanes;

        let main_arrivals =
            self.config.mainline_demand.flow_at(t) * self.lanes * Self::demand_factor(&self.main_factors, t) * h;
        self.entry_queue += main_arrivals;
        self.totals.inflow += main_arrivals;
        for r in &mut self.ramps {
            let arrivals = r.demand.flow_at(t) * r.lanes * Self::demand_factor(&r.factors, t) * h;
            r.queue += arrivals;
            self.totals.inflow += arrivals;
        }

        let sending: Vec<f64> = self
            .density
            .iter()
            .zip(&self.v_eff)
            .map(|(k, v)| (v * k).min(self.fd.q_max) * self.lanes)
            .collect();
        let receiving: Vec<f64> = self
            .density
            .iter()
            .map(|k| (self.wave_speed * (self.fd.k_jam - k)).min(self.fd.q_max) * self.lanes)
            .collect();

        // inflow[c] is the total flow (veh/hr) entering cell c this step.
        let mut inflow = vec![0.0; n];
        let mut ramp_flow = vec![0.0; self.ramps.len()];
        let mut entry_flow = 0.0;
        for c in 0..n {
            let upstream = if c == 0 {
                (self.entry_queue / h).min(q_cap)
            } else {
                sending[c - 1]
            };
            let ramp_demand: f64 = self
                .ramps
                .iter()
                .filter(|r| r.cell == c)
                .map(|r| (r.queue / h).min(self.fd.q_max * r.lanes))
                .sum();
            let total = upstream + ramp_demand;
            let share = if total > receiving[c] && total > 0.0 {
                receiving[c] / total
            } else {
                1.0
            };
            let from_upstream = upstream * share;
            if c == 0 {
                entry_flow = from_upstream;
            } else {
                self.outflow[c - 1] = from_upstream;
            }
            inflow[c] = from_upstream;
            for (ri, r) in self.ramps.iter().enumerate().filter(|(_, r)| r.cell == c) {
                let f = (r.queue / h).min(self.fd.q_max * r.lanes) * share;
                ramp_flow[ri] = f;
                inflow[c] += f;
            }
        }
        let exit_capacity = self.config.geometry.downstream_capacity_vph.unwrap_or(f64::INFINITY);
        self.outflow[n - 1] = sending[n - 1].min(exit_capacity);

        self.entry_queue = (self.entry_queue - entry_flow * h).max(0.0);
        for (r, f) in self.ramps.iter_mut().zip(&ramp_flow) {
            r.queue = (r.queue - f * h).max(0.0);
        }
        let queued = self.entry_queue + self.ramps.iter().map(|r| r.queue).sum::<f64>();

        let scale = h / (self.cell_len * self.lanes);
        let mut on_road = 0.0;
        for c in 0..n {
            let k = self.density[c] + (inflow[c] - self.outflow[c]) * scale;
            self.density[c] = k.clamp(0.0, self.fd.k_jam);
            on_road += self.density[c] * self.cell_len * self.lanes;
        }
        self.totals.outflow += self.outflow[n - 1] * h;
        self.totals.vht_mainline += on_road * h;
        self.totals.vht_queued += queued * h;
        self.totals.vmt += self.outflow.iter().sum::<f64>() * h * self.cell_len;

        for (acc, &cell) in self.acc.iter_mut().zip(&self.sensor_cells) {
            let k = self.density[cell];
            let f = self.outflow[cell];
            let speed = if k > 0.0 {
                (f / (k * self.lanes)).min(self.v_eff[cell])
            } else {
                self.v_eff[cell]
            };
            acc.flow += f;
            acc.flow_speed += f * speed;
            acc.density += k;
            acc.steps += 1;
        }
        self.steps += 1;
    }

    /// Steps until `seconds` more have elapsed or the horizon is reached.
    pub fn run_for(&mut self, seconds: f64) {
        let n = (seconds / self.config.sim.dt).round() as u64;
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.step();
        }
    }

    /// Space-mean speed (mph) over cells whose centres lie in `[from_mi, to_mi)`
    /// measured from the segment entry, using the most recent step's flows.
    pub fn segment_speed(&self, from_mi: f64, to_mi: f64) -> f64 {
        let mut flow = 0.0;
        let mut vehicles = 0.0;
        let mut free = 0.0;
        let mut count = 0.0;
        for c in 0..self.density.len() {
            let centre = (c as f64 + 0.5) * self.cell_len;
            if centre >= from_mi && centre < to_mi {
                let on_cell = self.density[c] * self.lanes;
                // Flow and density straddle the update; no cell moves faster than v_eff.
                flow += self.outflow[c].min(self.v_eff[c] * on_cell);
                vehicles += on_cell;
                free += self.v_eff[c];
                count += 1.0;
            }
        }
        if vehicles > 0.0 {
            flow / vehicles
        } else if count > 0.0 {
            free / count
        } else {
            0.0
        }
    }

    /// Aggregated readings for every sensor (corridor order) since the previous
    /// readout, then resets the aggregation window.
    pub fn take_measurements(&mut self) -> Vec<Measurement> {
        let ts = self.timestamp();
        let noise = self.config.sim.sensor_noise;
        let mut out = Vec::with_capacity(self.acc.len());
        for (si, acc) in self.acc.iter_mut().enumerate() {
            let cell = self.sensor_cells[si];
            let mean_k = if acc.steps > 0 {
                acc.density / acc.steps as f64
            } else {
                self.density[cell]
            };
            let mut speed = if acc.flow > 0.0 {
                acc.flow_speed / acc.flow
            } else if mean_k > 0.0 {
                0.0
            } else {
                self.v_eff[cell]
            };
            let mut occ = mean_k / self.fd.k_jam;
            if noise.speed_sd > 0.0 {
                speed += noise.speed_sd * standard_normal(&mut self.noise_rng);
            }
            if noise.occupancy_sd > 0.0 {
                occ += noise.occupancy_sd * standard_normal(&mut self.noise_rng);
            }
            out.push(Measurement::new(
                self.corridor.sensors()[si].id.clone(),
                ts,
                speed.clamp(0.0, 100.0),
                occ.clamp(0.0, 1.0),
            ));
            *acc = SensorAcc::default();
        }
        out
    }
}

fn standard_normal(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the stream layout independent of rand_distr internals.
    let u1: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = r.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
