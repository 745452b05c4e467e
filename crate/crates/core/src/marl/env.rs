//! Episode rollouts of the multi-agent policy on a simulated corridor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{greedy, sample, ActionMask, Policy};
use super::reward::{reward, RewardWeights};
use super::{critic_input, PolicyParams, Transition};
use crate::corridor::{Corridor, Measurement, Observation, SpeedLimit};
use crate::error::Result;
use crate::guards::valid_action_mask;
use crate::sim::{ScenarioConfig, Simulator};

/// Summary of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// Undiscounted reward summed over the episode, averaged over agents.
    pub reward: f64,
    /// Vehicle-hours traveled, including time spent in entry queues.
    pub vht: f64,
    /// Vehicle-miles per mainline vehicle-hour.
    pub mean_speed: f64,
    pub decision_steps: usize,
}

/// How agents pick actions during an episode.
pub enum Actor<'a, R: Rng + ?Sized> {
    /// Draw from the masked policy distribution.
    Sample(&'a PolicyParams, &'a mut R),
    /// Masked argmax, ties to the lower limit.
    Greedy(&'a dyn Policy),
    /// Every gantry posts the corridor default maximum.
    NoControl,
}

/// A simulator that advances one sensor interval per decision step.
pub struct VslEnv {
    sim: Simulator,
    measurements: Vec<Measurement>,
    weights: RewardWeights,
    a_diff: u32,
    mask_actions: bool,
}

impl VslEnv {
    pub fn new(scenario: &ScenarioConfig, weights: RewardWeights, mask_actions: bool) -> Result<Self> {
        let mut sim = Simulator::new(scenario)?;
        let measurements = sim.take_measurements();
        Ok(VslEnv {
            sim,
            measurements,
            weights,
            a_diff: 10,
            mask_actions,
        })
    }

    pub fn corridor(&self) -> &Corridor {
        self.sim.corridor()
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn is_done(&self) -> bool {
        self.sim.is_finished()
    }

    fn mask(&self, downstream: SpeedLimit) -> ActionMask {
        if self.mask_actions {
            valid_action_mask(downstream, self.a_diff)
        } else {
            ActionMask::ALL
        }
    }

    /// Chooses every agent's action downstream first, applies them, advances
    /// one sensor interval and returns one transition per agent. Values are
    /// filled in only when sampling from a trained policy.
    pub fn step<R: Rng + ?Sized>(&mut self, actor: &mut Actor<'_, R>) -> Result<Vec<Transition>> {
        let corridor = self.sim.corridor().clone();
        let n = corridor.len();
        let mut observations: Vec<Observation> = Vec::with_capacity(n);
        let mut actions: Vec<SpeedLimit> = Vec::with_capacity(n);
        let mut partial = Vec::with_capacity(n);
        for i in 0..n {
            let downstream = if i == 0 { corridor.default_max() } else { actions[i - 1] };
            let mask = self.mask(downstream);
            let obs = corridor.observation(i, downstream, &self.measurements);
            let (action, log_prob) = match actor {
                Actor::Sample(params, rng) => {
                    let dist = params.distribution(i, &obs, &mask)?;
                    let a = sample(&dist, *rng);
                    (a, dist[a.index()].ln())
                }
                Actor::Greedy(policy) => (greedy(&policy.distribution(i, &obs, &mask)?), 0.0),
                Actor::NoControl => (corridor.default_max(), 0.0),
            };
            let own = &self.measurements[corridor.critical_sensors()[i]];
            let r = reward(action, downstream, own.speed, own.occupancy, &self.weights);
            observations.push(obs);
            actions.push(action);
            partial.push((mask, log_prob, r));
        }
        let mut transitions = Vec::with_capacity(n);
        for (i, (mask, log_prob, r)) in partial.into_iter().enumerate() {
            let x = critic_input(&observations, i);
            let value = match actor {
                Actor::Sample(params, _) => params.value(&x),
                _ => 0.0,
            };
            transitions.push(Transition {
                agent: i,
                observation: observations[i],
                critic_input: x,
                action: actions[i].index(),
                log_prob,
                reward: r,
                value,
                done: false,
                mask,
            });
        }
        if matches!(actor, Actor::NoControl) {
            self.sim.clear_speed_limits();
        } else {
            self.sim.apply_speed_limits(&actions)?;
        }
        let interval = self.sim.config().sim.sensor_interval;
        self.sim.run_for(interval);
        self.measurements = self.sim.take_measurements();
        if self.sim.is_finished() {
            for t in &mut transitions {
                t.done = true;
            }
        }
        Ok(transitions)
    }
}

/// Runs one full episode; returns its statistics and the per-agent trajectories.
pub fn run_episode<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    weights: RewardWeights,
    mask_actions: bool,
    actor: &mut Actor<'_, R>,
) -> Result<(EpisodeStats, Vec<Vec<Transition>>)> {
    let mut env = VslEnv::new(scenario, weights, mask_actions)?;
    let n = env.corridor().len();
    let mut trajectories: Vec<Vec<Transition>> = vec![Vec::new(); n];
    let mut total = 0.0;
    let mut steps = 0;
    while !env.is_done() {
        for t in env.step(actor)? {
            total += t.reward;
            trajectories[t.agent].push(t);
        }
        steps += 1;
    }
    let totals = env.simulator().totals();
    let stats = EpisodeStats {
        reward: if n > 0 { total / n as f64 } else { 0.0 },
        vht: totals.vht(),
        mean_speed: totals.mean_speed(),
        decision_steps: steps,
    };
    Ok((stats, trajectories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::policy::ConstantPolicy;
    use crate::sim::training_scenario;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn short() -> ScenarioConfig {
        let mut s = training_scenario();
        s.sim.horizon = 600.0;
        s
    }

    #[test]
    fn episode_shape() {
        let s = short();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = PolicyParams::new(8, &[8], &mut rng);
        let mut sampler = ChaCha8Rng::seed_from_u64(1);
        let (stats, traj) = run_episode(
            &s,
            RewardWeights::default(),
            true,
            &mut Actor::Sample(&params, &mut sampler),
        )
        .unwrap();
        assert_eq!(stats.decision_steps, 10);
        assert_eq!(traj.len(), 8);
        for agent in &traj {
            assert_eq!(agent.len(), 10);
            assert!(agent.last().unwrap().done);
            assert!(agent[..9].iter().all(|t| !t.done));
            assert!(agent.iter().all(|t| t.mask.0[t.action] && t.log_prob.is_finite()));
        }
    }

    #[test]
    fn sampled_actions_respect_the_step_down_bound() {
        let s = short();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = PolicyParams::new(8, &[8], &mut rng);
        for w in params.actor.params_mut() {
            *w = rng.random_range(-3.0..3.0);
        }
        let mut sampler = ChaCha8Rng::seed_from_u64(5);
        let (_, traj) = run_episode(
            &s,
            RewardWeights::default(),
            true,
            &mut Actor::Sample(&params, &mut sampler),
        )
        .unwrap();
        for t in 0..traj[0].len() {
            let mut downstream = 70;
            for agent in &traj {
                let a = SpeedLimit::from_index(agent[t].action).mph();
                assert!(a <= downstream + 10);
                downstream = a;
            }
        }
    }

    #[test]
    fn no_control_matches_all_seventy() {
        let s = short();
        let (a, _) = run_episode::<ChaCha8Rng>(&s, RewardWeights::default(), true, &mut Actor::NoControl).unwrap();
        let p = ConstantPolicy(SpeedLimit::MAX);
        let (b, _) = run_episode::<ChaCha8Rng>(&s, RewardWeights::default(), true, &mut Actor::Greedy(&p)).unwrap();
        assert_eq!(a, b);
    }
}
