//! Homogeneous multi-agent policy with a centralized critic, trained by MAPPO.

pub mod checkpoint;
pub mod env;
pub mod gae;
pub mod mappo;
pub mod nn;
pub mod policy;
pub mod reward;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corridor::{Observation, NUM_ACTIONS};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use env::{EpisodeStats, VslEnv};
pub use gae::{compute_gae, normalize};
pub use mappo::{mappo_update, Diagnostics, Sample};
pub use nn::{Adam, Mlp};
pub use policy::{ActionMask, ConstantPolicy, FnPolicy, Policy, ScriptedPolicy};
pub use reward::{reward, RewardTerms, RewardWeights};
pub use train::{evaluate, train, CurvePoint, EvalMode, TrainOutput};

pub const OBS_DIM: usize = 5;

/// Shared actor plus centralized critic.
///
/// The critic reads every agent's observation followed by a one-hot agent
/// index and returns that agent's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic: Mlp,
    pub num_agents: usize,
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(num_agents: usize, hidden: &[usize], rng: &mut R) -> Self {
        let actor_sizes: Vec<usize> = std::iter::once(OBS_DIM)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(NUM_ACTIONS))
            .collect();
        let critic_sizes: Vec<usize> = std::iter::once(critic_input_size(num_agents))
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        PolicyParams {
            actor: Mlp::new(&actor_sizes, 0.01, rng),
            critic: Mlp::new(&critic_sizes, 1.0, rng),
            num_agents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.actor.input_size() != OBS_DIM || self.actor.output_size() != NUM_ACTIONS {
            return Err(Error::Checkpoint(format!(
                "actor maps {} -> {}, expected {OBS_DIM} -> {NUM_ACTIONS}",
                self.actor.input_size(),
                self.actor.output_size()
            )));
        }
        if self.critic.input_size() != critic_input_size(self.num_agents) || self.critic.output_size() != 1 {
            return Err(Error::Checkpoint(format!(
                "critic maps {} -> {}, expected {} -> 1",
                self.critic.input_size(),
                self.critic.output_size(),
                critic_input_size(self.num_agents)
            )));
        }
        Ok(())
    }

    pub fn value(&self, critic_input: &[f64]) -> f64 {
        self.critic.forward(critic_input)[0]
    }
}

impl Policy for PolicyParams {
    fn logits(&self, _agent: usize, obs: &Observation) -> policy::Logits {
        let out = self.actor.forward(obs.as_slice());
        let mut l = [0.0; NUM_ACTIONS];
        l.copy_from_slice(&out);
        l
    }
}

pub fn critic_input_size(num_agents: usize) -> usize {
    num_agents * OBS_DIM + num_agents
}

/// Global state for `agent`: all observations then a one-hot agent index.
pub fn critic_input(observations: &[Observation], agent: usize) -> Vec<f64> {
    let n = observations.len();
    let mut x = Vec::with_capacity(critic_input_size(n));
    for o in observations {
        x.extend_from_slice(o.as_slice());
    }
    x.extend((0..n).map(|i| if i == agent { 1.0 } else { 0.0 }));
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Episodes collected per training iteration.
    pub episodes_per_iteration: usize,
    pub iterations: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    /// Apply invalid action masking while collecting rollouts.
    pub mask_during_training: bool,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            epochs: 4,
            minibatch_size: 512,
            episodes_per_iteration: 4,
            iterations: 40,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            mask_during_training: true,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("hyperparameter {what} out of range")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rate");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.episodes_per_iteration == 0 {
            return bad("epochs/minibatch_size/episodes_per_iteration");
        }
        if self.entropy_coef < 0.0 || self.max_grad_norm <= 0.0 {
            return bad("entropy_coef/max_grad_norm");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden");
        }
        Ok(())
    }
}

/// One agent-step of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub agent: usize,
    pub observation: Observation,
    pub critic_input: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    pub mask: ActionMask,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::policy::masked_softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::new(8, &[64, 64], &mut rng);
        p.validate().unwrap();
        assert_eq!(p.actor.sizes(), &[5, 64, 64, 5]);
        assert_eq!(p.critic.sizes(), &[48, 64, 64, 1]);
        let obs: Vec<Observation> = (0..8).map(|i| Observation([i as f64 / 8.0; 5])).collect();
        let x = critic_input(&obs, 3);
        assert_eq!(x.len(), 48);
        assert_eq!(&x[40..], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_net_distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = PolicyParams::new(2, &[8], &mut rng);
        for w in p.actor.params_mut() {
            *w = rng.random_range(-2.0..2.0);
        }
        for _ in 0..100 {
            let obs = Observation(std::array::from_fn(|_| rng.random::<f64>()));
            let d = masked_softmax(&p.logits(0, &obs), &ActionMask::ALL).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn homogeneous_agents_share_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::new(8, &[16], &mut rng);
        let obs = Observation([0.5, 0.2, 0.3, 0.9, 0.1]);
        let first = p.logits(0, &obs);
        assert!((1..8).all(|a| p.logits(a, &obs) == first));
    }

    #[test]
    fn hyperparams_validate() {
        Hyperparams::default().validate().unwrap();
        let h = Hyperparams {
            gamma: 0.0,
            ..Hyperparams::default()
        };
        assert!(h.validate().is_err());
    }
}
