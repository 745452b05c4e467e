//! Action masking and action selection over the five-value speed limit grid.

use rand::Rng;

use crate::corridor::{Observation, SpeedLimit, NUM_ACTIONS};
use crate::error::{Error, Result};

pub type Logits = [f64; NUM_ACTIONS];
pub type Distribution = [f64; NUM_ACTIONS];

/// Which grid actions are allowed. `true` marks a valid action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionMask(pub [bool; NUM_ACTIONS]);

impl ActionMask {
    pub const ALL: ActionMask = ActionMask([true; NUM_ACTIONS]);

    /// Mask allowing every action except those in `invalid`.
    pub fn excluding(invalid: &[SpeedLimit]) -> Self {
        let mut m = [true; NUM_ACTIONS];
        for a in invalid {
            m[a.index()] = false;
        }
        ActionMask(m)
    }

    pub fn is_valid(&self, action: SpeedLimit) -> bool {
        self.0[action.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&v| v)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn valid_actions(&self) -> impl Iterator<Item = SpeedLimit> + '_ {
        SpeedLimit::GRID.into_iter().filter(|a| self.is_valid(*a))
    }
}

/// Masked softmax: invalid actions get probability exactly zero, the rest
/// are normalized among themselves.
pub fn masked_softmax(logits: &Logits, mask: &ActionMask) -> Result<Distribution> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let max = logits
        .iter()
        .zip(mask.0)
        .filter(|(_, ok)| *ok)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; NUM_ACTIONS];
    let mut total = 0.0;
    for i in 0..NUM_ACTIONS {
        if mask.0[i] {
            probs[i] = (logits[i] - max).exp();
            total += probs[i];
        }
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Log-probabilities of the masked distribution (`-inf` for invalid actions).
pub fn masked_log_softmax(logits: &Logits, mask: &ActionMask) -> Result<Distribution> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let max = logits
        .iter()
        .zip(mask.0)
        .filter(|(_, ok)| *ok)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .zip(mask.0)
            .filter(|(_, ok)| *ok)
            .map(|(l, _)| (l - max).exp())
            .sum::<f64>()
            .ln();
    let mut out = [f64::NEG_INFINITY; NUM_ACTIONS];
    for i in 0..NUM_ACTIONS {
        if mask.0[i] {
            out[i] = logits[i] - lse;
        }
    }
    Ok(out)
}

/// Most probable action; ties go to the lower speed limit.
pub fn greedy(probs: &Distribution) -> SpeedLimit {
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    SpeedLimit::from_index(best)
}

/// Draws an action. Zero-probability actions are never returned.
pub fn sample<R: Rng + ?Sized>(probs: &Distribution, rng: &mut R) -> SpeedLimit {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_valid = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_valid = i;
        cum += p;
        if u < cum {
            return SpeedLimit::from_index(i);
        }
    }
    SpeedLimit::from_index(last_valid)
}

/// A decentralized speed limit policy. Homogeneous policies ignore `agent`;
/// it is passed so that scripted stand-ins can address individual gantries.
pub trait Policy: Send + Sync {
    fn logits(&self, agent: usize, obs: &Observation) -> Logits;

    fn distribution(&self, agent: usize, obs: &Observation, mask: &ActionMask) -> Result<Distribution> {
        masked_softmax(&self.logits(agent, obs), mask)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn logits(&self, agent: usize, obs: &Observation) -> Logits {
        (**self).logits(agent, obs)
    }
}

impl<P: Policy + ?Sized> Policy for std::sync::Arc<P> {
    fn logits(&self, agent: usize, obs: &Observation) -> Logits {
        (**self).logits(agent, obs)
    }
}

fn preference(action: SpeedLimit) -> Logits {
    let mut l = [0.0; NUM_ACTIONS];
    l[action.index()] = 10.0;
    l
}

/// Prefers one action for every agent.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub SpeedLimit);

impl Policy for ConstantPolicy {
    fn logits(&self, _agent: usize, _obs: &Observation) -> Logits {
        preference(self.0)
    }
}

/// Prefers a fixed action per agent (most downstream first); agents beyond
/// the script prefer the last entry.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy(pub Vec<SpeedLimit>);

impl Policy for ScriptedPolicy {
    fn logits(&self, agent: usize, _obs: &Observation) -> Logits {
        let a = self.0.get(agent).or(self.0.last()).copied().unwrap_or(SpeedLimit::MAX);
        preference(a)
    }
}

/// Arbitrary logits as a function of the observation; handy for tests.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(usize, &Observation) -> Logits + Send + Sync,
{
    fn logits(&self, agent: usize, obs: &Observation) -> Logits {
        (self.0)(agent, obs)
    }
}
