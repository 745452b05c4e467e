//! Parameter-shared MAPPO training loop and policy evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{run_episode, Actor, EpisodeStats};
use super::gae::compute_gae;
use super::mappo::{mappo_update, Optimizers, Sample};
use super::reward::RewardWeights;
use super::{Hyperparams, PolicyParams};
use crate::error::Result;
use crate::rng;
use crate::sim::ScenarioConfig;

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub initial: PolicyParams,
    pub curve: Vec<CurvePoint>,
}

/// Initial parameters for a training run; depends only on the seed and shapes.
pub fn initial_params(scenario: &ScenarioConfig, hyper: &Hyperparams) -> PolicyParams {
    let mut r = rng::stream(hyper.seed, "policy-init");
    PolicyParams::new(scenario.corridor.gantries.len(), &hyper.hidden, &mut r)
}

/// Trains on `scenario`, calling `on_iteration` after each update (for
/// checkpointing and progress reporting). Deterministic given `hyper.seed`.
pub fn train<F>(
    scenario: &ScenarioConfig,
    hyper: &Hyperparams,
    weights: &RewardWeights,
    mut on_iteration: F,
) -> Result<TrainOutput>
where
    F: FnMut(&CurvePoint, &PolicyParams) -> Result<()>,
{
    hyper.validate()?;
    weights.validate()?;
    scenario.validate()?;
    let initial = initial_params(scenario, hyper);
    let mut params = initial.clone();
    let mut optimizers = Optimizers::new(&params, hyper);
    let mut update_rng = rng::stream(hyper.seed, "update");
    let mut curve = Vec::with_capacity(hyper.iterations);
    for iteration in 0..hyper.iterations {
        let episodes: Vec<u64> = (0..hyper.episodes_per_iteration)
            .map(|e| (iteration * hyper.episodes_per_iteration + e) as u64)
            .collect();
        let snapshot = &params;
        let results: Vec<(EpisodeStats, Vec<Sample>)> = episodes
            .par_iter()
            .map(|&e| collect(snapshot, scenario, hyper, weights, e))
            .collect::<Result<_>>()?;
        let mean_reward = results.iter().map(|(s, _)| s.reward).sum::<f64>() / results.len() as f64;
        let samples: Vec<Sample> = results.into_iter().flat_map(|(_, s)| s).collect();
        let diag = mappo_update(&mut params, &mut optimizers, &samples, hyper, &mut update_rng)?;
        let point = CurvePoint {
            iteration,
            mean_reward,
            actor_loss: diag.actor_loss,
            value_loss: diag.value_loss,
            entropy: diag.entropy,
            approx_kl: diag.approx_kl,
            clip_fraction: diag.clip_fraction,
        };
        on_iteration(&point, &params)?;
        curve.push(point);
    }
    Ok(TrainOutput { params, initial, curve })
}

fn collect(
    params: &PolicyParams,
    scenario: &ScenarioConfig,
    hyper: &Hyperparams,
    weights: &RewardWeights,
    episode: u64,
) -> Result<(EpisodeStats, Vec<Sample>)> {
    let sc = scenario
        .clone()
        .with_seed(rng::indexed_seed(hyper.seed, "train-demand", episode));
    let mut sampler = rng::indexed_stream(hyper.seed, "train-actions", episode);
    let (stats, trajectories) = run_episode(
        &sc,
        *weights,
        hyper.mask_during_training,
        &mut Actor::Sample(params, &mut sampler),
    )?;
    let mut samples = Vec::new();
    for traj in trajectories {
        let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = traj.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, 0.0, hyper.gamma, hyper.lambda);
        for ((t, a), r) in traj.into_iter().zip(adv).zip(ret) {
            samples.push(Sample {
                observation: t.observation,
                critic_input: t.critic_input,
                action: t.action,
                mask: t.mask,
                old_log_prob: t.log_prob,
                advantage: a,
                ret: r,
            });
        }
    }
    Ok((stats, samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Stochastic masked policy, as during training.
    Sampled,
    /// Masked argmax, as at deployment.
    Greedy,
    /// Every gantry posts the corridor default maximum.
    NoControl,
}

/// Runs `episodes` seeded evaluation episodes. Episode `k` uses the same
/// demand realization for every policy and mode, so results pair up.
pub fn evaluate(
    params: &PolicyParams,
    scenario: &ScenarioConfig,
    weights: &RewardWeights,
    episodes: usize,
    seed: u64,
    mode: EvalMode,
) -> Result<Vec<EpisodeStats>> {
    (0..episodes as u64)
        .into_par_iter()
        .map(|e| {
            let sc = scenario.clone().with_seed(rng::indexed_seed(seed, "eval-demand", e));
            let mut sampler = rng::indexed_stream(seed, "eval-actions", e);
            let mut actor = match mode {
                EvalMode::Sampled => Actor::Sample(params, &mut sampler),
                EvalMode::Greedy => Actor::Greedy(params),
                EvalMode::NoControl => Actor::NoControl,
            };
            Ok(run_episode(&sc, *weights, true, &mut actor)?.0)
        })
        .collect()
}

/// Writes the curve as CSV with a header row.
pub fn write_curve<W: std::io::Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
