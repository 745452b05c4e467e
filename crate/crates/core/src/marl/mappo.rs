//! Clipped-surrogate policy update with a centralized value function.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gae::normalize;
use super::nn::{Adam, Mlp};
use super::policy::{masked_log_softmax, ActionMask};
use super::{Hyperparams, PolicyParams};
use crate::corridor::{Observation, NUM_ACTIONS};
use crate::error::{Error, Result};

/// One agent-step ready for the update.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub observation: Observation,
    pub critic_input: Vec<f64>,
    pub action: usize,
    pub mask: ActionMask,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of `old_log_prob - new_log_prob` after the update.
    pub approx_kl: f64,
    /// Share of samples whose ratio left the clip range after the update.
    pub clip_fraction: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

impl Diagnostics {
    fn check(&self) -> Result<()> {
        let all = [
            self.actor_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clip_fraction,
            self.actor_grad_norm,
            self.critic_grad_norm,
        ];
        if all.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{self:?}")))
        }
    }
}

/// Adam state for both networks; lives across updates.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(params: &PolicyParams, hyper: &Hyperparams) -> Self {
        let mut actor = Adam::new(params.actor.num_params(), hyper.actor_lr);
        let mut critic = Adam::new(params.critic.num_params(), hyper.critic_lr);
        actor.max_grad_norm = Some(hyper.max_grad_norm);
        critic.max_grad_norm = Some(hyper.max_grad_norm);
        Optimizers { actor, critic }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ActorStats {
    pub loss: f64,
    pub entropy: f64,
}

fn logits_of(out: &[f64]) -> [f64; NUM_ACTIONS] {
    let mut l = [0.0; NUM_ACTIONS];
    l.copy_from_slice(out);
    l
}

/// Mean clipped-surrogate loss minus the entropy bonus, and its gradient.
pub fn actor_loss_grad(actor: &Mlp, batch: &[&Sample], clip: f64, entropy_coef: f64) -> Result<(ActorStats, Vec<f64>)> {
    let mut grads = vec![0.0; actor.num_params()];
    let mut stats = ActorStats::default();
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let trace = actor.forward_trace(s.observation.as_slice());
        let logp = masked_log_softmax(&logits_of(&trace.output), &s.mask)?;
        let ratio = (logp[s.action] - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * s.advantage;
        let surrogate = unclipped.min(clipped);
        let d_logp = if unclipped <= clipped { unclipped } else { 0.0 };
        let entropy: f64 = -logp.iter().filter(|l| l.is_finite()).map(|l| l.exp() * l).sum::<f64>();
        stats.loss += scale * (-surrogate - entropy_coef * entropy);
        stats.entropy += scale * entropy;
        let mut g_out = [0.0; NUM_ACTIONS];
        for j in 0..NUM_ACTIONS {
            if !s.mask.0[j] {
                continue;
            }
            let p = logp[j].exp();
            let indicator = if j == s.action { 1.0 } else { 0.0 };
            g_out[j] = scale * (-d_logp * (indicator - p) + entropy_coef * p * (logp[j] + entropy));
        }
        actor.backward(&trace, &g_out, &mut grads);
    }
    Ok((stats, grads))
}

/// Mean squared value error (halved) and its gradient.
pub fn critic_loss_grad(critic: &Mlp, batch: &[&Sample]) -> (f64, Vec<f64>) {
    let mut grads = vec![0.0; critic.num_params()];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let trace = critic.forward_trace(&s.critic_input);
        let err = trace.output[0] - s.ret;
        loss += scale * 0.5 * err * err;
        critic.backward(&trace, &[scale * err], &mut grads);
    }
    (loss, grads)
}

/// Runs `hyper.epochs` passes of shuffled minibatch updates over `samples`.
/// Advantages are normalized over the whole batch first.
pub fn mappo_update<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    optimizers: &mut Optimizers,
    samples: &[Sample],
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<Diagnostics> {
    if samples.is_empty() {
        return Err(Error::Empty("update batch"));
    }
    let mut batch = samples.to_vec();
    let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    normalize(&mut adv);
    for (s, a) in batch.iter_mut().zip(adv) {
        s.advantage = a;
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut diag = Diagnostics::default();
    let mut minibatches = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.minibatch_size) {
            let mb: Vec<&Sample> = chunk.iter().map(|&i| &batch[i]).collect();
            let (stats, g_actor) = actor_loss_grad(&params.actor, &mb, hyper.clip, hyper.entropy_coef)?;
            let (value_loss, g_critic) = critic_loss_grad(&params.critic, &mb);
            let step = Diagnostics {
                actor_loss: stats.loss,
                value_loss,
                entropy: stats.entropy,
                actor_grad_norm: optimizers.actor.step(params.actor.params_mut(), &g_actor),
                critic_grad_norm: optimizers.critic.step(params.critic.params_mut(), &g_critic),
                ..Diagnostics::default()
            };
            step.check()?;
            diag.actor_loss += step.actor_loss;
            diag.value_loss += step.value_loss;
            diag.entropy += step.entropy;
            diag.actor_grad_norm += step.actor_grad_norm;
            diag.critic_grad_norm += step.critic_grad_norm;
            minibatches += 1;
        }
    }
    let m = minibatches as f64;
    diag.actor_loss /= m;
    diag.value_loss /= m;
    diag.entropy /= m;
    diag.actor_grad_norm /= m;
    diag.critic_grad_norm /= m;

    let mut clipped = 0usize;
    for s in &batch {
        let logp = masked_log_softmax(&logits_of(&params.actor.forward(s.observation.as_slice())), &s.mask)?;
        let diff = s.old_log_prob - logp[s.action];
        diag.approx_kl += diff;
        if ((-diff).exp() - 1.0).abs() > hyper.clip {
            clipped += 1;
        }
    }
    diag.approx_kl /= batch.len() as f64;
    diag.clip_fraction = clipped as f64 / batch.len() as f64;
    diag.check()?;
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::policy::{masked_softmax, sample as draw};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_samples(actor: &Mlp, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let obs = Observation(std::array::from_fn(|_| rng.random::<f64>()));
                let mut mask = ActionMask(std::array::from_fn(|_| rng.random_bool(0.7)));
                mask.0[i % NUM_ACTIONS] = true;
                let action = i % NUM_ACTIONS;
                let logp = masked_log_softmax(&logits_of(&actor.forward(obs.as_slice())), &mask).unwrap();
                // Ratios near 1 keep every sample away from the clip kinks,
                // except every fifth which is pushed far outside.
                let shift = if i % 5 == 4 { 1.5 } else { rng.random_range(-0.05..0.05) };
                Sample {
                    observation: obs,
                    critic_input: (0..6).map(|_| rng.random::<f64>()).collect(),
                    action,
                    mask,
                    old_log_prob: logp[action] + shift,
                    advantage: rng.random_range(-2.0..2.0),
                    ret: rng.random_range(-1.0..1.0),
                }
            })
            .collect()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                let abs = (a - n).abs();
                if abs < 1e-10 {
                    0.0
                } else {
                    abs / a.abs().max(n.abs())
                }
            })
            .fold(0.0, f64::max)
    }

    fn numeric(net: &Mlp, f: impl Fn(&Mlp) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..net.num_params())
            .map(|i| {
                let mut p = net.clone();
                p.params_mut()[i] += h;
                let mut m = net.clone();
                m.params_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let actor = Mlp::new(&[5, 2, 5], 1.0, &mut rng);
        let samples = random_samples(&actor, 40, &mut rng);
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, g) = actor_loss_grad(&actor, &refs, 0.2, 0.05).unwrap();
        let n = numeric(&actor, |a| actor_loss_grad(a, &refs, 0.2, 0.05).unwrap().0.loss);
        let err = max_rel_err(&g, &n);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let critic = Mlp::new(&[6, 2, 1], 1.0, &mut rng);
        let actor = Mlp::new(&[5, 2, 5], 1.0, &mut rng);
        let samples = random_samples(&actor, 30, &mut rng);
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, g) = critic_loss_grad(&critic, &refs);
        let n = numeric(&critic, |c| critic_loss_grad(c, &refs).0);
        let err = max_rel_err(&g, &n);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_advantage_zero_actor_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let actor = Mlp::new(&[5, 8, 5], 1.0, &mut rng);
        let mut samples = random_samples(&actor, 20, &mut rng);
        for s in &mut samples {
            s.advantage = 0.0;
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, g) = actor_loss_grad(&actor, &refs, 0.2, 0.0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn bandit_converges_to_rewarded_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let hyper = Hyperparams {
            hidden: vec![8],
            minibatch_size: 64,
            epochs: 4,
            actor_lr: 1e-2,
            ..Hyperparams::default()
        };
        let mut params = PolicyParams::new(1, &hyper.hidden, &mut rng);
        let mut opt = Optimizers::new(&params, &hyper);
        let obs = Observation([0.5; 5]);
        let probs =
            |p: &PolicyParams| masked_softmax(&logits_of(&p.actor.forward(obs.as_slice())), &ActionMask::ALL).unwrap();
        for _ in 0..150 {
            let dist = probs(&params);
            let actions: Vec<usize> = (0..64).map(|_| draw(&dist, &mut rng).index()).collect();
            let rewards: Vec<f64> = actions.iter().map(|&a| if a == 2 { 1.0 } else { 0.0 }).collect();
            let baseline = rewards.iter().sum::<f64>() / 64.0;
            let samples: Vec<Sample> = actions
                .iter()
                .zip(&rewards)
                .map(|(&a, &r)| Sample {
                    observation: obs,
                    critic_input: vec![0.5; 6],
                    action: a,
                    mask: ActionMask::ALL,
                    old_log_prob: dist[a].ln(),
                    advantage: r - baseline,
                    ret: r,
                })
                .collect();
            mappo_update(&mut params, &mut opt, &samples, &hyper, &mut rng).unwrap();
        }
        let p = probs(&params);
        assert!(p[2] > 0.95, "{p:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let hyper = Hyperparams {
            hidden: vec![4],
            ..Hyperparams::default()
        };
        let mut params = PolicyParams::new(1, &hyper.hidden, &mut rng);
        let mut opt = Optimizers::new(&params, &hyper);
        let s = Sample {
            observation: Observation([0.5; 5]),
            critic_input: vec![0.0; 6],
            action: 0,
            mask: ActionMask::ALL,
            old_log_prob: -1.0,
            advantage: 1.0,
            ret: f64::NAN,
        };
        let err = mappo_update(&mut params, &mut opt, &[s], &hyper, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
