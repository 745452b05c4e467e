use std::fmt;

use serde::{Deserialize, Serialize};

use super::{debounce, max_speed_clip, speed_match, valid_action_mask, GuardConfig};
use crate::corridor::{Corridor, Measurement, Observation, SpeedLimit};
use crate::error::{Error, Result};
use crate::marl::policy::{greedy, ActionMask, Policy};

/// Pipeline stage responsible for a posted limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribution {
    Policy,
    #[serde(rename = "SM")]
    SpeedMatching,
    #[serde(rename = "MSLC")]
    MaxSpeedLimit,
    #[serde(rename = "DB")]
    Debounce,
}

impl Attribution {
    pub const ALL: [Attribution; 4] = [
        Attribution::Policy,
        Attribution::SpeedMatching,
        Attribution::MaxSpeedLimit,
        Attribution::Debounce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribution::Policy => "Policy",
            Attribution::SpeedMatching => "SM",
            Attribution::MaxSpeedLimit => "MSLC",
            Attribution::Debounce => "DB",
        }
    }

    /// Last stage whose output differs from its input.
    pub fn of(policy: SpeedLimit, after_sm: SpeedLimit, after_mslc: SpeedLimit, final_limit: SpeedLimit) -> Self {
        if final_limit != after_mslc {
            Attribution::Debounce
        } else if after_mslc != after_sm {
            Attribution::MaxSpeedLimit
        } else if after_sm != policy {
            Attribution::SpeedMatching
        } else {
            Attribution::Policy
        }
    }
}

impl fmt::Display for Attribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Attribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribution::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribution {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDecision {
    pub gantry_id: String,
    pub observation: Observation,
    /// Policy choice after invalid action masking.
    pub policy_action: SpeedLimit,
    pub after_sm: SpeedLimit,
    pub after_mslc: SpeedLimit,
    #[serde(rename = "final")]
    pub final_limit: SpeedLimit,
    pub attribution: Attribution,
    /// The gantry's sensor had no usable reading; the limit was held or reset.
    pub fail_safe: bool,
}

/// What the pipeline carries from one tick to the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineState {
    /// Last posted limit per gantry (corridor order).
    pub posted: Vec<Option<SpeedLimit>>,
    /// Consecutive ticks each gantry has run without sensor data.
    pub missing_ticks: Vec<u32>,
}

impl PipelineState {
    pub fn new(gantries: usize) -> Self {
        PipelineState {
            posted: vec![None; gantries],
            missing_ticks: vec![0; gantries],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub decisions: Vec<StageDecision>,
    pub state: PipelineState,
}

impl PipelineOutput {
    pub fn finals(&self) -> Vec<SpeedLimit> {
        self.decisions.iter().map(|d| d.final_limit).collect()
    }
}

/// Runs one control tick over the corridor.
///
/// `measurements` holds one entry per corridor sensor (corridor order);
/// entries with `valid == false` count as missing. Gantries whose critical
/// sensor is missing hold their previous limit for up to
/// `config.fail_safe_hold_ticks` ticks and then fall back to their maximum.
pub fn pipeline_step(
    corridor: &Corridor,
    measurements: &[Measurement],
    policy: &dyn Policy,
    config: &GuardConfig,
    previous: &PipelineState,
) -> Result<PipelineOutput> {
    let n = corridor.len();
    if measurements.len() != corridor.sensors().len() {
        return Err(Error::DimensionMismatch {
            left: measurements.len(),
            right: corridor.sensors().len(),
        });
    }
    let previous = if previous.posted.len() == n {
        previous.clone()
    } else {
        PipelineState::new(n)
    };
    let critical = corridor.critical_sensors();

    // Step 2: policy with masking, then speed-matching, downstream first.
    let mut observations = Vec::with_capacity(n);
    let mut policy_actions = Vec::with_capacity(n);
    let mut after_sm: Vec<SpeedLimit> = Vec::with_capacity(n);
    let mut fail_safe = vec![false; n];
    let mut missing_ticks = previous.missing_ticks.clone();
    for i in 0..n {
        let downstream = if i == 0 {
            corridor.default_max()
        } else {
            after_sm[i - 1]
        };
        let own = &measurements[critical[i]];
        if !own.valid {
            let hold = previous.posted[i].filter(|_| previous.missing_ticks[i] < config.fail_safe_hold_ticks);
            let fallback = hold.unwrap_or_else(|| SpeedLimit::snap_down(corridor.gantries()[i].max_limit));
            observations.push(Observation([f64::from(downstream.mph()) / 70.0, 0.0, 0.0, 0.0, 0.0]));
            policy_actions.push(fallback);
            after_sm.push(fallback);
            fail_safe[i] = true;
            missing_ticks[i] += 1;
            continue;
        }
        missing_ticks[i] = 0;
        let upstream = critical
            .get(i + 1)
            .map(|&s| &measurements[s])
            .filter(|m| m.valid)
            .unwrap_or(own);
        let obs = crate::corridor::build_observation(downstream, own, upstream);
        let mask = if config.mask_invalid_actions {
            valid_action_mask(downstream, config.a_diff)
        } else {
            ActionMask::ALL
        };
        let action = greedy(&policy.distribution(i, &obs, &mask)?);
        let matched = speed_match(action, downstream, own.speed, own.occupancy, config);
        observations.push(obs);
        policy_actions.push(action);
        after_sm.push(matched);
    }

    // Step 3: maximum speed limit correction.
    let after_mslc: Vec<SpeedLimit> = after_sm
        .iter()
        .zip(corridor.gantries())
        .map(|(l, g)| max_speed_clip(*l, g.max_limit))
        .collect();

    // Step 4: debounce.
    let finals = debounce(&after_mslc);

    let decisions = (0..n)
        .map(|i| StageDecision {
            gantry_id: corridor.gantries()[i].id.clone(),
            observation: observations[i],
            policy_action: policy_actions[i],
            after_sm: after_sm[i],
            after_mslc: after_mslc[i],
            final_limit: finals[i],
            attribution: Attribution::of(policy_actions[i], after_sm[i], after_mslc[i], finals[i]),
            fail_safe: fail_safe[i],
        })
        .collect();
    Ok(PipelineOutput {
        decisions,
        state: PipelineState {
            posted: finals.into_iter().map(Some).collect(),
            missing_ticks,
        },
    })
}
