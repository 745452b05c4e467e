//! Per-agent reward: adaptability, safety and mobility terms.

use serde::{Deserialize, Serialize};

use crate::corridor::SpeedLimit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub adaptability: f64,
    pub safety: f64,
    pub mobility: f64,
    /// Occupancy at or above which a location counts as congested.
    pub congestion_occupancy: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            adaptability: 1.0,
            safety: 1.0,
            mobility: 1.0,
            congestion_occupancy: 0.15,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.adaptability, self.safety, self.mobility];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(
                "reward weights must be nonnegative with at least one positive".into(),
            ));
        }
        if !(self.congestion_occupancy > 0.0 && self.congestion_occupancy < 1.0) {
            return Err(Error::Config("congestion_occupancy must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn bound(&self) -> f64 {
        self.adaptability + self.safety + self.mobility
    }
}

/// Unweighted terms, each in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTerms {
    pub adaptability: f64,
    pub safety: f64,
    pub mobility: f64,
}

impl RewardTerms {
    pub fn evaluate(
        action: SpeedLimit,
        downstream: SpeedLimit,
        speed: f64,
        occupancy: f64,
        congestion_occupancy: f64,
    ) -> Self {
        let a = f64::from(action.mph());
        let congested = occupancy >= congestion_occupancy;
        RewardTerms {
            adaptability: if congested {
                -((a - speed) / 40.0).clamp(0.0, 1.0)
            } else {
                0.0
            },
            safety: -((a - f64::from(downstream.mph()) - 10.0) / 40.0).clamp(0.0, 1.0),
            mobility: if congested { 0.0 } else { a / 70.0 },
        }
    }

    pub fn weighted(&self, w: &RewardWeights) -> f64 {
        w.adaptability * self.adaptability + w.safety * self.safety + w.mobility * self.mobility
    }
}

/// Reward of one agent given its action, the downstream neighbour's action
/// and its own measured speed (mph) and occupancy.
pub fn reward(action: SpeedLimit, downstream: SpeedLimit, speed: f64, occupancy: f64, w: &RewardWeights) -> f64 {
    RewardTerms::evaluate(action, downstream, speed, occupancy, w.congestion_occupancy).weighted(w)
}
