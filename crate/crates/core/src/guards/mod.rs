//! Safety guards applied around the learned policy: invalid action masking,
//! speed-matching, maximum speed limit correction and debounce.

mod pipeline;
mod verify;

pub use pipeline::{pipeline_step, Attribution, PipelineOutput, PipelineState, StageDecision};
pub use verify::{verify_constraints, Violation, ViolationKind};

use serde::{Deserialize, Serialize};

use crate::corridor::SpeedLimit;
use crate::error::{Error, Result};
use crate::marl::policy::ActionMask;

fn default_a_diff() -> u32 {
    10
}
fn default_o_thred() -> f64 {
    0.15
}
fn default_true() -> bool {
    true
}
fn default_hold() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    /// Largest allowed step-down between neighbouring gantries, mph.
    #[serde(default = "default_a_diff")]
    pub a_diff: u32,
    /// Occupancy at or above which a 70 mph choice is speed-matched.
    #[serde(default = "default_o_thred")]
    pub o_thred: f64,
    /// Round speeds at exact multiples of ten up to the next multiple (f(50) = 60).
    #[serde(default = "default_true")]
    pub strict_round_up: bool,
    /// Apply invalid action masking to the policy output.
    #[serde(default = "default_true")]
    pub mask_invalid_actions: bool,
    /// Ticks a gantry without data keeps its previous limit before falling back to its maximum.
    #[serde(default = "default_hold")]
    pub fail_safe_hold_ticks: u32,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            a_diff: default_a_diff(),
            o_thred: default_o_thred(),
            strict_round_up: true,
            mask_invalid_actions: true,
            fail_safe_hold_ticks: default_hold(),
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a_diff == 0 || self.a_diff % 10 != 0 {
            return Err(Error::Config(format!(
                "a_diff {} must be a positive multiple of 10",
                self.a_diff
            )));
        }
        if !(self.o_thred > 0.0 && self.o_thred < 1.0) {
            return Err(Error::Config(format!("o_thred {} must lie in (0, 1)", self.o_thred)));
        }
        Ok(())
    }
}

/// Grid actions exceeding the downstream intent by more than `a_diff`.
pub fn invalid_action_set(downstream: SpeedLimit, a_diff: u32) -> Vec<SpeedLimit> {
    SpeedLimit::GRID
        .into_iter()
        .filter(|a| a.mph() > downstream.mph() + a_diff)
        .collect()
}

/// Complement of [`invalid_action_set`]. Never empty: 30 mph is always allowed.
pub fn valid_action_mask(downstream: SpeedLimit, a_diff: u32) -> ActionMask {
    ActionMask::excluding(&invalid_action_set(downstream, a_diff))
}

/// Smallest multiple of ten above `speed`. With `strict` unset, exact
/// multiples map to themselves.
pub fn round_up_to_ten(speed: f64, strict: bool) -> u32 {
    let speed = speed.max(0.0);
    let tens = if strict {
        (speed / 10.0).floor() + 1.0
    } else {
        (speed / 10.0).ceil()
    };
    (tens * 10.0) as u32
}

fn clip_to_grid(mph: u32) -> SpeedLimit {
    SpeedLimit::snap_down(mph.clamp(30, 70))
}

/// Pulls extreme policy choices toward the measured traffic speed.
pub fn speed_match(
    intended: SpeedLimit,
    downstream_intended: SpeedLimit,
    speed: f64,
    occupancy: f64,
    config: &GuardConfig,
) -> SpeedLimit {
    let f = round_up_to_ten(speed, config.strict_round_up);
    if intended == SpeedLimit::MIN {
        clip_to_grid((downstream_intended.mph() + config.a_diff).min(f))
    } else if intended == SpeedLimit::MAX && occupancy >= config.o_thred {
        clip_to_grid(f)
    } else {
        intended
    }
}

/// Caps a limit at the gantry maximum, snapping off-grid caps (65, 55) down
/// to the grid.
pub fn max_speed_clip(limit: SpeedLimit, gantry_max: u32) -> SpeedLimit {
    SpeedLimit::snap_down(limit.mph().min(gantry_max))
}

/// Whether `values[j..=k]` is a bounce: every intermediate value exceeds both ends.
fn is_bounce(values: &[u32], j: usize, k: usize) -> bool {
    k >= j + 2 && {
        let edge = values[j].max(values[k]);
        values[j + 1..k].iter().all(|&v| v > edge)
    }
}

/// Whether `values[i]` is the middle of an order-1 bounce. A local peak that
/// sits inside a longer bounce belongs to that higher-order bounce instead
/// (e.g. `[30, 60, 50, 40]` is one order-2 bounce).
pub fn is_order1_bounce(values: &[u32], i: usize) -> bool {
    let n = values.len();
    if i == 0 || i + 1 >= n || !is_bounce(values, i - 1, i + 1) {
        return false;
    }
    // Search for a longer bounce (j, k) with j <= i - 1 and k >= i + 1.
    let mut left_min = values[i];
    for j in (0..i).rev() {
        if j < i - 1 {
            left_min = left_min.min(values[j + 1]);
        }
        if left_min <= values[j] {
            continue;
        }
        let mut mid_min = left_min;
        for k in i + 1..n {
            if k > i + 1 {
                mid_min = mid_min.min(values[k - 1]);
            }
            if mid_min <= values[j] {
                break;
            }
            if (j, k) != (i - 1, i + 1) && mid_min > values[k] {
                return false;
            }
        }
    }
    true
}

/// Indices holding the middle of an order-1 bounce.
pub fn order1_bounces(values: &[u32]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| is_order1_bounce(values, i))
        .collect()
}

/// One scan from the most downstream gantry: each order-1 bounce middle is
/// replaced by the lower of its two neighbours, using already-corrected values.
pub fn debounce(limits: &[SpeedLimit]) -> Vec<SpeedLimit> {
    let mut values: Vec<u32> = limits.iter().map(|l| l.mph()).collect();
    for i in 1..values.len().saturating_sub(1) {
        if is_order1_bounce(&values, i) {
            values[i] = values[i - 1].min(values[i + 1]);
        }
    }
    values.into_iter().map(SpeedLimit::snap_down).collect()
}
