use std::fmt;

use serde::{Deserialize, Serialize};

use super::{is_order1_bounce, GuardConfig};
use crate::corridor::{Corridor, SpeedLimit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Not one of the five displayable values.
    OffGrid,
    /// Above the gantry's legal maximum.
    AboveMax,
    /// Middle of an order-1 bounce.
    Bounce,
    /// More than `a_diff` above the next gantry downstream.
    StepDown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub gantry_index: usize,
    pub gantry_id: String,
    pub kind: ViolationKind,
    pub value: u32,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} mph): {:?}", self.gantry_id, self.value, self.kind)
    }
}

/// Checks posted limits (corridor order, mph) against every deployment
/// constraint and reports each violation. The downstream neighbour of the
/// first gantry is the corridor default maximum.
pub fn verify_constraints(finals: &[u32], corridor: &Corridor, config: &GuardConfig) -> Vec<Violation> {
    let gantries = corridor.gantries();
    let mut out = Vec::new();
    let mut push = |i: usize, kind: ViolationKind| {
        out.push(Violation {
            gantry_index: i,
            gantry_id: gantries.get(i).map(|g| g.id.clone()).unwrap_or_default(),
            kind,
            value: finals[i],
        })
    };
    for (i, &v) in finals.iter().enumerate() {
        if SpeedLimit::new(v).is_err() {
            push(i, ViolationKind::OffGrid);
        }
        if gantries.get(i).is_some_and(|g| v > g.max_limit) {
            push(i, ViolationKind::AboveMax);
        }
        if is_order1_bounce(finals, i) {
            push(i, ViolationKind::Bounce);
        }
        let downstream = if i == 0 {
            corridor.default_max().mph()
        } else {
            finals[i - 1]
        };
        if v > downstream + config.a_diff {
            push(i, ViolationKind::StepDown);
        }
    }
    out
}
