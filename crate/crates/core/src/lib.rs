//! Multi-agent variable speed limit control for freeway corridors.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over parallel arrays read closer to the recurrences they implement.
#![allow(clippy::needless_range_loop)]

pub mod analytics;
pub mod corridor;
pub mod error;
pub mod guards;
pub mod marl;
pub mod rng;
pub mod service;
pub mod sim;

pub use corridor::{Corridor, Direction, Gantry, Measurement, Observation, Sensor, SpeedLimit};
pub use error::{Error, Result};
