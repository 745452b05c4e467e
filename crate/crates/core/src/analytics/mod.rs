//! Offline analysis of decision logs and sensor recordings.

pub mod attribution;
pub mod timespace;
pub mod wasserstein;

pub use attribution::{
    attribution_summary, AttributionFilter, AttributionSummary, CategoryStats, CustomMaxFilter, DayShare, PeakFilter,
    Window,
};
pub use timespace::{
    virtual_vehicle, vsl_encounter_series, write_encounters_csv, Encounter, LimitGrid, SpeedField, TrajectoryPoint,
    MIN_TRAVEL_SPEED_MPH,
};
pub use wasserstein::{hungarian, mismatch_matrix, wasserstein2, write_matrix_csv, PointCloud};
