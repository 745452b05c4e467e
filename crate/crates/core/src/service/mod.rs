//! Decision-support service: sensor ingestion, interpolation, a fixed-period
//! decision tick through the guard pipeline, command publication and an
//! append-only decision log.

pub mod closed_loop;
pub mod engine;
pub mod interpolate;
pub mod log;
pub mod messages;
pub mod replay;
pub mod server;

pub use closed_loop::{run_closed_loop, ClosedLoopSummary, Control};
pub use engine::{Engine, EngineConfig, EventClock, SensorReading, TickOutput};
pub use interpolate::Interpolator;
pub use log::{read_decision_log, DecisionRecord, DecisionSink, MemorySink, NullSink, RejectionRecord, RotatingJsonl};
pub use messages::{Health, Message, PROTOCOL_VERSION};
pub use replay::{read_sensor_csv, replay, write_sensor_csv, ReplaySummary};
pub use server::{serve, stream_recording, Client, ClockMode, ServeConfig, ServerHandle};
