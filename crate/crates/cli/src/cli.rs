use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "vsl", version, about = "Multi-agent variable speed limit control toolkit")]
pub struct Cli {
    /// Increase log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a built-in scenario as TOML, ready to edit and pass to --config.
    Scenario(ScenarioArgs),
    /// Run the simulator in closed loop with the guarded decision pipeline.
    Simulate(SimulateArgs),
    /// Train the shared policy with MAPPO.
    Train(TrainArgs),
    /// Run the decision-support service over TCP.
    Serve(ServeArgs),
    /// Run the decision pipeline offline over a recorded sensor CSV.
    Replay(ReplayArgs),
    /// Post-hoc analysis of decision logs and sensor recordings.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Training,
    Testing,
}

/// Where the scenario comes from: a TOML file or a built-in preset.
#[derive(Debug, Args)]
pub struct ScenarioSource {
    /// Scenario TOML (see `vsl scenario`).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in scenario used when --config is absent.
    #[arg(long, value_enum, default_value = "testing")]
    pub preset: Preset,
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    /// Policy checkpoint (JSON) run through the guards.
    #[arg(long, conflicts_with = "fixed_limit")]
    pub checkpoint: Option<PathBuf>,
    /// Constant preferred limit (mph) run through the guards.
    #[arg(long)]
    pub fixed_limit: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EngineArgs {
    /// Decision tick period in seconds.
    #[arg(long, default_value_t = 30)]
    pub tick_seconds: u32,
    /// Disable missing-data interpolation; gantries without data fail safe instead.
    #[arg(long)]
    pub no_interpolation: bool,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Replace decision logs already present in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    /// Destination file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    #[command(flatten)]
    pub control: ControlArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Simulated duration in seconds.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Fraction of drivers obeying posted limits.
    #[arg(long)]
    pub compliance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    /// Hyperparameter TOML; unspecified keys keep their defaults.
    #[arg(long)]
    pub hyper: Option<PathBuf>,
    /// Training iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Seeded evaluation episodes comparing the initial and trained policy.
    #[arg(long, default_value_t = 0)]
    pub eval_episodes: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Clock {
    Event,
    Wall,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    #[command(flatten)]
    pub control: ControlArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, env = "VSL_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "VSL_PORT", default_value_t = 7878)]
    pub port: u16,
    /// Event clock ticks on reading timestamps; wall clock on the system clock.
    #[arg(long, value_enum, default_value = "event")]
    pub clock: Clock,
    /// Directory for daily decision logs.
    #[arg(long, default_value = "logs")]
    pub log_dir: PathBuf,
    /// Stop after this many seconds (runs until interrupted otherwise).
    #[arg(long)]
    pub duration: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    #[command(flatten)]
    pub control: ControlArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Sensor CSV: sensor_id,timestamp,speed,occupancy.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Daily share of posted limits by responsible stage.
    Attribution(AttributionArgs),
    /// Pairwise 2-Wasserstein distances between observation datasets.
    Mismatch(MismatchArgs),
    /// Gridded speed and posted-limit fields.
    Timespace(TimespaceArgs),
    /// Virtual vehicle trajectories and the limits they encounter.
    Vehicle(VehicleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CustomMaxArg {
    All,
    Only,
    Exclude,
}

#[derive(Debug, Args)]
pub struct AttributionArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    /// Extra corridor TOML files for logs spanning several corridors.
    #[arg(long)]
    pub corridor: Vec<PathBuf>,
    /// Decision log files or directories.
    #[arg(long, required = true)]
    pub log: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// `all`, `default` (per-direction peak) or `HH:MM-HH:MM`.
    #[arg(long, default_value = "all")]
    pub peak: String,
    #[arg(long, value_enum, default_value = "all")]
    pub custom_max: CustomMaxArg,
    /// Local time offset from UTC in hours, for days and peak windows.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub utc_offset_hours: f64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MismatchArgs {
    /// `label=path` pairs; each path is a decision log file or directory.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    /// Points sampled from each dataset.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimespaceArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    /// Sensor CSV for the speed field.
    #[arg(long)]
    pub measurements: Option<PathBuf>,
    /// Decision log for the posted-limit fields.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Speed field time bin in seconds.
    #[arg(long, default_value_t = 30)]
    pub bin_seconds: i64,
    #[arg(long, default_value = "timespace")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VehicleArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    #[arg(long)]
    pub measurements: PathBuf,
    /// Decision log; adds the encountered limits.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Departure times (epoch seconds); one vehicle each.
    #[arg(long = "start-time", required = true)]
    pub start_times: Vec<f64>,
    /// Departure milepost; the upstream end of the sensor span when absent.
    #[arg(long)]
    pub start_milepost: Option<f64>,
    #[arg(long, default_value_t = 30)]
    pub bin_seconds: i64,
    #[arg(long, default_value = "vehicles")]
    pub out: PathBuf,
}
