use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use vsl_core::analytics::{
    attribution_summary, mismatch_matrix, virtual_vehicle, vsl_encounter_series, write_encounters_csv,
    write_matrix_csv, AttributionFilter, CustomMaxFilter, LimitGrid, PeakFilter, PointCloud, SpeedField, Window,
};
use vsl_core::corridor::CorridorConfig;
use vsl_core::marl::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vsl_core::marl::train::{evaluate, train, write_curve, EvalMode};
use vsl_core::marl::{ConstantPolicy, Hyperparams, Policy, RewardWeights};
use vsl_core::service::{
    read_decision_log, read_sensor_csv, replay, run_closed_loop, serve, ClockMode, Control, Engine, EngineConfig,
    RotatingJsonl, ServeConfig,
};
use vsl_core::sim::{testing_scenario, training_scenario, ScenarioConfig};
use vsl_core::{rng, Corridor, Direction, Error, Result, SpeedLimit};

use crate::cli::*;
use crate::output::{decisions_dir, list_files, write_json, Manifest};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Scenario(a) => scenario(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Analyze(AnalyzeCommand::Attribution(a)) => attribution(a),
        Command::Analyze(AnalyzeCommand::Mismatch(a)) => mismatch(a),
        Command::Analyze(AnalyzeCommand::Timespace(a)) => timespace(a),
        Command::Analyze(AnalyzeCommand::Vehicle(a)) => vehicle(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let f = File::create(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(BufWriter::new(f))
}

/// A file when `out` is given, stdout otherwise.
fn sink_or_stdout(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_scenario(src: &ScenarioSource) -> Result<ScenarioConfig> {
    match &src.config {
        Some(path) => {
            let s = ScenarioConfig::from_toml(&read_text(path)?)?;
            Ok(match src.seed {
                Some(seed) => s.with_seed(seed),
                None => s,
            })
        }
        None => {
            let seed = src.seed.unwrap_or(0);
            Ok(match src.preset {
                Preset::Training => training_scenario().with_seed(seed),
                Preset::Testing => testing_scenario(seed),
            })
        }
    }
}

fn engine_config(a: &EngineArgs) -> Result<EngineConfig> {
    if a.tick_seconds == 0 {
        return Err(Error::Config("--tick-seconds must be positive".into()));
    }
    Ok(EngineConfig {
        tick_seconds: a.tick_seconds,
        interpolate: !a.no_interpolation,
        ..EngineConfig::default()
    })
}

/// Resolves the control policy and a description of it for the manifest.
fn control(a: &ControlArgs) -> Result<(Control, serde_json::Value)> {
    if let Some(path) = &a.checkpoint {
        let cp = load_checkpoint(path)?;
        let desc = json!({ "checkpoint": path.display().to_string(), "iteration": cp.iteration });
        return Ok((Control::Policy(Arc::new(cp.params)), desc));
    }
    if let Some(mph) = a.fixed_limit {
        return Ok((Control::Fixed(SpeedLimit::new(mph)?), json!({ "fixed_limit": mph })));
    }
    Ok((Control::NoControl, json!("no_control")))
}

fn policy(a: &ControlArgs) -> Result<(Arc<dyn Policy>, serde_json::Value)> {
    match control(a)? {
        (Control::Policy(p), d) => Ok((p, d)),
        (Control::Fixed(l), d) => Ok((Arc::new(ConstantPolicy(l)), d)),
        (Control::NoControl, _) => Err(Error::Config("this command needs --checkpoint or --fixed-limit".into())),
    }
}

fn scenario(a: ScenarioArgs) -> Result<()> {
    let s = load_scenario(&a.source)?;
    let mut w = sink_or_stdout(a.out.as_deref())?;
    w.write_all(s.to_toml().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut s = load_scenario(&a.source)?;
    if let Some(h) = a.horizon {
        s.sim.horizon = h;
    }
    if let Some(c) = a.compliance {
        s.sim.compliance = c;
    }
    s.validate()?;
    let engine = engine_config(&a.engine)?;
    let (control, control_desc) = control(&a.control)?;
    fs::create_dir_all(&a.out.out)?;
    let mut sink = RotatingJsonl::new(decisions_dir(&a.out.out, a.out.force)?)?;
    let measurements = create(&a.out.out.join("measurements.csv"))?;
    let summary = run_closed_loop(&s, control, engine.clone(), &mut sink, measurements)?;
    drop(sink);
    write_json(&a.out.out.join("summary.json"), &summary)?;
    fs::write(a.out.out.join("scenario.toml"), s.to_toml())?;
    let config = json!({ "scenario": s, "engine": engine, "control": control_desc });
    Manifest::new("simulate", s.sim.seed, config, list_files(&a.out.out)?).write(&a.out.out)?;
    tracing::info!(
        ticks = summary.decisions.ticks,
        vht = summary.vehicle_hours,
        "simulation finished"
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let s = load_scenario(&a.source)?;
    let mut hyper: Hyperparams = match &a.hyper {
        Some(p) => toml::from_str(&read_text(p)?)?,
        None => Hyperparams::default(),
    };
    if let Some(seed) = a.source.seed {
        hyper.seed = seed;
    }
    if let Some(n) = a.iterations {
        hyper.iterations = n;
    }
    hyper.validate()?;
    let weights = RewardWeights::default();
    fs::create_dir_all(&a.out.out)?;
    let out = train(&s, &hyper, &weights, |p, _| {
        tracing::info!(iteration = p.iteration, reward = p.mean_reward, "iteration");
        Ok(())
    })?;
    let mut cp = Checkpoint::new(out.params.clone());
    cp.hyperparams = Some(hyper.clone());
    cp.iteration = Some(hyper.iterations);
    save_checkpoint(&a.out.out.join("checkpoint.json"), &cp)?;
    let mut curve = create(&a.out.out.join("curve.csv"))?;
    write_curve(&out.curve, &mut curve)?;
    curve.flush()?;
    if a.eval_episodes > 0 {
        let eval_seed = rng::sub_seed(hyper.seed, "cli-eval");
        let stats = |p, mode| evaluate(p, &s, &weights, a.eval_episodes, eval_seed, mode);
        let report = json!({
            "episodes": a.eval_episodes,
            "initial": stats(&out.initial, EvalMode::Sampled)?,
            "trained": stats(&out.params, EvalMode::Sampled)?,
            "trained_greedy": stats(&out.params, EvalMode::Greedy)?,
            "no_control": stats(&out.params, EvalMode::NoControl)?,
        });
        write_json(&a.out.out.join("evaluation.json"), &report)?;
    }
    fs::write(a.out.out.join("scenario.toml"), s.to_toml())?;
    let config = json!({ "scenario": s, "hyperparams": hyper, "reward": weights });
    Manifest::new("train", hyper.seed, config, list_files(&a.out.out)?).write(&a.out.out)
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let s = load_scenario(&a.source)?;
    let corridor = s.corridor.build()?;
    let (policy, _) = policy(&a.control)?;
    let engine = Engine::new(corridor, policy, engine_config(&a.engine)?)?;
    let sink = RotatingJsonl::new(&a.log_dir)?;
    let cfg = ServeConfig {
        host: a.host.clone(),
        port: a.port,
        clock: match a.clock {
            Clock::Event => ClockMode::Event,
            Clock::Wall => ClockMode::Wall,
        },
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let handle = serve(engine, Box::new(sink), cfg).await?;
        // Machine-readable readiness line; tests and peers wait for it.
        println!("{}", json!({ "listening": handle.local_addr().to_string() }));
        io::stdout().flush()?;
        match a.duration {
            Some(secs) => tokio::time::sleep(Duration::from_secs(secs)).await,
            None => tokio::signal::ctrl_c().await?,
        }
        let health = handle.shutdown().await?;
        println!("{}", json!({ "stopped": health }));
        Ok(())
    })
}

fn replay_cmd(a: ReplayArgs) -> Result<()> {
    let s = load_scenario(&a.source)?;
    let corridor = s.corridor.build()?;
    let (policy, control_desc) = policy(&a.control)?;
    let engine_cfg = engine_config(&a.engine)?;
    let readings = read_sensor_csv(File::open(&a.input)?)?;
    let mut engine = Engine::new(corridor, policy, engine_cfg.clone())?;
    fs::create_dir_all(&a.out.out)?;
    let mut sink = RotatingJsonl::new(decisions_dir(&a.out.out, a.out.force)?)?;
    let summary = replay(&readings, &mut engine, &mut sink)?;
    drop(sink);
    write_json(&a.out.out.join("summary.json"), &summary)?;
    let config = json!({
        "corridor": s.corridor,
        "engine": engine_cfg,
        "control": control_desc,
        "input": a.input.display().to_string(),
    });
    Manifest::new("replay", s.sim.seed, config, list_files(&a.out.out)?).write(&a.out.out)
}

fn parse_hhmm(text: &str) -> Option<u32> {
    let (h, m) = text.trim().split_once(':')?;
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    (h <= 24 && m < 60 && h * 60 + m <= 24 * 60).then_some(h * 60 + m)
}

fn parse_peak(text: &str) -> Result<PeakFilter> {
    match text {
        "all" => Ok(PeakFilter::AllDay),
        "default" => Ok(PeakFilter::DirectionDefault),
        _ => {
            let bad = || Error::Config(format!("--peak {text:?}: expected all, default or HH:MM-HH:MM"));
            let (a, b) = text.split_once('-').ok_or_else(bad)?;
            let (start_min, end_min) = (parse_hhmm(a).ok_or_else(bad)?, parse_hhmm(b).ok_or_else(bad)?);
            if start_min >= end_min {
                return Err(bad());
            }
            Ok(PeakFilter::Window(Window { start_min, end_min }))
        }
    }
}

fn attribution(a: AttributionArgs) -> Result<()> {
    let mut corridors: Vec<Corridor> = vec![load_scenario(&a.source)?.corridor.build()?];
    for p in &a.corridor {
        let cfg: CorridorConfig = toml::from_str(&read_text(p)?)?;
        corridors.push(cfg.build()?);
    }
    let mut records = Vec::new();
    for p in &a.log {
        records.extend(read_decision_log(p)?);
    }
    let filter = AttributionFilter {
        direction: a.direction.map(|d| match d {
            DirectionArg::Increasing => Direction::Increasing,
            DirectionArg::Decreasing => Direction::Decreasing,
        }),
        peak: parse_peak(&a.peak)?,
        custom_max: match a.custom_max {
            CustomMaxArg::All => CustomMaxFilter::All,
            CustomMaxArg::Only => CustomMaxFilter::Only,
            CustomMaxArg::Exclude => CustomMaxFilter::Exclude,
        },
        utc_offset_seconds: (a.utc_offset_hours * 3600.0).round() as i64,
    };
    let refs: Vec<&Corridor> = corridors.iter().collect();
    let summary = attribution_summary(&records, &refs, &filter)?;
    summary.write_csv(sink_or_stdout(a.out.as_deref())?)
}

fn mismatch(a: MismatchArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let mut labels = Vec::new();
    let mut sets = Vec::new();
    for entry in &a.datasets {
        let (label, path) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--dataset {entry:?}: expected label=path")))?;
        let obs: Vec<_> = read_decision_log(Path::new(path))?
            .into_iter()
            .map(|r| r.observation)
            .collect();
        if obs.is_empty() {
            return Err(Error::Config(format!("dataset {label:?} has no decisions")));
        }
        let cloud = PointCloud::from_observations(&obs)?;
        // One stream per dataset from the same seed: equal inputs sample equal points.
        sets.push(cloud.subsample(a.samples, &mut rng::stream(a.seed, "mismatch-sample")));
        labels.push(label.to_string());
    }
    let m = mismatch_matrix(&sets)?;
    write_matrix_csv(&labels, &m, sink_or_stdout(a.out.as_deref())?)
}

fn timespace(a: TimespaceArgs) -> Result<()> {
    if a.measurements.is_none() && a.log.is_none() {
        return Err(Error::Config("timespace needs --measurements, --log or both".into()));
    }
    let corridor = load_scenario(&a.source)?.corridor.build()?;
    fs::create_dir_all(&a.out)?;
    if let Some(p) = &a.measurements {
        let field = SpeedField::from_readings(&corridor, &read_sensor_csv(File::open(p)?)?, a.bin_seconds)?;
        field.write_csv(create(&a.out.join("speed.csv"))?)?;
    }
    if let Some(p) = &a.log {
        let grid = LimitGrid::from_records(&corridor, &read_decision_log(p)?)?;
        grid.write_posted_csv(create(&a.out.join("posted.csv"))?)?;
        grid.write_policy_only_csv(create(&a.out.join("policy_only.csv"))?)?;
    }
    Ok(())
}

fn vehicle(a: VehicleArgs) -> Result<()> {
    let corridor = load_scenario(&a.source)?.corridor.build()?;
    let field = SpeedField::from_readings(
        &corridor,
        &read_sensor_csv(File::open(&a.measurements)?)?,
        a.bin_seconds,
    )?;
    let records = match &a.log {
        Some(p) => read_decision_log(p)?,
        None => Vec::new(),
    };
    let start_mp = a.start_milepost.unwrap_or(match corridor.direction() {
        Direction::Increasing => field.mileposts[0],
        Direction::Decreasing => *field.mileposts.last().expect("field has sensors"),
    });
    fs::create_dir_all(&a.out)?;
    for (k, &t) in a.start_times.iter().enumerate() {
        let traj = virtual_vehicle(&field, t, start_mp)?;
        let series = vsl_encounter_series(&traj, &records, &corridor);
        let path: PathBuf = a.out.join(format!("vehicle-{k}.csv"));
        write_encounters_csv(&series, create(&path)?)?;
    }
    Ok(())
}
