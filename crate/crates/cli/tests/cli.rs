use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use vsl_core::guards::{verify_constraints, GuardConfig, ViolationKind};
use vsl_core::marl::checkpoint::load_checkpoint;
use vsl_core::marl::train::initial_params;
use vsl_core::marl::Hyperparams;
use vsl_core::service::read_decision_log;
use vsl_core::sim::{testing_scenario, training_scenario};

fn vsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vsl(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn decision_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("decisions"))
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn train_checkpoint(dir: &Path, iterations: &str) -> PathBuf {
    let out = dir.join(format!("train-{iterations}"));
    ok(&[
        "train",
        "--preset",
        "training",
        "--seed",
        "5",
        "--iterations",
        iterations,
        "--out",
        p(&out),
    ]);
    out.join("checkpoint.json")
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for control in [&[][..], &["--fixed-limit", "50"][..]] {
        let run = |name: &str| {
            let out = tmp.path().join(name);
            let mut args = vec!["simulate", "--seed", "11", "--horizon", "1200", "--out", p(&out)];
            args.extend_from_slice(control);
            ok(&args);
            out
        };
        let (a, b) = (run(&format!("a{}", control.len())), run(&format!("b{}", control.len())));
        for f in ["measurements.csv", "summary.json", "manifest.json"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        assert_eq!(decision_files(&a), decision_files(&b));
        assert_eq!(decision_files(&a).is_empty(), control.is_empty());
    }
}

#[test]
fn policy_run_satisfies_constraints_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let cp = train_checkpoint(tmp.path(), "1");
    let sim = tmp.path().join("sim");
    ok(&[
        "simulate",
        "--seed",
        "3",
        "--horizon",
        "1800",
        "--checkpoint",
        p(&cp),
        "--out",
        p(&sim),
    ]);
    let records = read_decision_log(&sim.join("decisions")).unwrap();
    let corridor = testing_scenario(3).corridor.build().unwrap();
    assert_eq!(records.len(), 60 * corridor.len());
    for tick in records.chunks(corridor.len()) {
        let finals: Vec<u32> = tick.iter().map(|r| r.final_limit.mph()).collect();
        let v = verify_constraints(&finals, &corridor, &GuardConfig::default());
        assert!(v.iter().all(|v| v.kind == ViolationKind::StepDown), "{v:?}");
    }
    let rep = tmp.path().join("rep");
    ok(&[
        "replay",
        "--seed",
        "3",
        "--checkpoint",
        p(&cp),
        "--input",
        p(&sim.join("measurements.csv")),
        "--out",
        p(&rep),
    ]);
    assert_eq!(decision_files(&sim), decision_files(&rep));
}

#[test]
fn zero_horizon_writes_empty_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    ok(&["simulate", "--horizon", "0", "--fixed-limit", "70", "--out", p(&out)]);
    assert_eq!(
        fs::read_to_string(out.join("measurements.csv")).unwrap(),
        "sensor_id,timestamp,speed,occupancy\n"
    );
    assert!(decision_files(&out).is_empty());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn existing_logs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let args = ["simulate", "--horizon", "120", "--fixed-limit", "60", "--out", p(&out)];
    ok(&args);
    let again = vsl(&args);
    assert_eq!(again.status.code(), Some(3));
    assert_eq!(error_json(&again)["error"]["kind"], "config");
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn zero_iterations_checkpoint_is_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cp = load_checkpoint(&train_checkpoint(tmp.path(), "0")).unwrap();
    let hyper = Hyperparams {
        seed: 5,
        iterations: 0,
        ..Hyperparams::default()
    };
    assert_eq!(cp.params, initial_params(&training_scenario().with_seed(5), &hyper));
}

#[test]
fn training_curve_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_checkpoint(&tmp.path().join("a"), "2");
    let b = train_checkpoint(&tmp.path().join("b"), "2");
    let curve = |cp: &Path| fs::read(cp.with_file_name("curve.csv")).unwrap();
    assert_eq!(curve(&a), curve(&b));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(curve(&a)).unwrap().lines().count(), 3);
}

#[test]
fn attribution_matches_hand_count() {
    let tmp = tempfile::tempdir().unwrap();
    let corridor = testing_scenario(0).corridor.build().unwrap();
    // Two days; day one 3 Policy + 1 MSLC, day two 1 SM + 1 DB.
    let rows = [
        (1_713_783_630, "Policy"),
        (1_713_783_630, "Policy"),
        (1_713_783_660, "Policy"),
        (1_713_783_660, "MSLC"),
        (1_713_870_030, "SM"),
        (1_713_870_030, "DB"),
    ];
    let mut log = String::new();
    for (i, (ts, a)) in rows.iter().enumerate() {
        let g = &corridor.gantries()[i].id;
        log.push_str(&format!(
            r#"{{"tick_timestamp":{ts},"gantry_id":"{g}","observation":[0.5,0.5,0.1,0.5,0.1],"policy_action":70,"after_sm":70,"after_mslc":70,"final":70,"attribution":"{a}","interpolated":false,"fail_safe":false}}"#
        ));
        log.push('\n');
    }
    let path = tmp.path().join("log.jsonl");
    fs::write(&path, log).unwrap();
    let out = ok(&["analyze", "attribution", "--log", p(&path)]);
    let text = String::from_utf8(out.stdout).unwrap();
    let table: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    // Means over days (75, 0), (0, 50), (25, 0), (0, 50); population std is half the spread.
    let expect = [
        ("Policy", "37.5000", "37.5000"),
        ("SM", "25.0000", "25.0000"),
        ("MSLC", "12.5000", "12.5000"),
        ("DB", "25.0000", "25.0000"),
    ];
    for (row, (name, mean, std)) in table.iter().zip(expect) {
        assert_eq!(&row[..3], &[name, mean, std]);
        assert_eq!(row[3], "2");
    }
    let empty = vsl(&["analyze", "attribution", "--log", p(&path), "--peak", "00:00-01:00"]);
    assert_eq!(empty.status.code(), Some(6));
    assert_eq!(error_json(&empty)["error"]["kind"], "empty");
}

#[test]
fn analyze_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&[
        "simulate",
        "--seed",
        "2",
        "--horizon",
        "900",
        "--fixed-limit",
        "60",
        "--out",
        p(&sim),
    ]);
    let ts = tmp.path().join("ts");
    ok(&[
        "analyze",
        "timespace",
        "--seed",
        "2",
        "--measurements",
        p(&sim.join("measurements.csv")),
        "--log",
        p(&sim.join("decisions")),
        "--out",
        p(&ts),
    ]);
    let posted = fs::read_to_string(ts.join("posted.csv")).unwrap();
    assert_eq!(posted.lines().count(), 1 + 30);
    assert_eq!(posted.lines().next().unwrap().split(',').count(), 1 + 34);
    assert_eq!(
        fs::read_to_string(ts.join("speed.csv")).unwrap().lines().count(),
        1 + 30
    );
    let veh = tmp.path().join("veh");
    ok(&[
        "analyze",
        "vehicle",
        "--seed",
        "2",
        "--measurements",
        p(&sim.join("measurements.csv")),
        "--log",
        p(&sim.join("decisions")),
        "--start-time",
        "1713783630",
        "--out",
        p(&veh),
    ]);
    assert!(fs::read_to_string(veh.join("vehicle-0.csv")).unwrap().lines().count() > 2);
    let out = ok(&[
        "analyze",
        "mismatch",
        "--dataset",
        &format!("a={}", p(&sim.join("decisions"))),
        "--dataset",
        &format!("b={}", p(&sim.join("decisions"))),
        "--samples",
        "50",
    ]);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "dataset,a,b\na,0.000000,0.000000\nb,0.000000,0.000000\n"
    );
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_port = vsl(&["serve", "--fixed-limit", "70", "--port", "99999"]);
    assert_eq!(bad_port.status.code(), Some(2));
    assert_eq!(error_json(&bad_port)["error"]["kind"], "usage");

    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let busy = vsl(&[
        "serve",
        "--fixed-limit",
        "70",
        "--port",
        &port,
        "--log-dir",
        p(&tmp.path().join("l")),
    ]);
    assert_eq!(busy.status.code(), Some(4));
    assert_eq!(error_json(&busy)["error"]["kind"], "io");

    let cfg = tmp.path().join("bad.toml");
    let mut text = String::from_utf8(ok(&["scenario", "--preset", "training"]).stdout).unwrap();
    text = text.replace("compliance = 0.05", "compliance = 2.0");
    fs::write(&cfg, text).unwrap();
    let bad = vsl(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(error_json(&bad)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("sim.compliance"));

    let no_policy = vsl(&["replay", "--input", p(&cfg)]);
    assert_eq!(no_policy.status.code(), Some(3));
}

#[test]
fn scenario_export_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("s.toml");
    ok(&["scenario", "--preset", "testing", "--seed", "7", "--out", p(&cfg)]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&[
        "simulate",
        "--config",
        p(&cfg),
        "--horizon",
        "300",
        "--fixed-limit",
        "50",
        "--out",
        p(&a),
    ]);
    ok(&[
        "simulate",
        "--seed",
        "7",
        "--horizon",
        "300",
        "--fixed-limit",
        "50",
        "--out",
        p(&b),
    ]);
    assert_eq!(decision_files(&a), decision_files(&b));
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn serve_answers_health_on_env_port() {
    let tmp = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_vsl"))
        .args([
            "serve",
            "--fixed-limit",
            "70",
            "--duration",
            "2",
            "--log-dir",
            p(&tmp.path().join("logs")),
        ])
        .env("VSL_PORT", "0")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut ready = String::new();
    stdout.read_line(&mut ready).unwrap();
    let ready: serde_json::Value = serde_json::from_str(&ready).unwrap();
    let addr = ready["listening"].as_str().unwrap();
    let mut conn = TcpStream::connect(addr).unwrap();
    conn.write_all(b"{\"protocol_version\":1,\"type\":\"health_query\"}\n")
        .unwrap();
    let mut reply = String::new();
    BufReader::new(conn.try_clone().unwrap()).read_line(&mut reply).unwrap();
    let reply: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(reply["type"], "health_reply");
    assert_eq!(reply["ticks"], 0);
    drop(conn);
    assert!(child.wait().unwrap().success());
}
