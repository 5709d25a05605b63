use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use urban_nmpc::qp::DenseQp;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_urban-nmpc"))
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("urban-nmpc-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string(v).unwrap()).unwrap();
    path.to_path_buf()
}

/// The overtake scenario cut down to `duration` seconds.
fn short_overtake(dir: &Path, duration: f64) -> PathBuf {
    let mut sc = json(&repo().join("scenarios/overtake.json"));
    sc["duration"] = duration.into();
    write_json(&dir.join("short.json"), &sc)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn self_test_passes() {
    let out = bin().args(["--mode", "self-test"]).output().unwrap();
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(code(&out), 0, "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = scratch("config");
    let out = bin().args(["--scenario", "no/such/file.json"]).output().unwrap();
    assert_eq!(code(&out), 2);

    let mut planner = json(&repo().join("config/planner.json"));
    planner["unknown_knob"] = 1.into();
    let bad = write_json(&dir.join("planner.json"), &planner);
    let scenario = repo().join("scenarios/overtake.json");
    let out = bin().arg("--scenario").arg(&scenario).arg("--planner").arg(&bad).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_knob"));

    let out = bin().arg("--scenario").arg(&scenario).arg("--dump-qp").output().unwrap();
    assert_eq!(code(&out), 2);
    let out = bin().arg("--out").arg(&dir).output().unwrap();
    assert_eq!(code(&out), 2, "a scenario is required");
}

#[test]
fn replay_reproduces_the_logs() {
    let dir = scratch("replay");
    let scenario = short_overtake(&dir, 1.0);
    let (a, b) = (dir.join("a"), dir.join("b"));
    let out = bin().arg("--scenario").arg(&scenario).arg("--seed").arg("3").arg("--out").arg(&a).output().unwrap();
    assert_eq!(code(&out), 0);
    let summary = json(&a.join("summary.json"));
    assert_eq!(summary["effective"]["scenario"]["seed"], 3);
    assert_eq!(summary["outcome"], "completed");
    let out = bin().arg("--replay").arg(a.join("summary.json")).arg("--out").arg(&b).output().unwrap();
    assert_eq!(code(&out), 0);
    for f in ["log.csv", "diagnostics.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = std::fs::read_to_string(a.join("log.csv")).unwrap();
    assert!(header.starts_with("t,s,y,xi,vx,vy,omega,delta,tr,x,y_global,psi\n"));
    for f in ["trajectory_overlay.csv", "state_input_series.csv", "cpu_time.csv"] {
        assert!(a.join("plots").join(f).exists(), "{f}");
    }
}

#[test]
fn collision_exits_with_three() {
    let dir = scratch("collision");
    let mut sc = json(&repo().join("scenarios/overtake.json"));
    sc["duration"] = 1.0.into();
    sc["obstacles"][0]["s0"] = 3.0.into();
    sc["obstacles"][0]["phases"] = serde_json::json!([{ "vs": 0.0, "vy": 0.0 }]);
    let path = write_json(&dir.join("crash.json"), &sc);
    let out = bin().arg("--scenario").arg(&path).arg("--out").arg(dir.join("out")).output().unwrap();
    assert_eq!(code(&out), 3);
    assert_eq!(json(&dir.join("out/summary.json"))["outcome"], "collision");
}

#[test]
fn exhaustion_exits_with_four() {
    let dir = scratch("exhaustion");
    let mut planner = json(&repo().join("config/planner.json"));
    planner["max_wsr"] = 1.into();
    let planner = write_json(&dir.join("planner.json"), &planner);
    let out = bin()
        .arg("--scenario")
        .arg(repo().join("scenarios/blind_spot.json"))
        .arg("--planner")
        .arg(&planner)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 4);
}

#[test]
fn strict_budget_overrun_exits_with_five() {
    let dir = scratch("budget");
    let scenario = short_overtake(&dir, 0.3);
    let mut planner = json(&repo().join("config/planner.json"));
    planner["cycle_budget_ms"] = 1e-6.into();
    planner["sub_budget_ms"] = 1e4.into();
    let planner = write_json(&dir.join("planner.json"), &planner);
    let run = |strict: bool| {
        let mut cmd = bin();
        cmd.arg("--scenario").arg(&scenario).arg("--planner").arg(&planner).arg("--out").arg(dir.join("out"));
        if strict {
            cmd.arg("--strict-timing");
        }
        code(&cmd.output().unwrap())
    };
    assert_eq!(run(false), 0);
    assert_eq!(run(true), 5);
}

#[test]
fn single_solve_dumps_trajectory_and_qps() {
    let dir = scratch("single");
    let out = bin()
        .args(["--mode", "single-solve", "--dump-qp"])
        .arg("--scenario")
        .arg(repo().join("scenarios/blind_spot.json"))
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let traj = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 62, "header plus N+1 nodes");
    let solve = json(&dir.join("solve.json"));
    assert_eq!(solve["selected"], "A");
    for id in ["A", "B", "C"] {
        let qp = DenseQp::parse_dump(&std::fs::read_to_string(dir.join(format!("qp_{id}.txt"))).unwrap()).unwrap();
        assert_eq!(qp.n(), 120);
        qp.validate().unwrap();
    }
}
