//! `urban-nmpc`: run scenarios, single solves and the self-test.
//!
//! Exit codes: 0 ok, 1 I/O or internal error, 2 configuration error,
//! 3 collision, 4 planner exhaustion, 5 budget violation with
//! `--strict-timing`.

mod selftest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use urban_nmpc::planner::{CycleStatus, Planner, PlannerConfig};
use urban_nmpc::sim::{emit_plot_data, run_closed_loop, write_artifacts, Outcome, Scenario};
use urban_nmpc::vehicle::VehicleParams;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    ClosedLoop,
    SingleSolve,
    SelfTest,
}

#[derive(Parser, Debug)]
#[command(name = "urban-nmpc", version, about = "Real-time NMPC planner for urban driving")]
struct Cli {
    /// scenario JSON (required unless replaying or self-testing)
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// vehicle parameter JSON (built-in defaults otherwise)
    #[arg(long)]
    params: Option<PathBuf>,
    /// planner configuration JSON (built-in defaults otherwise)
    #[arg(long)]
    planner: Option<PathBuf>,
    /// re-run the exact configuration recorded in a summary.json
    #[arg(long, conflicts_with_all = ["scenario", "params", "planner"])]
    replay: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// overrides the scenario's noise seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Mode::ClosedLoop)]
    mode: Mode,
    /// single-solve: also write the next QP of every sub-planner
    #[arg(long)]
    dump_qp: bool,
    /// treat wall-clock budget overruns as failures
    #[arg(long)]
    strict_timing: bool,
}

/// Everything a run depends on; stored in the summary for replays.
#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Effective {
    scenario: Scenario,
    vehicle: VehicleParams,
    planner: PlannerConfig,
}

/// Error tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_err(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn io_err(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load(cli: &Cli) -> Result<Effective> {
    let mut eff = if let Some(path) = &cli.replay {
        let summary: serde_json::Value = serde_json::from_str(&read(path)?)?;
        let effective = summary.get("effective").cloned().context("summary has no 'effective' section")?;
        let eff: Effective = serde_json::from_value(effective)?;
        eff.scenario.validate()?;
        eff.vehicle.validate()?;
        eff.planner.validate()?;
        eff
    } else {
        let path = cli.scenario.as_ref().context("--scenario is required")?;
        let scenario = Scenario::from_json(&read(path)?).with_context(|| format!("in {}", path.display()))?;
        let vehicle = match &cli.params {
            Some(p) => VehicleParams::from_json(&read(p)?).with_context(|| format!("in {}", p.display()))?,
            None => VehicleParams::default(),
        };
        let planner = match &cli.planner {
            Some(p) => PlannerConfig::from_json(&read(p)?).with_context(|| format!("in {}", p.display()))?,
            None => PlannerConfig::default(),
        };
        Effective { scenario, vehicle, planner }
    };
    if let Some(seed) = cli.seed {
        eff.scenario.seed = seed;
    }
    if cli.strict_timing {
        eff.planner.strict_timing = true;
    }
    Ok(eff)
}

fn closed_loop(eff: &Effective, out: &Path) -> Result<u8, Failure> {
    let road = eff.scenario.road.build().map_err(|e| config_err(e.into()))?;
    let log = run_closed_loop(&eff.scenario, &eff.vehicle, &eff.planner).map_err(|e| match e {
        urban_nmpc::Error::Config(_) | urban_nmpc::Error::Json(_) => config_err(e.into()),
        other => io_err(other.into()),
    })?;
    let effective = serde_json::to_value(eff).map_err(|e| io_err(e.into()))?;
    let summary = write_artifacts(&log, &road, effective, out).map_err(|e| io_err(e.into()))?;
    emit_plot_data(&log, &out.join("plots")).map_err(|e| io_err(e.into()))?;

    let a = &summary.audit;
    println!(
        "{}: {:?} after {} cycles; min clearance {:.3} m, min boundary margin {:.3} m, peak deceleration {:.2} m/s^2",
        summary.scenario,
        summary.outcome,
        log.cycles.len(),
        a.min_clearance,
        a.min_boundary_margin,
        a.peak_deceleration
    );
    println!(
        "fallback cycles {}, emergency cycles {}, median cycle {:.2} ms (max {:.2} ms)",
        summary.fallback_cycles, summary.emergency_cycles, summary.timing.cycle_ms_median, summary.timing.cycle_ms_max
    );
    Ok(match log.outcome {
        Outcome::Collision => 3,
        Outcome::PlannerExhausted => 4,
        _ if eff.planner.strict_timing && summary.timing.budget_violations > 0 => 5,
        _ => 0,
    })
}

fn single_solve(eff: &Effective, out: &Path, dump_qp: bool) -> Result<u8, Failure> {
    let road = eff.scenario.road.build().map_err(|e| config_err(e.into()))?;
    let (obstacles, command) = eff.scenario.initial_snapshot();
    let mut planner = Planner::new(eff.planner.clone(), eff.vehicle.clone()).map_err(|e| config_err(e.into()))?;
    let estimate = eff.scenario.ego;
    let output = planner
        .plan_cycle(&estimate, &road, &obstacles, &command, eff.scenario.perceived_horizon)
        .map_err(|e| io_err(e.into()))?;

    let mut write = || -> Result<()> {
        fs::create_dir_all(out)?;
        let mut w = std::io::BufWriter::new(fs::File::create(out.join("trajectory.csv"))?);
        writeln!(w, "node,t,s,y,xi,vx,vy,omega,delta,tr")?;
        for (k, x) in output.trajectory.iter().enumerate() {
            writeln!(w, "{k},{},{},{},{},{},{},{},{},{}", x.t, x.s, x.y, x.xi, x.vx, x.vy, x.omega, x.delta, x.tr)?;
        }
        w.flush()?;
        fs::write(out.join("solve.json"), serde_json::to_string_pretty(&output)?)?;
        if dump_qp {
            for (id, qp) in planner.current_qps(&estimate, &road, &obstacles, &command, eff.scenario.perceived_horizon)? {
                fs::write(out.join(format!("qp_{id}.txt")), qp.dump())?;
            }
        }
        Ok(())
    };
    write().map_err(io_err)?;
    println!(
        "single solve: {:?}, selected {}, u = ({:.4} rad/s, {:.1} N m/s)",
        output.status,
        output.selected.map(String::from).unwrap_or_else(|| "-".into()),
        output.applied.u1,
        output.applied.u2
    );
    for s in &output.subs {
        println!("  {} horizon {:7.2} m  {:?}  wsr {}", s.id, s.horizon, s.status, s.total_wsr());
    }
    Ok(if output.status == CycleStatus::Emergency { 4 } else { 0 })
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    if cli.mode == Mode::SelfTest {
        return Ok(if selftest::run() { 0 } else { 1 });
    }
    if cli.dump_qp && cli.mode != Mode::SingleSolve {
        return Err(config_err(anyhow::anyhow!("--dump-qp is only available with --mode single-solve")));
    }
    let eff = load(cli).map_err(config_err)?;
    match cli.mode {
        Mode::ClosedLoop => closed_loop(&eff, &cli.out),
        Mode::SingleSolve => single_solve(&eff, &cli.out, cli.dump_qp),
        Mode::SelfTest => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
