//! Quick invariant checks runnable from an installed binary.

use nalgebra::{DMatrix, DVector};
use urban_nmpc::planner::{CycleStatus, Planner, PlannerConfig};
use urban_nmpc::qp::{self, DenseQp, QpOptions, QpStatus};
use urban_nmpc::riccati::{lqr_gain, solve_dare};
use urban_nmpc::road::{RoadMap, RoadSource};
use urban_nmpc::rti::{LinearQuadraticProblem, RtiEngine, ShootingIterate};
use urban_nmpc::ocp::BehaviouralCommand;
use urban_nmpc::vehicle::{
    idx, integrate_step, sensitivities, slip_angles_modified, ControlVec, StateVec, VehicleParams, VehicleState, NU, NX,
};

type Check = (&'static str, fn() -> Result<String, String>);

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn slips_vanish_at_standstill() -> Result<String, String> {
    let p = VehicleParams::default();
    let mut x = StateVec::zeros();
    x[idx::VY] = 0.4;
    x[idx::OMEGA] = -0.3;
    x[idx::DELTA] = 0.2;
    let (f, r) = slip_angles_modified(&x, &p);
    ensure(f == 0.0 && r == 0.0, format!("front {f:e}, rear {r:e}"))
}

fn swerve_state() -> StateVec {
    let mut x = StateVec::zeros();
    x[idx::VX] = 12.0;
    x[idx::DELTA] = 0.05;
    x[idx::TR] = 200.0;
    x
}

fn integrator_order() -> Result<String, String> {
    let p = VehicleParams::default();
    let kappa = |_: f64| 0.0;
    let u = ControlVec::new(0.1, 100.0);
    let run = |h: f64| -> Result<StateVec, String> {
        let mut x = swerve_state();
        for _ in 0..(0.8 / h).round() as usize {
            x = integrate_step(&x, &u, h, &kappa, &p).map_err(|e| e.to_string())?;
        }
        Ok(x)
    };
    let reference = run(0.8 / 1024.0)?;
    let errors: Vec<f64> = [0.05, 0.025, 0.0125]
        .iter()
        .map(|h| run(*h).map(|x| (x - reference).rows(0, idx::T).amax()))
        .collect::<Result<_, _>>()?;
    let slope = (errors[0] / errors[2]).log2() / 2.0;
    ensure((1.9..=2.1).contains(&slope), format!("observed order {slope:.3}"))
}

fn sensitivities_match_differences() -> Result<String, String> {
    let p = VehicleParams::default();
    let kappa = |s: f64| 0.01 + 0.001 * s;
    let (x, u, h) = (swerve_state(), ControlVec::new(0.1, 500.0), 0.05);
    let (_, a, b) = sensitivities(&x, &u, h, &kappa, &p).map_err(|e| e.to_string())?;
    let step = |x: &StateVec, u: &ControlVec| integrate_step(x, u, h, &kappa, &p).map_err(|e| e.to_string());
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..NX + NU {
        let (mut xa, mut xb, mut ua, mut ub) = (x, x, u, u);
        if j < NX {
            xa[j] += eps;
            xb[j] -= eps;
        } else {
            ua[j - NX] += eps;
            ub[j - NX] -= eps;
        }
        let fd = (step(&xa, &ua)? - step(&xb, &ub)?) / (2.0 * eps);
        for i in 0..NX {
            let an = if j < NX { a[(i, j)] } else { b[(i, j - NX)] };
            worst = worst.max((an - fd[i]).abs() / (1.0 + fd[i].abs()));
        }
    }
    ensure(worst < 1e-5, format!("max scaled difference {worst:.2e}"))
}

fn qp_kkt_and_hotstart() -> Result<String, String> {
    let n = 6;
    let h = DMatrix::from_fn(n, n, |i, j| if i == j { 4.0 + i as f64 } else { 1.0 / (1.0 + (i + j) as f64) });
    let g = DVector::from_fn(n, |i, _| (i as f64 * 1.7).sin() * 5.0);
    let a = DMatrix::from_fn(3, n, |i, j| ((i * n + j) as f64 * 0.9).cos());
    let qp = DenseQp {
        h,
        g,
        lb: DVector::from_element(n, -0.3),
        ub: DVector::from_element(n, 0.4),
        a,
        lba: DVector::from_element(3, -0.2),
        uba: DVector::from_element(3, 0.25),
    };
    let opts = QpOptions::default();
    let cold = qp::solve(&qp, None, &opts).map_err(|e| e.to_string())?;
    if cold.status != QpStatus::Optimal {
        return Err(format!("status {:?}", cold.status));
    }
    let kkt = qp.kkt_residual(&cold.x, &cold.duals).max();
    let mut shifted = qp.clone();
    shifted.g[0] += 0.05;
    let cold2 = qp::solve(&shifted, None, &opts).map_err(|e| e.to_string())?;
    let hot = qp::hotstart(&cold, &shifted, &opts).map_err(|e| e.to_string())?;
    let gap = (&hot.x - &cold2.x).amax();
    ensure(kkt < 1e-8 && gap < 1e-9, format!("KKT residual {kkt:.1e}, hot/cold gap {gap:.1e}"))
}

fn rti_reproduces_lqr() -> Result<String, String> {
    let dt = 0.1;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::from_element(1, 1, 0.5);
    let p = solve_dare(&a, &b, &q, &r).map_err(|e| e.to_string())?;
    let k = lqr_gain(&a, &b, &r, &p).map_err(|e| e.to_string())?;
    let problem = LinearQuadraticProblem::unconstrained(a, b, q, r, p, 10);
    let x0 = DVector::from_vec(vec![1.0, -0.4]);
    let mut engine = RtiEngine::new(ShootingIterate::constant(&DVector::zeros(2), 1, 10), QpOptions::default());
    let report = engine.sqp_cycle(&problem, &x0, 1).map_err(|e| e.to_string())?;
    let u = report.u_apply.ok_or("QP not solved")?[0];
    let err = (u + (k * &x0)[0]).abs();
    ensure(err < 1e-9, format!("|u0 + K x0| = {err:.1e}"))
}

fn road_round_trip() -> Result<String, String> {
    let road = RoadSource::Straight { straight_length: 50.0, left: 3.5, right: -3.5 }.build().map_err(|e| e.to_string())?;
    let road = RoadMap::from_segments(road.segments().to_vec()).map_err(|e| e.to_string())?;
    let (x, y, psi) = road.curvilinear_to_global(20.0, 1.2, 0.1).map_err(|e| e.to_string())?;
    let (s, d, xi) = road.global_to_curvilinear(x, y, psi).map_err(|e| e.to_string())?;
    let err = (s - 20.0).abs().max((d - 1.2).abs()).max((xi - 0.1).abs());
    ensure(err < 1e-9, format!("pose error {err:.1e}"))
}

fn planner_cycle() -> Result<String, String> {
    let p = VehicleParams::default();
    let road = RoadMap::straight(120.0, 5.25, -1.75).map_err(|e| e.to_string())?;
    let mut planner = Planner::new(PlannerConfig::default(), p.clone()).map_err(|e| e.to_string())?;
    let x = VehicleState::cruise(0.0, 0.0, 10.0, &p);
    let out = planner.plan_cycle(&x, &road, &[], &BehaviouralCommand::drive(10.0), 60.0).map_err(|e| e.to_string())?;
    ensure(
        out.status == CycleStatus::Nominal && out.selected == Some('A'),
        format!("{:?} via {:?} in {:.1} ms", out.status, out.selected, out.cycle_ms),
    )
}

/// Print a pass/fail table; true when every check passes.
pub fn run() -> bool {
    let checks: [Check; 7] = [
        ("modified slips vanish at standstill", slips_vanish_at_standstill),
        ("implicit midpoint is second order", integrator_order),
        ("sensitivities match finite differences", sensitivities_match_differences),
        ("QP optimality and hot start", qp_kkt_and_hotstart),
        ("RTI step reproduces the LQR law", rti_reproduces_lqr),
        ("road pose round trip", road_round_trip),
        ("planner cycle on an empty road", planner_cycle),
    ];
    let mut all = true;
    for (name, check) in checks {
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                all = false;
                ("FAIL", d)
            }
        };
        println!("{tag}  {name:<42} {detail}");
    }
    all
}
