use nalgebra::{DMatrix, DVector};
use urban_nmpc::qp::{QpOptions, QpStatus};
use urban_nmpc::rti::{LinearQuadraticProblem, RtiEngine, ShootingIterate, ShootingProblem};

fn double_integrator(n: usize) -> LinearQuadraticProblem {
    let h = 0.1;
    LinearQuadraticProblem::unconstrained(
        DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5 * h * h, h]),
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 0.1),
        DMatrix::identity(2, 2) * 5.0,
        n,
    )
}

fn first_control(p: &LinearQuadraticProblem, x0: &DVector<f64>) -> f64 {
    let mut engine = RtiEngine::new(ShootingIterate::constant(&DVector::zeros(2), 1, p.horizon), QpOptions::default());
    let report = engine.sqp_cycle(p, x0, 1).unwrap();
    report.u_apply.unwrap()[0]
}

#[test]
fn unconstrained_feedback_is_linear_in_the_initial_state() {
    let p = double_integrator(20);
    let (a, b) = (DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0]));
    let (ua, ub) = (first_control(&p, &a), first_control(&p, &b));
    for (c1, c2) in [(0.3, -2.0), (-1.5, 0.25), (4.0, 4.0)] {
        let u = first_control(&p, &(&a * c1 + &b * c2));
        assert!((u - (c1 * ua + c2 * ub)).abs() < 1e-9);
    }
}

#[test]
fn linear_problem_is_solved_in_one_iteration() {
    let p = double_integrator(15);
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let mut engine = RtiEngine::new(ShootingIterate::constant(&x0, 1, 15), QpOptions::default());
    let report = engine.sqp_cycle(&p, &x0, 2).unwrap();
    assert_eq!(report.iterations.len(), 2);
    assert!(report.iterations.iter().all(|it| it.qp_status == QpStatus::Optimal));
    assert!(report.iterations[1].kkt <= report.iterations[0].kkt);
    assert!(report.iterations[1].kkt < 1e-9, "{}", report.iterations[1].kkt);
}

#[test]
fn bounded_controls_stay_within_limits() {
    let mut p = double_integrator(20);
    p.u_min = DVector::from_element(1, -0.5);
    p.u_max = DVector::from_element(1, 0.5);
    let x0 = DVector::from_vec(vec![3.0, 1.0]);
    let mut engine = RtiEngine::new(ShootingIterate::constant(&x0, 1, 20), QpOptions::default());
    let report = engine.sqp_cycle(&p, &x0, 1).unwrap();
    assert!((report.u_apply.unwrap()[0] + 0.5).abs() < 1e-12);
    assert!(engine.iterate.u.iter().all(|u| u[0] >= -0.5 - 1e-12 && u[0] <= 0.5 + 1e-12));
    assert!(!engine.active_keys().is_empty());
}

#[test]
fn expansion_follows_the_linearised_dynamics() {
    let p = double_integrator(8);
    let x0 = DVector::from_vec(vec![0.4, 0.1]);
    let engine = RtiEngine::new(ShootingIterate::constant(&x0, 1, 8), QpOptions::default());
    let cqp = engine.prepare(&p).unwrap();
    let dx0 = DVector::from_vec(vec![0.05, -0.02]);
    let du = DVector::from_fn(8, |i, _| 0.1 * i as f64 - 0.3);
    let dx = cqp.expand(&dx0, &du);
    assert_eq!(dx.len(), 9);
    // the linear model is exact, so iterate + increments is a true rollout
    let mut x = &engine.iterate.x[0] + &dx0;
    for k in 0..8 {
        let u = &engine.iterate.u[k] + du.rows(k, 1);
        x = p.linearize(k, &x, &u).unwrap().x_next;
        assert!((&x - (&engine.iterate.x[k + 1] + &dx[k + 1])).amax() < 1e-12);
    }
}

#[test]
fn shift_keeps_the_horizon_and_moves_nodes() {
    let p = double_integrator(6);
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let mut engine = RtiEngine::new(ShootingIterate::constant(&x0, 1, 6), QpOptions::default());
    engine.sqp_cycle(&p, &x0, 1).unwrap();
    let before = engine.iterate.clone();
    engine.shift(&p);
    assert_eq!(engine.iterate.horizon(), 6);
    assert_eq!(engine.iterate.x[0], before.x[1]);
    assert_eq!(engine.iterate.u[4], before.u[5]);
    assert_eq!(engine.iterate.u[5], before.u[5]);
    let tail = &p.a * &before.x[6] + &p.b * &before.u[5];
    assert!((&engine.iterate.x[6] - tail).amax() < 1e-15);
}

#[test]
fn zero_iterations_is_a_config_error() {
    let p = double_integrator(4);
    let x0 = DVector::zeros(2);
    let mut engine = RtiEngine::new(ShootingIterate::constant(&x0, 1, 4), QpOptions::default());
    assert!(engine.sqp_cycle(&p, &x0, 0).is_err());
    assert!(engine.sqp_cycle(&p, &DVector::zeros(3), 1).is_err());
}
