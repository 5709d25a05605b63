//! Single-track vehicle model in the road-aligned (s, y) frame.
//!
//! The state carries the eight mechanical states plus integrated time so that
//! time-varying obstacle predictions can be evaluated at every shooting node.
//! Lateral tyre forces follow the simplified Magic Formula; slip angles use a
//! low-speed regularised form that stays finite at standstill.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NX: usize = 9;
pub const NU: usize = 2;

pub type StateVec = SVector<f64, NX>;
pub type ControlVec = SVector<f64, NU>;
pub type StateJacobian = SMatrix<f64, NX, NX>;
pub type ControlJacobian = SMatrix<f64, NX, NU>;

/// Positions of the state components inside [`StateVec`].
pub mod idx {
    pub const S: usize = 0;
    pub const Y: usize = 1;
    pub const XI: usize = 2;
    pub const VX: usize = 3;
    pub const VY: usize = 4;
    pub const OMEGA: usize = 5;
    pub const DELTA: usize = 6;
    pub const TR: usize = 7;
    pub const T: usize = 8;
}

const GRAVITY: f64 = 9.81;
const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 20;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub yaw_inertia: f64,
    /// C.o.M. to front axle, m
    pub lf: f64,
    /// C.o.M. to rear axle, m
    pub lr: f64,
    /// nominal rear wheel radius, m
    pub wheel_radius: f64,
    pub pacejka_b: f64,
    pub pacejka_c: f64,
    /// peak lateral force per tyre, N
    pub pacejka_d: f64,
    pub pacejka_e: f64,
    /// F_aero = aero_drag * Vx * |Vx|, N s^2/m^2
    pub aero_drag: f64,
    /// friction ellipse: max longitudinal acceleration, m/s^2
    pub a1: f64,
    /// friction ellipse: max longitudinal deceleration, m/s^2
    pub a2: f64,
    /// friction ellipse: lateral semi-axis on the acceleration side, m/s^2
    pub b1: f64,
    /// friction ellipse: lateral semi-axis on the braking side, m/s^2
    pub b2: f64,
    /// low-speed slip shaping factor, s/m
    pub kappa_slip: f64,
    /// low-speed slip regularisation, m^2/s^2
    pub eps0: f64,
    /// radius of each body circle, m
    pub rho_ego: f64,
    /// body circle offset from the C.o.M. along the body axis, m
    pub d_c: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let mass = 1200.0;
        Self {
            mass,
            yaw_inertia: 1500.0,
            lf: 1.2,
            lr: 1.3,
            wheel_radius: 0.3,
            pacejka_b: 10.0,
            pacejka_c: 1.5,
            pacejka_d: 0.6 * mass * GRAVITY / 2.0,
            pacejka_e: 0.97,
            aero_drag: 0.4,
            a1: 4.0,
            a2: 7.0,
            b1: 7.0,
            b2: 7.0,
            kappa_slip: 2.0,
            eps0: 0.4,
            rho_ego: 1.0,
            d_c: 1.1,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("wheel_radius", self.wheel_radius),
            ("pacejka_d", self.pacejka_d),
            ("a1", self.a1),
            ("a2", self.a2),
            ("b1", self.b1),
            ("b2", self.b2),
            ("kappa_slip", self.kappa_slip),
            ("eps0", self.eps0),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("vehicle parameter {name} must be positive, got {value}")));
            }
        }
        if self.rho_ego < 0.0 || self.d_c < 0.0 || self.aero_drag < 0.0 {
            return Err(Error::Config("rho_ego, d_c and aero_drag must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct VehicleState {
    pub s: f64,
    pub y: f64,
    pub xi: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub delta: f64,
    pub tr: f64,
    pub t: f64,
}

impl VehicleState {
    pub fn to_vector(&self) -> StateVec {
        StateVec::from([
            self.s, self.y, self.xi, self.vx, self.vy, self.omega, self.delta, self.tr, self.t,
        ])
    }

    pub fn from_vector(x: &StateVec) -> Self {
        Self {
            s: x[idx::S],
            y: x[idx::Y],
            xi: x[idx::XI],
            vx: x[idx::VX],
            vy: x[idx::VY],
            omega: x[idx::OMEGA],
            delta: x[idx::DELTA],
            tr: x[idx::TR],
            t: x[idx::T],
        }
    }

    /// Straight-line cruise at `vx` with the torque that balances drag.
    pub fn cruise(s: f64, y: f64, vx: f64, p: &VehicleParams) -> Self {
        Self {
            s,
            y,
            vx,
            tr: p.wheel_radius * p.aero_drag * vx * vx.abs(),
            ..Self::default()
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlRates {
    /// steering rate, rad/s
    pub u1: f64,
    /// torque rate, N m/s
    pub u2: f64,
}

impl ControlRates {
    pub fn to_vector(&self) -> ControlVec {
        ControlVec::new(self.u1, self.u2)
    }

    pub fn from_vector(u: &ControlVec) -> Self {
        Self { u1: u[0], u2: u[1] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TyreForces {
    pub front_lateral: f64,
    pub rear_lateral: f64,
    pub rear_longitudinal: f64,
    pub aero: f64,
}

fn atan_ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        (num / den).atan()
    }
}

/// Textbook slip angles. Singular at zero longitudinal speed.
pub fn slip_angles_standard(x: &StateVec, p: &VehicleParams) -> Result<(f64, f64)> {
    let (vx, vy, omega, delta) = (x[idx::VX], x[idx::VY], x[idx::OMEGA], x[idx::DELTA]);
    let (sd, cd) = delta.sin_cos();
    let vyf = vy + omega * p.lf;
    let den_f = vx * cd + vyf * sd;
    if den_f.abs() < 1e-9 || vx.abs() < 1e-9 {
        return Err(Error::Domain(format!(
            "standard slip angles are singular at Vx = {vx}, front denominator {den_f}"
        )));
    }
    let alpha_f = ((vyf * cd - vx * sd) / den_f).atan();
    let alpha_r = ((vy - omega * p.lr) / vx).atan();
    Ok((alpha_f, alpha_r))
}

/// Slip angles regularised by `Vx tanh(kappa Vx)` in the numerator and `eps0`
/// in the denominator. Both vanish at `Vx = 0`.
pub fn slip_angles_modified(x: &StateVec, p: &VehicleParams) -> (f64, f64) {
    let (vx, vy, omega, delta) = (x[idx::VX], x[idx::VY], x[idx::OMEGA], x[idx::DELTA]);
    let (sd, cd) = delta.sin_cos();
    let vyf = vy + omega * p.lf;
    let shaping = vx * (p.kappa_slip * vx).tanh();
    let num_f = (vyf * cd - vx * sd) * shaping;
    let den_f = (vx * cd + vyf * sd) * vx + p.eps0;
    let num_r = (vy - omega * p.lr) * shaping;
    let den_r = vx * vx + p.eps0;
    (atan_ratio(num_f, den_f), atan_ratio(num_r, den_r))
}

/// Axle lateral force (two tyres) for slip angle `alpha`.
pub fn lateral_force(alpha: f64, p: &VehicleParams) -> f64 {
    let ba = p.pacejka_b * alpha;
    -2.0 * p.pacejka_d * (p.pacejka_c * (ba + p.pacejka_e * (ba.atan() - ba)).atan()).sin()
}

pub fn aero_force(vx: f64, p: &VehicleParams) -> f64 {
    p.aero_drag * vx * vx.abs()
}

pub fn tyre_forces(x: &StateVec, p: &VehicleParams) -> TyreForces {
    let (alpha_f, alpha_r) = slip_angles_modified(x, p);
    TyreForces {
        front_lateral: lateral_force(alpha_f, p),
        rear_lateral: lateral_force(alpha_r, p),
        rear_longitudinal: x[idx::TR] / p.wheel_radius,
        aero: aero_force(x[idx::VX], p),
    }
}

/// Time derivative of the augmented state.
pub fn dynamics(x: &StateVec, u: &ControlVec, curvature: f64, p: &VehicleParams) -> Result<StateVec> {
    let (y, xi, vx, vy, omega, delta) =
        (x[idx::Y], x[idx::XI], x[idx::VX], x[idx::VY], x[idx::OMEGA], x[idx::DELTA]);
    let denom = 1.0 - curvature * y;
    if denom.abs() < 1e-6 {
        return Err(Error::Singularity(denom.abs()));
    }
    let f = tyre_forces(x, p);
    let (sx, cx) = xi.sin_cos();
    let (sd, cd) = delta.sin_cos();
    let s_dot = (vx * cx - vy * sx) / denom;
    let mut dx = StateVec::zeros();
    dx[idx::S] = s_dot;
    dx[idx::Y] = vx * sx + vy * cx;
    dx[idx::XI] = omega - curvature * s_dot;
    dx[idx::VX] = omega * vy + (f.rear_longitudinal - f.front_lateral * sd - f.aero) / p.mass;
    dx[idx::VY] = -omega * vx + (f.rear_lateral + f.front_lateral * cd) / p.mass;
    dx[idx::OMEGA] = (-f.rear_lateral * p.lr + f.front_lateral * p.lf * cd) / p.yaw_inertia;
    dx[idx::DELTA] = u[0];
    dx[idx::TR] = u[1];
    dx[idx::T] = 1.0;
    Ok(dx)
}

/// Torque limits from the equivalent friction ellipse, given the lateral
/// acceleration `vy_dot` of the current iterate. Square-root arguments are
/// clamped at zero.
pub fn friction_ellipse_bounds(x: &StateVec, vy_dot: f64, p: &VehicleParams) -> (f64, f64) {
    let f = tyre_forces(x, p);
    let coupling = x[idx::OMEGA] * x[idx::VY]
        - f.front_lateral * x[idx::DELTA].sin() / p.mass
        - f.aero / p.mass;
    let root = |b: f64| (1.0 - vy_dot * vy_dot / (b * b)).max(0.0).sqrt();
    let scale = p.wheel_radius * p.mass;
    let tr_max = scale * (p.a1 * root(p.b1) - coupling);
    let tr_min = scale * (-p.a2 * root(p.b2) - coupling);
    (tr_min, tr_max)
}

/// Central finite-difference Jacobian with per-component relative steps.
pub fn fd_jacobian<const N: usize, const M: usize, F>(
    f: F,
    at: &SVector<f64, M>,
) -> Result<SMatrix<f64, N, M>>
where
    F: Fn(&SVector<f64, M>) -> Result<SVector<f64, N>>,
{
    let mut jac = SMatrix::<f64, N, M>::zeros();
    let mut probe = *at;
    for j in 0..M {
        let step = 1e-6 * at[j].abs().max(1.0);
        let orig = probe[j];
        probe[j] = orig + step;
        let fp = f(&probe)?;
        probe[j] = orig - step;
        let fm = f(&probe)?;
        probe[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    Ok(jac)
}

/// One implicit-midpoint step `z = x + h f((x + z)/2, u)` solved by Newton's
/// method with a finite-difference Jacobian frozen at the explicit predictor.
/// If that chord iteration stalls, full Newton steps with a fresh Jacobian
/// at every iterate take over.
pub fn implicit_midpoint_step<const N: usize, const M: usize, F>(
    f: F,
    x: &SVector<f64, N>,
    u: &SVector<f64, M>,
    h: f64,
) -> Result<SVector<f64, N>>
where
    F: Fn(&SVector<f64, N>, &SVector<f64, M>) -> Result<SVector<f64, N>>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {h}")));
    }
    let mut z = x + f(x, u)? * h;
    let jac = fd_jacobian(|m: &SVector<f64, N>| f(m, u), &((x + z) * 0.5))?;
    let iteration = SMatrix::<f64, N, N>::identity() - jac * (0.5 * h);
    let lu = DMatrix::from_column_slice(N, N, iteration.as_slice()).lu();
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let g = z - x - f(&((x + z) * 0.5), u)? * h;
        residual = g.amax();
        if residual < NEWTON_TOL {
            return Ok(z);
        }
        let dz = lu
            .solve(&DVector::from_column_slice(g.as_slice()))
            .ok_or_else(|| Error::Domain("singular Newton matrix in implicit midpoint step".into()))?;
        z -= SVector::<f64, N>::from_column_slice(dz.as_slice());
    }
    // the chord iteration stalls when the predictor is poor (e.g. near
    // Vx = 0); continue with full Newton steps from the current point
    for _ in 0..NEWTON_MAX_ITER {
        let mid = (x + z) * 0.5;
        let g = z - x - f(&mid, u)? * h;
        residual = g.amax();
        if residual < NEWTON_TOL {
            return Ok(z);
        }
        let jac = fd_jacobian(|m: &SVector<f64, N>| f(m, u), &mid)?;
        let iteration = SMatrix::<f64, N, N>::identity() - jac * (0.5 * h);
        let dz = DMatrix::from_column_slice(N, N, iteration.as_slice())
            .lu()
            .solve(&DVector::from_column_slice(g.as_slice()))
            .ok_or_else(|| Error::Domain("singular Newton matrix in implicit midpoint step".into()))?;
        z -= SVector::<f64, N>::from_column_slice(dz.as_slice());
    }
    Err(Error::NonConvergence { residual, iterations: 2 * NEWTON_MAX_ITER })
}

/// Step together with the Jacobians of the discrete map with respect to the
/// initial state and the (held) control, from the implicit function theorem
/// applied at the converged midpoint.
#[allow(clippy::type_complexity)]
pub fn implicit_midpoint_sensitivities<const N: usize, const M: usize, F>(
    f: F,
    x: &SVector<f64, N>,
    u: &SVector<f64, M>,
    h: f64,
) -> Result<(SVector<f64, N>, SMatrix<f64, N, N>, SMatrix<f64, N, M>)>
where
    F: Fn(&SVector<f64, N>, &SVector<f64, M>) -> Result<SVector<f64, N>>,
{
    let z = implicit_midpoint_step(&f, x, u, h)?;
    let mid = (x + z) * 0.5;
    let jx = fd_jacobian(|m: &SVector<f64, N>| f(m, u), &mid)?;
    let ju = fd_jacobian(|v: &SVector<f64, M>| f(&mid, v), u)?;
    let eye = SMatrix::<f64, N, N>::identity();
    let lhs = DMatrix::from_column_slice(N, N, (eye - jx * (0.5 * h)).as_slice()).lu();
    let a = lhs
        .solve(&DMatrix::from_column_slice(N, N, (eye + jx * (0.5 * h)).as_slice()))
        .ok_or_else(|| Error::Domain("singular sensitivity system".into()))?;
    let b = lhs
        .solve(&DMatrix::from_column_slice(N, M, (ju * h).as_slice()))
        .ok_or_else(|| Error::Domain("singular sensitivity system".into()))?;
    Ok((
        z,
        SMatrix::<f64, N, N>::from_column_slice(a.as_slice()),
        SMatrix::<f64, N, M>::from_column_slice(b.as_slice()),
    ))
}

/// Vehicle step with implicit midpoint; the time state is advanced exactly.
pub fn integrate_step(
    x: &StateVec,
    u: &ControlVec,
    h: f64,
    curvature: &dyn Fn(f64) -> f64,
    p: &VehicleParams,
) -> Result<StateVec> {
    let mut z = implicit_midpoint_step(|m, v| dynamics(m, v, curvature(m[idx::S]), p), x, u, h)?;
    z[idx::T] = x[idx::T] + h;
    Ok(z)
}

pub fn sensitivities(
    x: &StateVec,
    u: &ControlVec,
    h: f64,
    curvature: &dyn Fn(f64) -> f64,
    p: &VehicleParams,
) -> Result<(StateVec, StateJacobian, ControlJacobian)> {
    let (mut z, mut a, mut b) =
        implicit_midpoint_sensitivities(|m, v| dynamics(m, v, curvature(m[idx::S]), p), x, u, h)?;
    z[idx::T] = x[idx::T] + h;
    // time decouples from everything else
    a.set_row(idx::T, &SMatrix::<f64, 1, NX>::zeros());
    a[(idx::T, idx::T)] = 1.0;
    b.set_row(idx::T, &SMatrix::<f64, 1, NU>::zeros());
    Ok((z, a, b))
}

/// Classical fourth-order Runge-Kutta step, used by the simulation plant.
pub fn rk4_step(
    x: &StateVec,
    u: &ControlVec,
    h: f64,
    curvature: &dyn Fn(f64) -> f64,
    p: &VehicleParams,
) -> Result<StateVec> {
    let f = |s: &StateVec| dynamics(s, u, curvature(s[idx::S]), p);
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (0.5 * h)))?;
    let k3 = f(&(x + k2 * (0.5 * h)))?;
    let k4 = f(&(x + k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn state(vx: f64, vy: f64, omega: f64, delta: f64) -> StateVec {
        VehicleState { vx, vy, omega, delta, ..Default::default() }.to_vector()
    }

    fn flat(_: f64) -> f64 {
        0.0
    }

    #[test]
    fn standard_slips() {
        let p = VehicleParams::default();
        let (af, ar) = slip_angles_standard(&state(10.0, 0.0, 0.0, 0.0), &p).unwrap();
        assert_eq!((af, ar), (0.0, 0.0));
        let (_, ar) = slip_angles_standard(&state(20.0, 0.5, 0.0, 0.0), &p).unwrap();
        assert_relative_eq!(ar, 0.024994793, epsilon = 1e-8);
        let (af, _) = slip_angles_standard(&state(10.0, 0.0, 0.2, 0.0), &p).unwrap();
        assert_relative_eq!(af, 0.023995394, epsilon = 1e-8);
        assert!(matches!(slip_angles_standard(&state(0.0, 1.0, 0.0, 0.0), &p), Err(Error::Domain(_))));
    }

    #[test]
    fn modified_slips() {
        let p = VehicleParams::default();
        assert_eq!(slip_angles_modified(&state(0.0, 1.0, 0.5, 0.0), &p), (0.0, 0.0));
        let (_, ar) = slip_angles_modified(&state(20.0, 0.5, 0.0, 0.0), &p);
        assert_relative_eq!(ar, (10.0 * 40f64.tanh() / 400.4).atan(), epsilon = 1e-15);
        assert_relative_eq!(ar, 0.024970, epsilon = 1e-6);
        let (_, ar) = slip_angles_modified(&state(1.0, 0.2, 0.0, 0.0), &p);
        assert_relative_eq!(ar, (0.2 * 2f64.tanh() / 1.4).atan(), epsilon = 1e-15);
        assert!(ar.abs() < 0.2f64.atan().abs());
    }

    #[test]
    fn modified_slips_finite_everywhere() {
        let p = VehicleParams::default();
        for &vx in &[-3.0, -1e-12, 0.0, 1e-12, 0.3, 5.0] {
            for &vy in &[-2.0, 0.0, 2.0] {
                for &delta in &[-0.5, 0.0, 0.5] {
                    let (af, ar) = slip_angles_modified(&state(vx, vy, 0.7, delta), &p);
                    assert!(af.is_finite() && ar.is_finite());
                }
            }
        }
    }

    #[test]
    fn lateral_force_shape() {
        let p = VehicleParams::default();
        assert_eq!(lateral_force(0.0, &p), 0.0);
        let a = 1e-5;
        let stiffness = 2.0 * p.pacejka_b * p.pacejka_c * p.pacejka_d;
        assert_relative_eq!(lateral_force(a, &p), -stiffness * a, max_relative = 1e-6);
        let asymptote = -2.0 * p.pacejka_d * (p.pacejka_c * std::f64::consts::FRAC_PI_2).sin();
        assert_relative_eq!(lateral_force(1e9, &p), asymptote, max_relative = 1e-6);
        for i in 0..100 {
            let a = i as f64 * 0.03;
            assert_relative_eq!(lateral_force(-a, &p), -lateral_force(a, &p));
            assert!(lateral_force(a, &p).abs() <= 2.0 * p.pacejka_d);
        }
    }

    #[test]
    fn dynamics_equilibria() {
        let p = VehicleParams::default();
        let d = dynamics(&StateVec::zeros(), &ControlVec::zeros(), 0.0, &p).unwrap();
        let mut expect = StateVec::zeros();
        expect[idx::T] = 1.0;
        assert_eq!(d, expect);

        let d = dynamics(&state(10.0, 0.0, 0.0, 0.0), &ControlVec::zeros(), 0.0, &p).unwrap();
        assert_relative_eq!(d[idx::S], 10.0);
        assert_relative_eq!(d[idx::VX], -p.aero_drag * 100.0 / p.mass);
        for i in [idx::Y, idx::XI, idx::VY, idx::OMEGA, idx::DELTA, idx::TR] {
            assert_eq!(d[i], 0.0);
        }
    }

    #[test]
    fn dynamics_singularity() {
        let p = VehicleParams::default();
        let mut x = StateVec::zeros();
        x[idx::Y] = 10.0;
        assert!(matches!(dynamics(&x, &ControlVec::zeros(), 0.1, &p), Err(Error::Singularity(_))));
    }

    #[test]
    fn rear_force_matches_torque() {
        let p = VehicleParams::default();
        let mut x = state(5.0, 0.1, 0.0, 0.0);
        x[idx::TR] = 321.0;
        let f = tyre_forces(&x, &p);
        assert_relative_eq!(f.rear_longitudinal * p.wheel_radius, 321.0, epsilon = 1e-12);
    }

    #[test]
    fn ellipse_bounds_trivial_cases() {
        let p = VehicleParams::default();
        let (lo, hi) = friction_ellipse_bounds(&StateVec::zeros(), 0.0, &p);
        assert_relative_eq!(hi, p.wheel_radius * p.mass * p.a1);
        assert_relative_eq!(lo, -p.wheel_radius * p.mass * p.a2);

        let mut x = state(8.0, 0.3, 0.2, 0.05);
        x[idx::TR] = 50.0;
        let f = tyre_forces(&x, &p);
        let coupling = 0.2 * 0.3 - f.front_lateral * 0.05f64.sin() / p.mass - f.aero / p.mass;
        let (_, hi) = friction_ellipse_bounds(&x, p.b1, &p);
        assert_relative_eq!(hi, p.wheel_radius * p.mass * (0.0 - coupling), epsilon = 1e-9);
        // beyond the ellipse the root is clamped, not NaN
        let (lo, hi) = friction_ellipse_bounds(&x, 2.0 * p.b1, &p);
        assert!(lo.is_finite() && hi.is_finite() && lo <= hi);
    }

    #[test]
    fn midpoint_linear_decay() {
        let f = |x: &SVector<f64, 1>, _: &SVector<f64, 1>| Ok(-x);
        let z = implicit_midpoint_step(f, &SVector::<f64, 1>::new(1.0), &SVector::<f64, 1>::zeros(), 0.1)
            .unwrap();
        assert_relative_eq!(z[0], 0.95 / 1.05, epsilon = 1e-12);
        assert_relative_eq!(z[0], 0.904762, epsilon = 1e-6);
    }

    #[test]
    fn midpoint_rejects_bad_step() {
        let f = |x: &SVector<f64, 1>, _: &SVector<f64, 1>| Ok(-x);
        let r = implicit_midpoint_step(f, &SVector::<f64, 1>::new(1.0), &SVector::<f64, 1>::zeros(), 0.0);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn equilibrium_step_only_advances_time() {
        let p = VehicleParams::default();
        let x = StateVec::zeros();
        let z = integrate_step(&x, &ControlVec::zeros(), 0.05, &flat, &p).unwrap();
        let mut expect = x;
        expect[idx::T] = 0.05;
        assert_eq!(z, expect);
    }

    #[test]
    fn trivial_sensitivity_rows() {
        let p = VehicleParams::default();
        let h = 0.05;
        let x = VehicleState::cruise(0.0, 0.0, 10.0, &p).to_vector();
        let (_, a, b) = sensitivities(&x, &ControlVec::zeros(), h, &flat, &p).unwrap();
        for j in 0..NX {
            assert_eq!(a[(idx::T, j)], if j == idx::T { 1.0 } else { 0.0 });
        }
        assert_eq!(b[(idx::T, 0)], 0.0);
        assert_relative_eq!(a[(idx::DELTA, idx::DELTA)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(b[(idx::DELTA, 0)], h, epsilon = 1e-9);
        assert_relative_eq!(b[(idx::TR, 1)], h, epsilon = 1e-9);
    }
}
