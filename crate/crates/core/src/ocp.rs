//! Finite-horizon vehicle OCP: references, normalised weights, the terminal
//! Riccati weight, DRIVE/OVERTAKE blending and the per-node constraint
//! schedule, exposed to the shooting engine through [`ShootingProblem`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    evaluate_node, kappa_vel_for_deceleration, select_obstacles, velocity_profile_bound, velocity_profile_slope,
    Obstacle, SoftPenaltyConfig, MAX_OBSTACLES, N_SOFT,
};
use crate::error::{Error, Result};
use crate::riccati;
use crate::road::RoadMap;
use crate::rti::{Linearization, QuadraticTerm, RowKey, ShootingProblem, StageRow};
use crate::vehicle::{self, dynamics, friction_ellipse_bounds, idx, StateVec, VehicleParams, VehicleState, NU, NX};

/// Row tags of the per-node constraint schedule.
pub mod tag {
    pub const STEER: usize = 0;
    pub const TORQUE: usize = 1;
    pub const ELLIPSE_UPPER: usize = 2;
    pub const ELLIPSE_LOWER: usize = 3;
    pub const VELOCITY_PROFILE: usize = 4;
    pub const MIN_SPEED: usize = 5;
    /// four boundary rows follow: left front, left rear, right front, right rear
    pub const BOUNDARY: usize = 6;
    /// circle pair `p` of obstacle slot `j` has tag `OBSTACLE + 4 j + p`
    pub const OBSTACLE: usize = 10;
}

/// `Q_ii = 1 / span^2`; an infinite span leaves the state unweighted.
pub fn normalize_state_weights(spans: &[f64]) -> Result<Vec<f64>> {
    spans
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s == f64::INFINITY {
                Ok(0.0)
            } else if s > 0.0 && s.is_finite() {
                Ok(1.0 / (s * s))
            } else {
                Err(Error::Config(format!("span {i} must be positive, got {s}")))
            }
        })
        .collect()
}

/// Maximum desired deviation per state; `None` leaves the state free.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct StateSpans {
    pub s: Option<f64>,
    pub y: Option<f64>,
    pub xi: Option<f64>,
    pub vx: Option<f64>,
    pub vy: Option<f64>,
    pub omega: Option<f64>,
    pub delta: Option<f64>,
    pub tr: Option<f64>,
    pub t: Option<f64>,
}

impl StateSpans {
    pub fn drive() -> Self {
        Self {
            s: None,
            y: Some(0.5),
            xi: Some(0.1),
            vx: Some(1.0),
            vy: Some(0.5),
            omega: Some(0.3),
            delta: Some(0.05),
            tr: Some(200.0),
            t: None,
        }
    }

    /// Looser lateral tracking so the soft obstacle penalties can move the
    /// vehicle into the adjacent lane.
    pub fn overtake() -> Self {
        Self { y: Some(3.0), xi: Some(0.15), vx: Some(1.5), ..Self::drive() }
    }

    pub fn as_array(&self) -> [f64; NX] {
        [self.s, self.y, self.xi, self.vx, self.vy, self.omega, self.delta, self.tr, self.t].map(|v| v.unwrap_or(f64::INFINITY))
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DrivingMode {
    Drive,
    Overtake,
}

/// Mode transition state: `lambda = 0` is DRIVE, `lambda = 1` is OVERTAKE.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct ModeBlend {
    pub target: DrivingMode,
    pub lambda: f64,
}

impl ModeBlend {
    pub fn settled(mode: DrivingMode) -> Self {
        let lambda = match mode {
            DrivingMode::Drive => 0.0,
            DrivingMode::Overtake => 1.0,
        };
        Self { target: mode, lambda }
    }

    /// Move `lambda` towards the target by `dt / t_blend`.
    pub fn advance(&mut self, dt: f64, t_blend: f64) {
        let step = if t_blend > 0.0 { dt / t_blend } else { 1.0 };
        self.lambda = match self.target {
            DrivingMode::Drive => (self.lambda - step).max(0.0),
            DrivingMode::Overtake => (self.lambda + step).min(1.0),
        };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub q_state: [f64; NX],
    pub q_soft: [f64; N_SOFT],
    pub r: [f64; NU],
    pub p: DMatrix<f64>,
}

impl WeightSet {
    pub fn validate(&self) -> Result<()> {
        if self.q_state.iter().chain(&self.q_soft).chain(&self.r).any(|w| !(*w >= 0.0)) || self.r.iter().any(|w| *w <= 0.0) {
            return Err(Error::Config("weights must be non-negative and R positive".into()));
        }
        if (&self.p - self.p.transpose()).amax() > 1e-9 * (1.0 + self.p.amax()) {
            return Err(Error::Config("terminal weight is not symmetric".into()));
        }
        Ok(())
    }
}

/// Entrywise convex combination `(1 - lambda) drive + lambda overtake`.
pub fn blend_modes(drive: &WeightSet, overtake: &WeightSet, lambda: f64) -> Result<WeightSet> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("blend factor {lambda} outside [0, 1]")));
    }
    let mix = |a: f64, b: f64| (1.0 - lambda) * a + lambda * b;
    let mut out = drive.clone();
    for i in 0..NX {
        out.q_state[i] = mix(drive.q_state[i], overtake.q_state[i]);
    }
    for i in 0..N_SOFT {
        out.q_soft[i] = mix(drive.q_soft[i], overtake.q_soft[i]);
    }
    for i in 0..NU {
        out.r[i] = mix(drive.r[i], overtake.r[i]);
    }
    out.p = &drive.p * (1.0 - lambda) + &overtake.p * lambda;
    Ok(out)
}

/// States that enter the Riccati problem: `s` and `t` are pure integrators
/// without weight and are left out.
const RICCATI_STATES: [usize; 7] = [idx::Y, idx::XI, idx::VX, idx::VY, idx::OMEGA, idx::DELTA, idx::TR];

/// Terminal weight from the infinite-horizon LQR problem linearised at
/// straight-line cruise at `v_ref`, with stage weights scaled by `dt`.
pub fn terminal_weight(params: &VehicleParams, v_ref: f64, q_state: &[f64; NX], r: &[f64; NU], dt: f64) -> Result<DMatrix<f64>> {
    let x = VehicleState::cruise(0.0, 0.0, v_ref, params).to_vector();
    let (_, a, b) = vehicle::sensitivities(&x, &vehicle::ControlVec::zeros(), dt, &|_| 0.0, params)?;
    let n = RICCATI_STATES.len();
    let a_sub = DMatrix::from_fn(n, n, |i, j| a[(RICCATI_STATES[i], RICCATI_STATES[j])]);
    let b_sub = DMatrix::from_fn(n, NU, |i, j| b[(RICCATI_STATES[i], j)]);
    let q_sub = DMatrix::from_fn(n, n, |i, j| if i == j { q_state[RICCATI_STATES[i]] * dt } else { 0.0 });
    let r_mat = DMatrix::from_fn(NU, NU, |i, j| if i == j { r[i] * dt } else { 0.0 });
    let p_sub = riccati::solve_dare(&a_sub, &b_sub, &q_sub, &r_mat)?;
    let residual = riccati::dare_residual(&a_sub, &b_sub, &q_sub, &r_mat, &p_sub)?.amax();
    if residual > 1e-8 * p_sub.amax() {
        return Err(Error::Riccati(format!("terminal weight residual {residual:e} too large")));
    }
    let mut p = DMatrix::zeros(NX, NX);
    for (i, &si) in RICCATI_STATES.iter().enumerate() {
        for (j, &sj) in RICCATI_STATES.iter().enumerate() {
            p[(si, sj)] = p_sub[(i, j)];
        }
    }
    Ok(p)
}

/// Command from the behavioural layer.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct BehaviouralCommand {
    pub mode: DrivingMode,
    pub v_ref: f64,
    #[serde(default)]
    pub y_ref: f64,
    #[serde(default)]
    pub s_stop: Option<f64>,
    /// safety-ellipse weights; planner defaults when absent
    #[serde(default)]
    pub d_s: Option<f64>,
    #[serde(default)]
    pub d_y: Option<f64>,
}

impl BehaviouralCommand {
    pub fn drive(v_ref: f64) -> Self {
        Self { mode: DrivingMode::Drive, v_ref, y_ref: 0.0, s_stop: None, d_s: None, d_y: None }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon_steps: usize,
    pub dt: f64,
    pub delta_max: f64,
    pub tr_min: f64,
    pub tr_max: f64,
    pub u1_max: f64,
    pub u2_max: f64,
    pub drive_spans: StateSpans,
    pub overtake_spans: StateSpans,
    /// steering-rate and torque-rate spans for R
    pub control_spans: [f64; NU],
    pub soft: SoftPenaltyConfig,
    /// deceleration allowed by the velocity profile, m/s^2
    pub a_comfort: f64,
    /// deceleration of the braking floor under the velocity profile, m/s^2
    pub a_brake: f64,
    /// delay before the braking floor starts decreasing, s
    pub brake_lag: f64,
    pub vx_min: f64,
    /// circle-pair rows are emitted when the pair distance is below this
    /// multiple of the constraint radius
    pub obstacle_activation: f64,
    pub t_blend: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 60,
            dt: 0.05,
            delta_max: 0.5,
            tr_min: -3000.0,
            tr_max: 2000.0,
            u1_max: 0.4,
            u2_max: 8000.0,
            drive_spans: StateSpans::drive(),
            overtake_spans: StateSpans::overtake(),
            control_spans: [0.2, 3000.0],
            soft: SoftPenaltyConfig::default(),
            a_comfort: 3.0,
            a_brake: 5.0,
            brake_lag: 0.4,
            vx_min: 0.0,
            obstacle_activation: 2.0,
            t_blend: 1.0,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("horizon needs at least one step and dt > 0".into()));
        }
        if !(self.delta_max > 0.0) || !(self.tr_min < self.tr_max) || !(self.u1_max > 0.0) || !(self.u2_max > 0.0) {
            return Err(Error::Config("actuator bounds must satisfy min < max".into()));
        }
        if !(self.a_comfort > 0.0) || !(self.a_brake > 0.0) || self.brake_lag < 0.0 || !(self.obstacle_activation >= 1.0) {
            return Err(Error::Config("a_comfort, a_brake must be positive, brake_lag >= 0, activation >= 1".into()));
        }
        normalize_state_weights(&self.drive_spans.as_array())?;
        normalize_state_weights(&self.overtake_spans.as_array())?;
        normalize_state_weights(&self.control_spans)?;
        Ok(())
    }

    pub fn horizon_time(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    /// Weight set of one mode at cruise speed `v_ref`.
    pub fn weights_for(&self, mode: DrivingMode, params: &VehicleParams, v_ref: f64) -> Result<WeightSet> {
        let spans = match mode {
            DrivingMode::Drive => &self.drive_spans,
            DrivingMode::Overtake => &self.overtake_spans,
        };
        let qs = normalize_state_weights(&spans.as_array())?;
        let rs = normalize_state_weights(&self.control_spans)?;
        let mut q_state = [0.0; NX];
        q_state.copy_from_slice(&qs);
        let r = [rs[0], rs[1]];
        let p = terminal_weight(params, v_ref.max(1.0), &q_state, &r, self.dt)?;
        Ok(WeightSet { q_state, q_soft: self.soft.channel_weights(), r, p })
    }
}

/// Spatial velocity limit with a braking floor that keeps the current speed
/// reachable: `Vx <= max(profile(s), v0 - a_brake (t - lag)^+)`.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct VelocityProfile {
    pub v_ref: f64,
    pub s_max: f64,
    pub kappa_vel: f64,
    pub v0: f64,
    pub a_brake: f64,
    pub lag: f64,
}

impl VelocityProfile {
    pub fn floor(&self, t: f64) -> f64 {
        (self.v0 - self.a_brake * (t - self.lag).max(0.0)).max(0.0)
    }

    pub fn bound(&self, s: f64, t: f64) -> f64 {
        velocity_profile_bound(s, self.v_ref, self.s_max, self.kappa_vel).max(self.floor(t))
    }

    /// `d bound / d s` (zero where the floor is active).
    pub fn slope(&self, s: f64, t: f64) -> f64 {
        if velocity_profile_bound(s, self.v_ref, self.s_max, self.kappa_vel) >= self.floor(t) {
            velocity_profile_slope(s, self.v_ref, self.s_max, self.kappa_vel)
        } else {
            0.0
        }
    }
}

/// One sub-planner's OCP for one cycle. Node times are relative to the cycle
/// start (`x0.t = 0`).
#[derive(Clone, Debug)]
pub struct OcpDefinition<'a> {
    pub road: &'a RoadMap,
    pub params: VehicleParams,
    pub config: OcpConfig,
    pub obstacles: Vec<Obstacle>,
    pub weights: WeightSet,
    pub soft: SoftPenaltyConfig,
    /// per node 0..=N state reference
    pub reference: Vec<StateVec>,
    pub profile: VelocityProfile,
}

/// Assemble the OCP for the simulated spatial horizon `horizon_length`
/// (clamped to the perceived horizon and any stop point).
#[allow(clippy::too_many_arguments)]
/// Tolerance on the initial abscissa, m.
const MAP_SLACK: f64 = 1.0;

pub fn build_ocp<'a>(
    x0: &StateVec,
    road: &'a RoadMap,
    obstacles: &[Obstacle],
    command: &BehaviouralCommand,
    weights: WeightSet,
    config: &OcpConfig,
    params: &VehicleParams,
    horizon_length: f64,
    perceived_horizon: f64,
) -> Result<OcpDefinition<'a>> {
    let s0 = x0[idx::S];
    // noisy estimates may sit slightly outside the mapped interval
    if !(s0 >= -MAP_SLACK && s0 <= road.length() + MAP_SLACK) {
        return Err(Error::OutOfRange { s: s0, length: road.length() });
    }
    let n = config.horizon_steps;
    let mut s_max = s0 + horizon_length.min(perceived_horizon).max(0.0);
    if let Some(stop) = command.s_stop {
        s_max = s_max.min(stop);
    }
    let kappa_vel = kappa_vel_for_deceleration(command.v_ref, config.a_comfort);
    let profile = VelocityProfile {
        v_ref: command.v_ref,
        s_max,
        kappa_vel,
        v0: x0[idx::VX].max(0.0),
        a_brake: config.a_brake,
        lag: config.brake_lag,
    };
    let reference = (0..=n)
        .map(|k| {
            let mut r = StateVec::zeros();
            let t = k as f64 * config.dt;
            r[idx::S] = s0 + command.v_ref * t;
            r[idx::Y] = command.y_ref;
            r[idx::VX] = command.v_ref;
            r[idx::T] = t;
            r
        })
        .collect();
    let mut soft = config.soft.clone();
    if let Some(d_s) = command.d_s {
        soft.d_s = d_s;
    }
    if let Some(d_y) = command.d_y {
        soft.d_y = d_y;
    }
    let selected = select_obstacles(obstacles, x0, config.horizon_time(), MAX_OBSTACLES);
    weights.validate()?;
    Ok(OcpDefinition {
        road,
        params: params.clone(),
        config: config.clone(),
        obstacles: selected,
        weights,
        soft,
        reference,
        profile,
    })
}

fn to_static(x: &DVector<f64>) -> StateVec {
    StateVec::from_column_slice(x.as_slice())
}

fn row_vec(r: &[f64; NX]) -> DVector<f64> {
    DVector::from_column_slice(r)
}

impl OcpDefinition<'_> {
    fn curvature(&self) -> impl Fn(f64) -> f64 + '_ {
        move |s| self.road.curvature_clamped(s)
    }

    /// Both torque limits of the friction ellipse at `x`, with the lateral
    /// acceleration frozen at its value for the current iterate.
    fn ellipse_rows(&self, x: &StateVec) -> Result<((f64, DVector<f64>), (f64, DVector<f64>))> {
        let kappa = self.road.curvature_clamped(x[idx::S]);
        let vy_dot = dynamics(x, &vehicle::ControlVec::zeros(), kappa, &self.params)?[idx::VY];
        let (lo, hi) = friction_ellipse_bounds(x, vy_dot, &self.params);
        let mut g_lo = DVector::zeros(NX);
        let mut g_hi = DVector::zeros(NX);
        let mut probe = *x;
        for j in [idx::VX, idx::VY, idx::OMEGA, idx::DELTA] {
            let h = 1e-6 * x[j].abs().max(1.0);
            let orig = probe[j];
            probe[j] = orig + h;
            let (lp, hp) = friction_ellipse_bounds(&probe, vy_dot, &self.params);
            probe[j] = orig - h;
            let (lm, hm) = friction_ellipse_bounds(&probe, vy_dot, &self.params);
            probe[j] = orig;
            g_lo[j] = (lp - lm) / (2.0 * h);
            g_hi[j] = (hp - hm) / (2.0 * h);
        }
        Ok(((lo, g_lo), (hi, g_hi)))
    }

    /// Nonlinear hard-constraint violation at a state (0 when feasible).
    pub fn hard_violation(&self, k: usize, x: &StateVec) -> f64 {
        let dx = DVector::zeros(NX);
        let xd = DVector::from_column_slice(x.as_slice());
        self.state_rows(k, &xd)
            .map(|rows| {
                rows.iter()
                    .map(|r| {
                        let v = r.value + r.grad.dot(&dx);
                        (r.lo - v).max(v - r.hi).max(0.0)
                    })
                    .fold(0.0, f64::max)
            })
            .unwrap_or(f64::INFINITY)
    }
}

impl ShootingProblem for OcpDefinition<'_> {
    fn horizon(&self) -> usize {
        self.config.horizon_steps
    }

    fn nx(&self) -> usize {
        NX
    }

    fn nu(&self) -> usize {
        NU
    }

    fn linearize(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        let xs = to_static(x);
        let us = vehicle::ControlVec::from_column_slice(u.as_slice());
        let (z, a, b) = vehicle::sensitivities(&xs, &us, self.config.dt, &self.curvature(), &self.params)?;
        Ok(Linearization {
            x_next: DVector::from_column_slice(z.as_slice()),
            a: DMatrix::from_column_slice(NX, NX, a.as_slice()),
            b: DMatrix::from_column_slice(NX, NU, b.as_slice()),
        })
    }

    fn state_cost(&self, k: usize, x: &DVector<f64>) -> Result<QuadraticTerm> {
        let dt = self.config.dt;
        let xs = to_static(x);
        let err = xs - self.reference[k];
        let mut hess = DMatrix::zeros(NX, NX);
        let mut grad = DVector::zeros(NX);
        if k == self.config.horizon_steps {
            hess += &self.weights.p;
            grad += &self.weights.p * DVector::from_column_slice(err.as_slice());
        } else {
            for i in 0..NX {
                hess[(i, i)] = self.weights.q_state[i] * dt;
                grad[i] = self.weights.q_state[i] * dt * err[i];
            }
        }
        let ev = evaluate_node(&xs, &self.obstacles, self.road, &self.params, &self.soft);
        for c in 0..N_SOFT {
            let w = self.weights.q_soft[c] * dt;
            if w == 0.0 || ev.soft[c] == 0.0 {
                continue;
            }
            let j = row_vec(&ev.soft_jac[c]);
            hess += &j * j.transpose() * w;
            grad += &j * (w * ev.soft[c]);
        }
        Ok(QuadraticTerm { hess, grad })
    }

    fn control_cost(&self, _k: usize, u: &DVector<f64>) -> QuadraticTerm {
        let dt = self.config.dt;
        let hess = DMatrix::from_fn(NU, NU, |i, j| if i == j { self.weights.r[i] * dt } else { 0.0 });
        let grad = &hess * u;
        QuadraticTerm { hess, grad }
    }

    fn control_bounds(&self, _k: usize) -> (DVector<f64>, DVector<f64>) {
        let c = &self.config;
        (DVector::from_vec(vec![-c.u1_max, -c.u2_max]), DVector::from_vec(vec![c.u1_max, c.u2_max]))
    }

    fn state_rows(&self, k: usize, x: &DVector<f64>) -> Result<Vec<StageRow>> {
        let xs = to_static(x);
        let c = &self.config;
        let unit = |i: usize| DVector::from_fn(NX, |j, _| if i == j { 1.0 } else { 0.0 });
        let key = |tag: usize| RowKey { node: k, tag };
        let mut rows = vec![
            StageRow { key: key(tag::STEER), grad: unit(idx::DELTA), value: xs[idx::DELTA], lo: -c.delta_max, hi: c.delta_max },
            StageRow { key: key(tag::TORQUE), grad: unit(idx::TR), value: xs[idx::TR], lo: c.tr_min, hi: c.tr_max },
        ];
        let ((lo, g_lo), (hi, g_hi)) = self.ellipse_rows(&xs)?;
        rows.push(StageRow {
            key: key(tag::ELLIPSE_UPPER),
            grad: unit(idx::TR) - g_hi,
            value: xs[idx::TR] - hi,
            lo: f64::NEG_INFINITY,
            hi: 0.0,
        });
        rows.push(StageRow {
            key: key(tag::ELLIPSE_LOWER),
            grad: unit(idx::TR) - g_lo,
            value: xs[idx::TR] - lo,
            lo: 0.0,
            hi: f64::INFINITY,
        });
        let (s, t) = (xs[idx::S], xs[idx::T]);
        let mut g = unit(idx::VX);
        g[idx::S] = -self.profile.slope(s, t);
        rows.push(StageRow {
            key: key(tag::VELOCITY_PROFILE),
            grad: g,
            value: xs[idx::VX] - self.profile.bound(s, t),
            lo: f64::NEG_INFINITY,
            hi: 0.0,
        });
        rows.push(StageRow { key: key(tag::MIN_SPEED), grad: unit(idx::VX), value: xs[idx::VX], lo: c.vx_min, hi: f64::INFINITY });

        let ev = evaluate_node(&xs, &self.obstacles, self.road, &self.params, &self.soft);
        let n_obs_rows = 4 * MAX_OBSTACLES;
        for b in 0..4 {
            rows.push(StageRow {
                key: key(tag::BOUNDARY + b),
                grad: row_vec(&ev.hard_jac[n_obs_rows + b]),
                value: ev.hard[n_obs_rows + b],
                lo: f64::NEG_INFINITY,
                hi: 0.0,
            });
        }
        for (j, obs) in self.obstacles.iter().enumerate() {
            let radius2 = (self.params.rho_ego + obs.rho).powi(2);
            let threshold = radius2 * (1.0 - c.obstacle_activation.powi(2));
            for p in 0..4 {
                let slot = 4 * j + p;
                if ev.hard[slot] > threshold {
                    rows.push(StageRow {
                        key: key(tag::OBSTACLE + slot),
                        grad: row_vec(&ev.hard_jac[slot]),
                        value: ev.hard[slot],
                        lo: f64::NEG_INFINITY,
                        hi: 0.0,
                    });
                }
            }
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::QpOptions;
    use crate::rti::{RtiEngine, ShootingIterate};
    use approx::assert_relative_eq;

    #[test]
    fn normalized_weights() {
        assert_eq!(normalize_state_weights(&[2.0, 1.0, f64::INFINITY]).unwrap(), vec![0.25, 1.0, 0.0]);
        assert!(normalize_state_weights(&[0.0]).is_err());
        assert!(normalize_state_weights(&[-1.0]).is_err());
        // an error equal to its span costs the same in every state
        let spans = [0.5, 0.1, 200.0];
        let w = normalize_state_weights(&spans).unwrap();
        for (wi, si) in w.iter().zip(spans) {
            assert_relative_eq!(wi * si * si, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let p = VehicleParams::default();
        let cfg = OcpConfig::default();
        let d = cfg.weights_for(DrivingMode::Drive, &p, 10.0).unwrap();
        let o = cfg.weights_for(DrivingMode::Overtake, &p, 10.0).unwrap();
        assert_eq!(blend_modes(&d, &o, 0.0).unwrap(), d);
        assert_eq!(blend_modes(&d, &o, 1.0).unwrap(), o);
        let mid = blend_modes(&d, &o, 0.5).unwrap();
        assert_relative_eq!(mid.q_state[idx::Y], 0.5 * (d.q_state[idx::Y] + o.q_state[idx::Y]));
        assert!(blend_modes(&d, &o, 1.5).is_err());
        let mut m = ModeBlend::settled(DrivingMode::Drive);
        m.target = DrivingMode::Overtake;
        for _ in 0..10 {
            m.advance(0.05, 1.0);
        }
        assert_relative_eq!(m.lambda, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn terminal_weight_stabilises_cruise() {
        let p = VehicleParams::default();
        let cfg = OcpConfig::default();
        let w = cfg.weights_for(DrivingMode::Drive, &p, 13.0).unwrap();
        assert!((&w.p - w.p.transpose()).amax() < 1e-9 * w.p.amax());
        assert!(w.p.symmetric_eigenvalues().iter().all(|e| *e > -1e-9 * w.p.amax()));
        let x = VehicleState::cruise(0.0, 0.0, 13.0, &p).to_vector();
        let (_, a, b) = vehicle::sensitivities(&x, &vehicle::ControlVec::zeros(), cfg.dt, &|_| 0.0, &p).unwrap();
        let n = RICCATI_STATES.len();
        let a_sub = DMatrix::from_fn(n, n, |i, j| a[(RICCATI_STATES[i], RICCATI_STATES[j])]);
        let b_sub = DMatrix::from_fn(n, NU, |i, j| b[(RICCATI_STATES[i], j)]);
        let p_sub = DMatrix::from_fn(n, n, |i, j| w.p[(RICCATI_STATES[i], RICCATI_STATES[j])]);
        let r = DMatrix::from_fn(NU, NU, |i, j| if i == j { w.r[i] * cfg.dt } else { 0.0 });
        let k = riccati::lqr_gain(&a_sub, &b_sub, &r, &p_sub).unwrap();
        assert!(riccati::spectral_radius(&(&a_sub - &b_sub * k)) < 1.0);
    }

    #[test]
    fn stop_command_zeroes_the_profile() {
        let p = VehicleParams::default();
        let cfg = OcpConfig::default();
        let road = RoadMap::straight(200.0, 3.5, -3.5).unwrap();
        let x0 = VehicleState::cruise(0.0, 0.0, 0.0, &p).to_vector();
        let cmd = BehaviouralCommand { s_stop: Some(15.0), ..BehaviouralCommand::drive(8.0) };
        let w = cfg.weights_for(DrivingMode::Drive, &p, 8.0).unwrap();
        let ocp = build_ocp(&x0, &road, &[], &cmd, w, &cfg, &p, 50.0, 50.0).unwrap();
        assert_eq!(ocp.profile.s_max, 15.0);
        assert_eq!(ocp.profile.bound(15.0, 1.0), 0.0);
        assert!(ocp.profile.bound(0.0, 1.0) > 7.0);
    }

    #[test]
    fn obstacle_rows_follow_prediction() {
        let p = VehicleParams::default();
        let cfg = OcpConfig::default();
        let road = RoadMap::straight(300.0, 5.25, -1.75).unwrap();
        let x0 = VehicleState::cruise(0.0, 0.0, 13.0, &p).to_vector();
        let obs = Obstacle::new(25.0, 0.0, 10.0, 0.0, 1.0, 1.1);
        let cmd = BehaviouralCommand::drive(13.0);
        let w = cfg.weights_for(DrivingMode::Drive, &p, 13.0).unwrap();
        let ocp = build_ocp(&x0, &road, &[obs], &cmd, w, &cfg, &p, 100.0, 100.0).unwrap();
        // an iterate that drives through the obstacle activates the rows near contact
        let mut x = x0;
        x[idx::T] = 25.0 / 3.0;
        x[idx::S] = 13.0 * x[idx::T];
        let rows = ocp.state_rows(5, &DVector::from_column_slice(x.as_slice())).unwrap();
        let obstacle_rows: Vec<_> = rows.iter().filter(|r| r.key.tag >= tag::OBSTACLE).collect();
        assert_eq!(obstacle_rows.len(), 4);
        assert!(obstacle_rows.iter().any(|r| r.value > 0.0));
        x[idx::T] = 0.0;
        x[idx::S] = 0.0;
        let rows = ocp.state_rows(5, &DVector::from_column_slice(x.as_slice())).unwrap();
        assert!(rows.iter().all(|r| r.key.tag < tag::OBSTACLE));
    }

    #[test]
    fn straight_cruise_is_stationary() {
        let p = VehicleParams::default();
        let cfg = OcpConfig::default();
        let road = RoadMap::straight(400.0, 3.5, -3.5).unwrap();
        let x0 = VehicleState::cruise(0.0, 0.0, 10.0, &p).to_vector();
        let cmd = BehaviouralCommand::drive(10.0);
        let w = cfg.weights_for(DrivingMode::Drive, &p, 10.0).unwrap();
        let ocp = build_ocp(&x0, &road, &[], &cmd, w, &cfg, &p, 200.0, 200.0).unwrap();
        let x0d = DVector::from_column_slice(x0.as_slice());
        let it = ShootingIterate::rollout(&ocp, &x0d, vec![DVector::zeros(NU); cfg.horizon_steps]).unwrap();
        let mut engine = RtiEngine::new(it, QpOptions::default());
        let report = engine.sqp_cycle(&ocp, &x0d, 2).unwrap();
        let u = report.u_apply.unwrap();
        // only the small drag-balancing torque offset from the zero torque reference
        assert!(u[0].abs() < 1e-6, "steering rate {}", u[0]);
        assert!(engine.iterate.x.iter().all(|x| x[idx::Y].abs() < 1e-6));
    }
}
