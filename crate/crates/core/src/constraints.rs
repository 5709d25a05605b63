//! Path constraints and exponential soft penalties evaluated at a shooting node.
//!
//! Bodies are approximated by two circles along their axis. Every hard
//! constraint is written as a residual that is feasible when `<= 0`; its soft
//! counterpart is `exp(kappa * residual)`, which equals 1 exactly when the hard
//! constraint is active. Exponents are clamped at [`EXP_CLAMP`].

use serde::{Deserialize, Serialize};

use crate::road::RoadMap;
use crate::vehicle::{idx, StateVec, VehicleParams, NX};

pub const EXP_CLAMP: f64 = 30.0;
/// Obstacles considered per planning cycle.
pub const MAX_OBSTACLES: usize = 3;
pub const N_HARD: usize = 4 * MAX_OBSTACLES + 4;
pub const N_SOFT: usize = 5 * MAX_OBSTACLES + 4;

pub type Point = (f64, f64);
pub type StateRow = [f64; NX];

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Obstacle {
    pub s0: f64,
    pub y0: f64,
    #[serde(default)]
    pub vs: f64,
    #[serde(default)]
    pub vy: f64,
    /// circle radius, m
    pub rho: f64,
    /// circle offset along the obstacle axis, m
    pub d_c: f64,
    /// heading used when the obstacle is static
    #[serde(default)]
    pub heading: Option<f64>,
    /// linear decay rates of the safety-ellipse weights, 1/s
    #[serde(default)]
    pub ellipse_decay_s: f64,
    #[serde(default)]
    pub ellipse_decay_y: f64,
}

impl Obstacle {
    pub fn new(s0: f64, y0: f64, vs: f64, vy: f64, rho: f64, d_c: f64) -> Self {
        Self { s0, y0, vs, vy, rho, d_c, heading: None, ellipse_decay_s: 0.0, ellipse_decay_y: 0.0 }
    }

    /// Constant heading in the (s, y) frame; taken from the record when static.
    pub fn heading(&self) -> f64 {
        if self.vs == 0.0 && self.vy == 0.0 {
            self.heading.unwrap_or(0.0)
        } else {
            (self.vy / self.vs).atan()
        }
    }

    /// Ellipse weight scale at prediction time `t` and its derivative.
    fn decay(rate: f64, t: f64) -> (f64, f64) {
        let f = 1.0 - rate * t;
        if f > 0.1 {
            (f, -rate)
        } else {
            (0.1, 0.0)
        }
    }
}

pub fn predict_obstacle(obs: &Obstacle, t: f64) -> Point {
    (obs.s0 + obs.vs * t, obs.y0 + obs.vy * t)
}

/// Front and rear circle centres at `±offset` along the body axis.
pub fn circle_centers(s: f64, y: f64, angle: f64, offset: f64) -> [Point; 2] {
    let (sa, ca) = angle.sin_cos();
    [(s + offset * ca, y + offset * sa), (s - offset * ca, y - offset * sa)]
}

/// `(rho_ego + rho_obs)^2 - |c_ego - c_obs|^2` for the four circle pairs,
/// ego-circle major.
pub fn obstacle_hard_residuals(ego: &[Point; 2], obs: &[Point; 2], rho_ego: f64, rho_obs: f64) -> [f64; 4] {
    let r2 = (rho_ego + rho_obs).powi(2);
    let mut out = [0.0; 4];
    for (i, e) in ego.iter().enumerate() {
        for (j, o) in obs.iter().enumerate() {
            out[2 * i + j] = r2 - (e.0 - o.0).powi(2) - (e.1 - o.1).powi(2);
        }
    }
    out
}

pub fn soft_penalty(kappa: f64, residual: f64) -> f64 {
    (kappa * residual).min(EXP_CLAMP).exp()
}

pub fn obstacle_soft_penalty(ego: &[Point; 2], obs: &[Point; 2], rho_ego: f64, rho_obs: f64, kappa: f64) -> [f64; 4] {
    obstacle_hard_residuals(ego, obs, rho_ego, rho_obs).map(|r| soft_penalty(kappa, r))
}

pub fn safety_ellipse_penalty(ego: Point, obs: Point, d_s: f64, d_y: f64, kappa: f64) -> f64 {
    let (ds, dy) = (ego.0 - obs.0, ego.1 - obs.1);
    soft_penalty(kappa, -d_s * ds * ds - d_y * dy * dy)
}

/// Hard residuals `[left front, left rear, right front, right rear]` and their
/// soft penalties.
pub fn boundary_residuals(
    ego: &[Point; 2],
    rho_ego: f64,
    road: &RoadMap,
    kappa: f64,
) -> crate::Result<([f64; 4], [f64; 4])> {
    let mut hard = [0.0; 4];
    for (i, c) in ego.iter().enumerate() {
        let (left, right) = road.boundaries_at(c.0)?;
        hard[i] = rho_ego + (c.1 - left);
        hard[2 + i] = rho_ego - (c.1 - right);
    }
    Ok((hard, hard.map(|r| soft_penalty(kappa, r))))
}

/// Upper bound on Vx that reaches zero at `s_max`.
pub fn velocity_profile_bound(s: f64, v_ref: f64, s_max: f64, kappa_vel: f64) -> f64 {
    v_ref * (kappa_vel * (s_max - s)).tanh().max(0.0)
}

/// Derivative of [`velocity_profile_bound`] with respect to `s`.
pub fn velocity_profile_slope(s: f64, v_ref: f64, s_max: f64, kappa_vel: f64) -> f64 {
    let arg = kappa_vel * (s_max - s);
    if arg <= 0.0 {
        0.0
    } else {
        let sech = 1.0 / arg.cosh();
        -v_ref * kappa_vel * sech * sech
    }
}

/// `kappa_vel` that keeps the implied deceleration `V dV/ds` of the profile
/// below `a_max` when starting from `v_ref`. The peak of
/// `tanh(z) sech(z)^2` is `2/(3 sqrt 3)`.
pub fn kappa_vel_for_deceleration(v_ref: f64, a_max: f64) -> f64 {
    let peak = 2.0 / (3.0 * 3f64.sqrt());
    a_max / (peak * v_ref.max(0.1).powi(2))
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SoftPenaltyConfig {
    /// sharpness of the circle-pair penalties, 1/m^2
    pub kappa_obstacle: f64,
    /// sharpness of the safety ellipse (dimensionless, multiplies d_s, d_y)
    pub kappa_safety: f64,
    /// sharpness of the road-boundary penalties, 1/m
    pub kappa_boundary: f64,
    /// safety-ellipse weights, 1/m^2
    pub d_s: f64,
    pub d_y: f64,
    /// cost weights of the soft channels at zero exponent
    pub w_obstacle: f64,
    pub w_safety: f64,
    pub w_boundary: f64,
}

impl Default for SoftPenaltyConfig {
    fn default() -> Self {
        Self {
            kappa_obstacle: 0.5,
            kappa_safety: 1.0,
            kappa_boundary: 3.0,
            d_s: 0.01,
            d_y: 0.1,
            w_obstacle: 2.0,
            w_safety: 10.0,
            w_boundary: 1.0,
        }
    }
}

impl SoftPenaltyConfig {
    /// Weight of each soft channel in node-evaluation order.
    pub fn channel_weights(&self) -> [f64; N_SOFT] {
        let mut w = [0.0; N_SOFT];
        for (k, wk) in w.iter_mut().enumerate() {
            *wk = if k < 4 * MAX_OBSTACLES {
                self.w_obstacle
            } else if k < 5 * MAX_OBSTACLES {
                self.w_safety
            } else {
                self.w_boundary
            };
        }
        w
    }
}

/// Hard residuals and soft penalties at one node with their state Jacobians.
///
/// Layout of `hard`: four circle pairs per obstacle slot, then the four road
/// boundary residuals. Layout of `soft`: four circle pairs per obstacle slot,
/// one safety ellipse per slot, then four boundary penalties. Empty obstacle
/// slots have residual `-inf` and penalty 0.
#[derive(Clone, Debug)]
pub struct NodeConstraintEval {
    pub hard: [f64; N_HARD],
    pub hard_jac: [StateRow; N_HARD],
    pub soft: [f64; N_SOFT],
    pub soft_jac: [StateRow; N_SOFT],
}

fn ego_circle_rows(xi: f64, d_c: f64) -> [(StateRow, StateRow); 2] {
    let (sx, cx) = xi.sin_cos();
    [1.0, -1.0].map(|sign| {
        let mut ds = [0.0; NX];
        let mut dy = [0.0; NX];
        ds[idx::S] = 1.0;
        ds[idx::XI] = -sign * d_c * sx;
        dy[idx::Y] = 1.0;
        dy[idx::XI] = sign * d_c * cx;
        (ds, dy)
    })
}

fn soft_from_hard(kappa: f64, r: f64, row: &StateRow) -> (f64, StateRow) {
    let e = kappa * r;
    if e >= EXP_CLAMP {
        (EXP_CLAMP.exp(), [0.0; NX])
    } else if r == f64::NEG_INFINITY {
        (0.0, [0.0; NX])
    } else {
        let c = e.exp();
        (c, row.map(|g| kappa * c * g))
    }
}

pub fn evaluate_node(
    x: &StateVec,
    obstacles: &[Obstacle],
    road: &RoadMap,
    params: &VehicleParams,
    cfg: &SoftPenaltyConfig,
) -> NodeConstraintEval {
    let mut ev = NodeConstraintEval {
        hard: [f64::NEG_INFINITY; N_HARD],
        hard_jac: [[0.0; NX]; N_HARD],
        soft: [0.0; N_SOFT],
        soft_jac: [[0.0; NX]; N_SOFT],
    };
    let (s, y, xi, t) = (x[idx::S], x[idx::Y], x[idx::XI], x[idx::T]);
    let ego = circle_centers(s, y, xi, params.d_c);
    let ego_rows = ego_circle_rows(xi, params.d_c);

    for (j, obs) in obstacles.iter().take(MAX_OBSTACLES).enumerate() {
        let (so, yo) = predict_obstacle(obs, t);
        let oc = circle_centers(so, yo, obs.heading(), obs.d_c);
        let r2 = (params.rho_ego + obs.rho).powi(2);
        for (i, e) in ego.iter().enumerate() {
            for (k, o) in oc.iter().enumerate() {
                let slot = 4 * j + 2 * i + k;
                let (ds, dy) = (e.0 - o.0, e.1 - o.1);
                let r = r2 - ds * ds - dy * dy;
                let mut row = [0.0; NX];
                for n in 0..NX {
                    row[n] = -2.0 * ds * ego_rows[i].0[n] - 2.0 * dy * ego_rows[i].1[n];
                }
                // obstacle centres move with the time state
                row[idx::T] += 2.0 * ds * obs.vs + 2.0 * dy * obs.vy;
                ev.hard[slot] = r;
                ev.hard_jac[slot] = row;
                let (c, g) = soft_from_hard(cfg.kappa_obstacle, r, &row);
                ev.soft[slot] = c;
                ev.soft_jac[slot] = g;
            }
        }
        // safety ellipse on the C.o.M. pair
        let (fs, dfs) = Obstacle::decay(obs.ellipse_decay_s, t);
        let (fy, dfy) = Obstacle::decay(obs.ellipse_decay_y, t);
        let (ws, wy) = (cfg.d_s * fs, cfg.d_y * fy);
        let (ds, dy) = (s - so, y - yo);
        let expo = -ws * ds * ds - wy * dy * dy;
        let mut row = [0.0; NX];
        row[idx::S] = -2.0 * ws * ds;
        row[idx::Y] = -2.0 * wy * dy;
        row[idx::T] = 2.0 * ws * ds * obs.vs + 2.0 * wy * dy * obs.vy
            - cfg.d_s * dfs * ds * ds
            - cfg.d_y * dfy * dy * dy;
        let (c, g) = soft_from_hard(cfg.kappa_safety, expo, &row);
        let slot = 4 * MAX_OBSTACLES + j;
        ev.soft[slot] = c;
        ev.soft_jac[slot] = g;
    }

    for (i, e) in ego.iter().enumerate() {
        let ((left, right), (dl, dr)) = road.boundaries_with_slope_clamped(e.0);
        let (rows, rowy) = ego_rows[i];
        let mut lrow = [0.0; NX];
        let mut rrow = [0.0; NX];
        for n in 0..NX {
            lrow[n] = rowy[n] - dl * rows[n];
            rrow[n] = -rowy[n] + dr * rows[n];
        }
        let l = params.rho_ego + (e.1 - left);
        let r = params.rho_ego - (e.1 - right);
        let (hl, hr) = (4 * MAX_OBSTACLES + i, 4 * MAX_OBSTACLES + 2 + i);
        ev.hard[hl] = l;
        ev.hard_jac[hl] = lrow;
        ev.hard[hr] = r;
        ev.hard_jac[hr] = rrow;
        let (sl, sr) = (5 * MAX_OBSTACLES + i, 5 * MAX_OBSTACLES + 2 + i);
        let (c, g) = soft_from_hard(cfg.kappa_boundary, l, &lrow);
        ev.soft[sl] = c;
        ev.soft_jac[sl] = g;
        let (c, g) = soft_from_hard(cfg.kappa_boundary, r, &rrow);
        ev.soft[sr] = c;
        ev.soft_jac[sr] = g;
    }
    ev
}

/// Keep the `n` obstacles with the smallest predicted C.o.M. distance to an
/// ego vehicle holding its current speed over `[0, horizon]`.
pub fn select_obstacles(obstacles: &[Obstacle], ego: &StateVec, horizon: f64, n: usize) -> Vec<Obstacle> {
    let samples = 31;
    let mut scored: Vec<(f64, usize)> = obstacles
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let d = (0..samples)
                .map(|i| {
                    let t = horizon * i as f64 / (samples - 1) as f64;
                    let (so, yo) = predict_obstacle(o, t);
                    let se = ego[idx::S] + ego[idx::VX] * t;
                    (se - so).hypot(ego[idx::Y] - yo)
                })
                .fold(f64::INFINITY, f64::min);
            (d, k)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(n).map(|(_, k)| obstacles[k].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::VehicleState;
    use approx::assert_relative_eq;

    #[test]
    fn obstacle_prediction() {
        let obs = Obstacle::new(25.0, 0.0, 10.0, 0.0, 1.0, 1.1);
        assert_eq!(predict_obstacle(&obs, 0.5), (30.0, 0.0));
        assert_eq!(predict_obstacle(&obs, 0.0), (25.0, 0.0));
        let still = Obstacle::new(3.0, -1.0, 0.0, 0.0, 1.0, 1.1);
        assert_eq!(predict_obstacle(&still, 7.0), (3.0, -1.0));
        assert_eq!(still.heading(), 0.0);
        let turned = Obstacle { heading: Some(0.3), ..still };
        assert_eq!(turned.heading(), 0.3);
    }

    #[test]
    fn centers() {
        let c = circle_centers(5.0, 1.0, 0.3, 0.0);
        assert_eq!(c[0], (5.0, 1.0));
        assert_eq!(c[1], (5.0, 1.0));
        let c = circle_centers(5.0, 1.0, 0.0, 1.0);
        assert_eq!(c, [(6.0, 1.0), (4.0, 1.0)]);
        let c = circle_centers(5.0, 1.0, std::f64::consts::FRAC_PI_2, 1.0);
        assert_relative_eq!(c[0].0, 5.0, epsilon = 1e-15);
        assert_relative_eq!(c[0].1, 2.0);
        assert_relative_eq!(c[1].1, 0.0);
    }

    #[test]
    fn circle_residuals() {
        let ego = [(0.0, 0.0), (0.0, 0.0)];
        let far = [(100.0, 0.0), (102.0, 0.0)];
        assert!(obstacle_hard_residuals(&ego, &far, 1.0, 1.0).iter().all(|r| *r < 0.0));
        let touching = [(2.0, 0.0), (2.0, 0.0)];
        assert_eq!(obstacle_hard_residuals(&ego, &touching, 1.0, 1.0), [0.0; 4]);
        assert_eq!(obstacle_soft_penalty(&ego, &touching, 1.0, 1.0, 0.7), [1.0; 4]);
        let overlap = [(1.0, 0.5), (1.0, 0.5)];
        assert_relative_eq!(obstacle_hard_residuals(&ego, &overlap, 1.0, 1.0)[0], 4.0 - 1.25);
        // unit exponent
        let kappa = 0.5;
        let d = (4.0f64 + 1.0 / kappa).sqrt();
        let at = [(d, 0.0), (d, 0.0)];
        assert_relative_eq!(obstacle_soft_penalty(&ego, &at, 1.0, 1.0, kappa)[0], (-1f64).exp(), epsilon = 1e-12);
        // deep overlap is clamped
        assert_relative_eq!(obstacle_soft_penalty(&ego, &ego, 10.0, 10.0, 100.0)[0], EXP_CLAMP.exp());
    }

    #[test]
    fn safety_ellipse() {
        assert_eq!(safety_ellipse_penalty((3.0, 1.0), (3.0, 1.0), 0.1, 0.5, 2.0), 1.0);
        let (ds, dy, kappa): (f64, f64, f64) = (0.1, 0.5, 2.0);
        let delta_s = (1.0 / (kappa * ds)).sqrt();
        assert_relative_eq!(safety_ellipse_penalty((delta_s, 0.0), (0.0, 0.0), ds, dy, kappa), (-1f64).exp());
        // doubling d_s shrinks the level set along s by sqrt(2)
        let level = safety_ellipse_penalty((4.0, 0.0), (0.0, 0.0), ds, dy, kappa);
        let shrunk = safety_ellipse_penalty((4.0 / 2f64.sqrt(), 0.0), (0.0, 0.0), 2.0 * ds, dy, kappa);
        assert_relative_eq!(level, shrunk, epsilon = 1e-14);
    }

    #[test]
    fn road_boundaries() {
        let road = RoadMap::straight(100.0, 3.5, -3.5).unwrap();
        let rho = 0.9;
        let (hard, _) = boundary_residuals(&[(10.0, 0.0), (8.0, 0.0)], rho, &road, 1.0).unwrap();
        assert_relative_eq!(hard[0], -2.6);
        assert_relative_eq!(hard[2], -2.6);
        let (hard, soft) = boundary_residuals(&[(10.0, 2.6), (8.0, 2.6)], rho, &road, 1.0).unwrap();
        assert_relative_eq!(hard[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(soft[0], 1.0, epsilon = 1e-12);
        let kappa = 3.0;
        let (hard, soft) = boundary_residuals(&[(10.0, 3.0), (8.0, 3.0)], rho, &road, kappa).unwrap();
        assert_relative_eq!(hard[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(soft[0], (0.4 * kappa).exp(), epsilon = 1e-12);
        assert!(boundary_residuals(&[(120.0, 0.0), (8.0, 0.0)], rho, &road, kappa).is_err());
    }

    #[test]
    fn velocity_profile() {
        assert_eq!(velocity_profile_bound(20.0, 8.0, 20.0, 0.3), 0.0);
        assert_eq!(velocity_profile_bound(25.0, 8.0, 20.0, 0.3), 0.0);
        assert_relative_eq!(velocity_profile_bound(-30.0, 8.0, 20.0, 0.3), 8.0, epsilon = 1e-6);
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let s = -10.0 + 0.15 * i as f64;
            let b = velocity_profile_bound(s, 8.0, 20.0, 0.3);
            assert!(b <= prev + 1e-15);
            prev = b;
        }
    }

    #[test]
    fn profile_deceleration_limited() {
        let (v_ref, s_max, a_comfort) = (8.0, 20.0, 2.5);
        let kappa = kappa_vel_for_deceleration(v_ref, a_comfort);
        let mut worst: f64 = 0.0;
        for i in 0..4000 {
            let s = -20.0 + 0.01 * i as f64;
            let v = velocity_profile_bound(s, v_ref, s_max, kappa);
            let dv = velocity_profile_slope(s, v_ref, s_max, kappa);
            worst = worst.max(-(v * dv));
        }
        assert!(worst <= a_comfort + 1e-9, "peak deceleration {worst}");
        assert!(worst >= 0.99 * a_comfort);
    }

    #[test]
    fn activation_convention_with_weights() {
        // at zero hard residual every soft channel contributes exactly its weight
        let cfg = SoftPenaltyConfig::default();
        let w = cfg.channel_weights();
        let c = soft_penalty(cfg.kappa_obstacle, 0.0);
        assert_eq!(w[0] * c * c, cfg.w_obstacle);
        let c = soft_penalty(cfg.kappa_boundary, 0.0);
        assert_eq!(w[N_SOFT - 1] * c * c, cfg.w_boundary);
    }

    #[test]
    fn selects_nearest() {
        let ego = VehicleState { vx: 10.0, ..Default::default() }.to_vector();
        let obs = vec![
            Obstacle::new(80.0, 0.0, 0.0, 0.0, 1.0, 1.0),
            Obstacle::new(20.0, 0.0, 0.0, 0.0, 1.0, 1.0),
            Obstacle::new(-30.0, 0.0, 0.0, 0.0, 1.0, 1.0),
            Obstacle::new(10.0, 3.0, 10.0, 0.0, 1.0, 1.0),
        ];
        let sel = select_obstacles(&obs, &ego, 3.0, 2);
        assert_eq!(sel.len(), 2);
        assert_eq!(sel[0].s0, 20.0);
        assert_eq!(sel[1].s0, 10.0);
    }
}
