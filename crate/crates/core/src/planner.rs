//! Parallel sub-planners with staggered spatial horizons.
//!
//! Every cycle each sub-planner builds its OCP (the velocity-profile limit is
//! set by its simulated spatial horizon), runs its RTI engine, and the
//! feasible sub-planner with the longest horizon wins. When the leader fails
//! the winner is promoted to leader and the failed planners are reinitialised
//! from its trajectory.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constraints::Obstacle;
use crate::error::{Error, Result};
use crate::ocp::{blend_modes, build_ocp, BehaviouralCommand, DrivingMode, ModeBlend, OcpConfig, OcpDefinition, WeightSet};
use crate::qp::{DenseQp, QpOptions, QpStatus};
use crate::road::RoadMap;
use crate::rti::{IterationStats, RtiEngine, ShootingIterate};
use crate::vehicle::{self, friction_ellipse_bounds, idx, ControlRates, StateVec, VehicleParams, VehicleState, NU};

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub ocp: OcpConfig,
    /// horizon of every sub-planner except the last as a fraction of the
    /// perceived horizon, longest first
    pub horizon_ratios: Vec<f64>,
    /// the last sub-planner uses the stopping distance
    pub stopping_planner: bool,
    /// deceleration used for the stopping distance, m/s^2
    pub a_max_stop: f64,
    pub leader_n_sqp: usize,
    pub other_n_sqp: usize,
    pub max_wsr: usize,
    pub sub_budget_ms: f64,
    pub cycle_budget_ms: f64,
    /// enforce the wall-clock budgets (otherwise only `max_wsr` caps the work,
    /// which keeps runs reproducible)
    pub strict_timing: bool,
    pub emergency_brake: bool,
    /// horizon regrowth per cycle is `growth_factor * v_ref * dt`
    pub growth_factor: f64,
    /// speed below which an all-infeasible cycle restarts from the estimate
    pub restart_speed: f64,
    pub parallel: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            ocp: OcpConfig::default(),
            horizon_ratios: vec![1.0, 0.6],
            stopping_planner: true,
            a_max_stop: 4.0,
            leader_n_sqp: 2,
            other_n_sqp: 1,
            max_wsr: 80,
            sub_budget_ms: 10.0,
            cycle_budget_ms: 50.0,
            strict_timing: false,
            emergency_brake: true,
            growth_factor: 2.0,
            restart_speed: 2.0,
            parallel: true,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.ocp.validate()?;
        if self.horizon_ratios.is_empty() && !self.stopping_planner {
            return Err(Error::Config("at least one sub-planner is required".into()));
        }
        if self.horizon_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) || self.horizon_ratios.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config("horizon ratios must lie in (0, 1] and be non-increasing".into()));
        }
        if self.leader_n_sqp == 0 || self.other_n_sqp == 0 || self.max_wsr == 0 {
            return Err(Error::Config("SQP and working-set allotments must be positive".into()));
        }
        if !(self.a_max_stop > 0.0) || !(self.growth_factor > 0.0) {
            return Err(Error::Config("a_max_stop and growth_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_planners(&self) -> usize {
        self.horizon_ratios.len() + usize::from(self.stopping_planner)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// `Vx^2 / (2 a_max)` plus one planning interval of travel.
pub fn stopping_distance(vx: f64, a_max: f64, dt: f64) -> f64 {
    let v = vx.max(0.0);
    v * v / (2.0 * a_max) + v * dt
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SubStatus {
    Feasible,
    QpFailed(QpStatus),
    BudgetExceeded,
    Error(String),
}

#[derive(Clone, Debug)]
pub struct SubPlanner {
    pub id: char,
    /// simulated spatial horizon length, m
    pub horizon: f64,
    pub engine: RtiEngine,
    pub n_sqp: usize,
    pub status: SubStatus,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SubDiagnostics {
    pub id: char,
    pub slot: usize,
    pub horizon: f64,
    pub n_sqp: usize,
    pub status: SubStatus,
    pub wall_ms: f64,
    pub iterations: Vec<IterationStats>,
}

impl SubDiagnostics {
    pub fn total_wsr(&self) -> usize {
        self.iterations.iter().map(|i| i.wsr).sum()
    }

    pub fn feedback_ms(&self) -> f64 {
        self.iterations.iter().map(|i| i.feedback_ms).sum()
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CycleStatus {
    Nominal,
    /// a shorter-horizon sub-planner was adopted
    Fallback,
    Emergency,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct PlannerOutput {
    pub applied: ControlRates,
    pub selected: Option<char>,
    pub status: CycleStatus,
    /// predicted states of the selected plan (times relative to the cycle)
    pub trajectory: Vec<VehicleState>,
    pub subs: Vec<SubDiagnostics>,
    pub cycle_ms: f64,
    pub lambda: f64,
}

pub struct Planner {
    pub config: PlannerConfig,
    pub params: VehicleParams,
    pub subs: Vec<SubPlanner>,
    pub mode: ModeBlend,
    weights_cache: HashMap<(u64, bool), WeightSet>,
    initialized: bool,
}

struct SubResult {
    status: SubStatus,
    iterations: Vec<IterationStats>,
    u_apply: Option<DVector<f64>>,
    wall_ms: f64,
}

impl Planner {
    pub fn new(config: PlannerConfig, params: VehicleParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let n = config.n_planners();
        let subs = (0..n)
            .map(|i| SubPlanner {
                id: (b'A' + i as u8) as char,
                horizon: 0.0,
                engine: RtiEngine::new(
                    ShootingIterate::constant(&DVector::zeros(vehicle::NX), NU, config.ocp.horizon_steps),
                    QpOptions { max_wsr: config.max_wsr, ..Default::default() },
                ),
                n_sqp: if i == 0 { config.leader_n_sqp } else { config.other_n_sqp },
                status: SubStatus::Feasible,
            })
            .collect();
        Ok(Self { config, params, subs, mode: ModeBlend::settled(DrivingMode::Drive), weights_cache: HashMap::new(), initialized: false })
    }

    fn weights(&mut self, mode: DrivingMode, v_ref: f64) -> Result<WeightSet> {
        let key = (v_ref.to_bits(), mode == DrivingMode::Overtake);
        if let Some(w) = self.weights_cache.get(&key) {
            return Ok(w.clone());
        }
        let w = self.config.ocp.weights_for(mode, &self.params, v_ref)?;
        self.weights_cache.insert(key, w.clone());
        Ok(w)
    }

    /// Target horizon per slot, longest first, ordered and clipped.
    fn target_horizons(&self, vx: f64, perceived: f64) -> Vec<f64> {
        let mut t: Vec<f64> = self.config.horizon_ratios.iter().map(|r| r * perceived).collect();
        if self.config.stopping_planner {
            t.push(stopping_distance(vx, self.config.a_max_stop, self.config.ocp.dt).min(perceived));
        }
        t
    }

    fn update_horizons(&mut self, vx: f64, v_ref: f64, perceived: f64) {
        let targets = self.target_horizons(vx, perceived);
        let grow = self.config.growth_factor * v_ref.max(1.0) * self.config.ocp.dt;
        let stop = stopping_distance(vx, self.config.a_max_stop, self.config.ocp.dt).min(perceived);
        for (slot, sub) in self.subs.iter_mut().enumerate() {
            sub.horizon = if !self.initialized || slot == 0 { targets[slot] } else { (sub.horizon + grow).min(targets[slot]) };
            sub.horizon = sub.horizon.min(perceived);
        }
        let last = self.subs.len() - 1;
        self.subs[last].horizon = self.subs[last].horizon.max(stop);
        for slot in (0..last).rev() {
            let below = self.subs[slot + 1].horizon;
            self.subs[slot].horizon = self.subs[slot].horizon.max(below);
        }
    }

    /// Reset every iterate to the constant trajectory at the estimate with
    /// zero controls. Only meaningful at low speed.
    pub fn restart_reinit(&mut self, estimate: &VehicleState) -> Result<()> {
        if estimate.vx >= self.config.restart_speed {
            return Err(Error::Domain(format!(
                "restart reinitialisation requires Vx < {} m/s, got {}",
                self.config.restart_speed, estimate.vx
            )));
        }
        let mut x0 = estimate.to_vector();
        x0[idx::T] = 0.0;
        let x0 = DVector::from_column_slice(x0.as_slice());
        for sub in &mut self.subs {
            sub.engine.iterate = ShootingIterate::constant(&x0, NU, self.config.ocp.horizon_steps);
            sub.engine.clear_active();
        }
        Ok(())
    }

    /// Copy the donor's iterate into `sub` (the donor stays untouched).
    pub fn reinitialize(sub: &mut SubPlanner, donor: &SubPlanner) {
        if sub.id == donor.id {
            return;
        }
        sub.engine.iterate = donor.engine.iterate.clone();
        sub.engine.clear_active();
    }

    pub fn plan_cycle(
        &mut self,
        estimate: &VehicleState,
        road: &RoadMap,
        obstacles: &[Obstacle],
        command: &BehaviouralCommand,
        perceived_horizon: f64,
    ) -> Result<PlannerOutput> {
        let cycle_start = Instant::now();
        let dt = self.config.ocp.dt;
        let n = self.config.ocp.horizon_steps;
        if self.mode.target != command.mode {
            self.mode.target = command.mode;
        }
        if self.initialized {
            self.mode.advance(dt, self.config.ocp.t_blend);
        } else {
            self.mode = ModeBlend::settled(command.mode);
        }
        let drive = self.weights(DrivingMode::Drive, command.v_ref)?;
        let overtake = self.weights(DrivingMode::Overtake, command.v_ref)?;
        let weights = blend_modes(&drive, &overtake, self.mode.lambda)?;

        let mut x0s: StateVec = estimate.to_vector();
        x0s[idx::T] = 0.0;
        let x0 = DVector::from_column_slice(x0s.as_slice());
        self.update_horizons(estimate.vx, command.v_ref, perceived_horizon);

        let ocps: Vec<OcpDefinition> = self
            .subs
            .iter()
            .map(|sub| {
                build_ocp(&x0s, road, obstacles, command, weights.clone(), &self.config.ocp, &self.params, sub.horizon, perceived_horizon)
            })
            .collect::<Result<_>>()?;

        if !self.initialized {
            for (sub, ocp) in self.subs.iter_mut().zip(&ocps) {
                sub.engine.iterate = ShootingIterate::rollout(ocp, &x0, vec![DVector::zeros(NU); n])?;
            }
            self.initialized = true;
        } else {
            for (sub, ocp) in self.subs.iter_mut().zip(&ocps) {
                sub.engine.shift(ocp);
                for x in &mut sub.engine.iterate.x {
                    x[idx::T] -= dt;
                }
            }
        }

        let strict = self.config.strict_timing;
        let sub_budget = Duration::from_secs_f64(self.config.sub_budget_ms / 1e3);
        for (slot, sub) in self.subs.iter_mut().enumerate() {
            sub.n_sqp = if slot == 0 { self.config.leader_n_sqp } else { self.config.other_n_sqp };
            sub.engine.qp_options = QpOptions {
                max_wsr: self.config.max_wsr,
                time_budget: if strict { Some(sub_budget) } else { None },
                ..Default::default()
            };
        }

        let run = |sub: &mut SubPlanner, ocp: &OcpDefinition| -> SubResult {
            let t0 = Instant::now();
            let report = sub.engine.sqp_cycle(ocp, &x0, sub.n_sqp);
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            match report {
                Ok(r) => {
                    let last = r.iterations.last().map(|i| i.qp_status).unwrap_or(QpStatus::Infeasible);
                    let mut status = if r.succeeded() { SubStatus::Feasible } else { SubStatus::QpFailed(last) };
                    if strict && wall_ms > sub_budget.as_secs_f64() * 1e3 {
                        status = SubStatus::BudgetExceeded;
                    }
                    SubResult { status, iterations: r.iterations, u_apply: r.u_apply, wall_ms }
                }
                Err(e) => SubResult { status: SubStatus::Error(e.to_string()), iterations: Vec::new(), u_apply: None, wall_ms },
            }
        };

        let results: Vec<SubResult> = if self.config.parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .subs
                    .iter_mut()
                    .zip(&ocps)
                    .map(|(sub, ocp)| scope.spawn(move || run(sub, ocp)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("sub-planner thread panicked")).collect()
            })
        } else {
            self.subs.iter_mut().zip(&ocps).map(|(sub, ocp)| run(sub, ocp)).collect()
        };

        let diagnostics: Vec<SubDiagnostics> = self
            .subs
            .iter()
            .zip(&results)
            .enumerate()
            .map(|(slot, (sub, r))| SubDiagnostics {
                id: sub.id,
                slot,
                horizon: sub.horizon,
                n_sqp: sub.n_sqp,
                status: r.status.clone(),
                wall_ms: r.wall_ms,
                iterations: r.iterations.clone(),
            })
            .collect();
        for (sub, r) in self.subs.iter_mut().zip(&results) {
            sub.status = r.status.clone();
            sub.engine.iterate.feasible = r.status == SubStatus::Feasible;
        }

        let chosen = results.iter().position(|r| r.status == SubStatus::Feasible);
        let (applied, status, selected, trajectory) = match chosen {
            Some(j) => {
                let u = results[j].u_apply.clone().expect("feasible result carries a control");
                let trajectory = self.subs[j].engine.iterate.x.iter().map(|x| VehicleState::from_vector(&StateVec::from_column_slice(x.as_slice()))).collect();
                let selected = self.subs[j].id;
                let status = if j == 0 { CycleStatus::Nominal } else { CycleStatus::Fallback };
                // failed planners restart from the adopted trajectory
                let donor = self.subs[j].clone();
                for (i, r) in results.iter().enumerate() {
                    if r.status != SubStatus::Feasible {
                        Self::reinitialize(&mut self.subs[i], &donor);
                    }
                }
                if j > 0 {
                    self.promote(j, perceived_horizon);
                }
                (ControlRates { u1: u[0], u2: u[1] }, status, Some(selected), trajectory)
            }
            None => {
                let u = self.emergency_control(estimate, road);
                if estimate.vx < self.config.restart_speed {
                    self.restart_reinit(estimate)?;
                } else {
                    for (sub, ocp) in self.subs.iter_mut().zip(&ocps) {
                        let hold = DVector::from_vec(vec![u.u1, u.u2]);
                        let it = ShootingIterate::rollout(ocp, &x0, vec![hold; n]).or_else(|_| {
                            Ok::<_, Error>(ShootingIterate::constant(&x0, NU, n))
                        })?;
                        sub.engine.iterate = it;
                        sub.engine.clear_active();
                    }
                }
                (u, CycleStatus::Emergency, None, Vec::new())
            }
        };
        Ok(PlannerOutput {
            applied,
            selected,
            status,
            trajectory,
            subs: diagnostics,
            cycle_ms: cycle_start.elapsed().as_secs_f64() * 1e3,
            lambda: self.mode.lambda,
        })
    }

    /// The adopted sub-planner `j` becomes the leader with the full horizon;
    /// the failed ones move down one slot, take over the horizon of the slot
    /// they move into and restart from the winner's trajectory.
    fn promote(&mut self, j: usize, perceived: f64) {
        let old_horizons: Vec<f64> = self.subs.iter().map(|s| s.horizon).collect();
        let winner = self.subs.remove(j);
        for i in 0..j {
            let donor = &winner;
            Self::reinitialize(&mut self.subs[i], donor);
            self.subs[i].horizon = old_horizons[i + 1];
        }
        self.subs.insert(0, winner);
        self.subs[0].horizon = perceived;
    }

    /// Zero steering rate and the torque rate that heads for the braking
    /// limit of the friction ellipse.
    pub fn emergency_control(&self, estimate: &VehicleState, road: &RoadMap) -> ControlRates {
        if !self.config.emergency_brake {
            return ControlRates::default();
        }
        let x = estimate.to_vector();
        let kappa = road.curvature_clamped(estimate.s);
        let vy_dot = vehicle::dynamics(&x, &vehicle::ControlVec::zeros(), kappa, &self.params).map(|d| d[idx::VY]).unwrap_or(0.0);
        let (tr_min, _) = friction_ellipse_bounds(&x, vy_dot, &self.params);
        let c = &self.config.ocp;
        // no braking torque once stopped
        let target = if estimate.vx > 0.1 { tr_min.max(c.tr_min) } else { 0.0 };
        let u2 = ((target - estimate.tr) / c.dt).clamp(-c.u2_max, c.u2_max);
        ControlRates { u1: 0.0, u2 }
    }

    /// QP each sub-planner would solve next from `estimate`, linearised at its
    /// current iterate. Meant for offline debugging after at least one cycle.
    pub fn current_qps(
        &mut self,
        estimate: &VehicleState,
        road: &RoadMap,
        obstacles: &[Obstacle],
        command: &BehaviouralCommand,
        perceived_horizon: f64,
    ) -> Result<Vec<(char, DenseQp)>> {
        if !self.initialized {
            return Err(Error::Config("no cycle has been planned yet".into()));
        }
        let drive = self.weights(DrivingMode::Drive, command.v_ref)?;
        let overtake = self.weights(DrivingMode::Overtake, command.v_ref)?;
        let weights = blend_modes(&drive, &overtake, self.mode.lambda)?;
        let mut x0s: StateVec = estimate.to_vector();
        x0s[idx::T] = 0.0;
        let x0 = DVector::from_column_slice(x0s.as_slice());
        let mut out = Vec::new();
        for sub in &self.subs {
            let ocp =
                build_ocp(&x0s, road, obstacles, command, weights.clone(), &self.config.ocp, &self.params, sub.horizon, perceived_horizon)?;
            let cqp = sub.engine.prepare(&ocp)?;
            let dx0 = &x0 - &sub.engine.iterate.x[0];
            out.push((sub.id, cqp.embed(&dx0, &sub.engine.iterate.u)));
        }
        Ok(out)
    }

    pub fn horizons(&self) -> Vec<(char, f64)> {
        self.subs.iter().map(|s| (s.id, s.horizon)).collect()
    }
}
