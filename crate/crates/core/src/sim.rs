//! Closed-loop simulation: a finer-stepped, optionally perturbed plant, scripted
//! obstacles with detection gates, the planner at its own rate, and logging.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constraints::{circle_centers, Obstacle};
use crate::error::{Error, Result};
use crate::ocp::BehaviouralCommand;
use crate::planner::{CycleStatus, Planner, PlannerConfig, PlannerOutput, SubStatus};
use crate::road::{RoadMap, RoadSource};
use crate::vehicle::{self, friction_ellipse_bounds, idx, ControlRates, ControlVec, StateVec, VehicleParams, VehicleState, NX};

/// Multiplicative factors applied to the plant parameters.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub pacejka_d: f64,
    pub aero_drag: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self { mass: 1.0, yaw_inertia: 1.0, pacejka_d: 1.0, aero_drag: 1.0 }
    }
}

impl Perturbation {
    pub fn apply(&self, p: &VehicleParams) -> VehicleParams {
        VehicleParams {
            mass: p.mass * self.mass,
            yaw_inertia: p.yaw_inertia * self.yaw_inertia,
            pacejka_d: p.pacejka_d * self.pacejka_d,
            aero_drag: p.aero_drag * self.aero_drag,
            ..p.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.mass, self.yaw_inertia, self.pacejka_d, self.aero_drag].iter().all(|f| *f > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("perturbation factors must be positive".into()))
        }
    }
}

/// One leg of an obstacle script; ends after `duration` seconds or when the
/// lateral position reaches `until_y`, whichever comes first.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub vs: f64,
    #[serde(default)]
    pub vy: f64,
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub until_y: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObstacleScript {
    pub name: String,
    pub s0: f64,
    pub y0: f64,
    #[serde(default = "default_radius")]
    pub rho: f64,
    #[serde(default = "default_offset")]
    pub d_c: f64,
    /// velocity legs; the last one is held forever
    pub phases: Vec<Phase>,
    /// hidden from the planner before this time
    #[serde(default)]
    pub detection_time: Option<f64>,
}

fn default_radius() -> f64 {
    1.0
}

fn default_offset() -> f64 {
    1.1
}

/// Truth state of a scripted obstacle.
#[derive(Clone, Debug, PartialEq)]
struct ObstacleTruth {
    s: f64,
    y: f64,
    phase: usize,
    phase_start: f64,
}

impl ObstacleScript {
    fn velocity(&self, phase: usize) -> (f64, f64) {
        self.phases.get(phase).map(|p| (p.vs, p.vy)).unwrap_or((0.0, 0.0))
    }

    fn advance(&self, o: &mut ObstacleTruth, t: f64, h: f64) {
        let (vs, vy) = self.velocity(o.phase);
        o.s += vs * h;
        let y_next = o.y + vy * h;
        let mut done = false;
        match self.phases.get(o.phase).and_then(|p| p.until_y) {
            Some(target) if vy != 0.0 && (o.y - target) * (y_next - target) <= 0.0 => {
                o.y = target;
                done = true;
            }
            _ => o.y = y_next,
        }
        if let Some(d) = self.phases.get(o.phase).and_then(|p| p.duration) {
            done |= t + h - o.phase_start >= d - 1e-12;
        }
        if done && o.phase + 1 < self.phases.len() {
            o.phase += 1;
            o.phase_start = t + h;
        }
    }

    fn snapshot(&self, o: &ObstacleTruth) -> Obstacle {
        let (vs, vy) = self.velocity(o.phase);
        Obstacle::new(o.s, o.y, vs, vy, self.rho, self.d_c)
    }

    fn visible(&self, t: f64) -> bool {
        self.detection_time.is_none_or(|d| t >= d - 1e-9)
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimedCommand {
    /// earliest activation time, s
    pub t: f64,
    pub command: BehaviouralCommand,
    /// additionally wait until the ego vehicle has passed this obstacle
    #[serde(default)]
    pub after_passing: Option<String>,
}

/// Longitudinal lead over an obstacle at which both circle pairs are clear
/// of each other along the road.
pub fn passing_gap(params: &VehicleParams, script: &ObstacleScript) -> f64 {
    params.d_c + params.rho_ego + script.d_c + script.rho
}

/// Additive Gaussian measurement noise, one standard deviation per state.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub std: [f64; NX],
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub road: RoadSource,
    pub ego: VehicleState,
    #[serde(default)]
    pub obstacles: Vec<ObstacleScript>,
    pub commands: Vec<TimedCommand>,
    pub duration: f64,
    /// distance ahead mapped by perception, m
    pub perceived_horizon: f64,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_h_plant")]
    pub h_plant: f64,
    /// consecutive emergency cycles after which the run is aborted
    #[serde(default = "default_exhaustion")]
    pub max_emergency_cycles: usize,
}

fn default_h_plant() -> f64 {
    1e-3
}

fn default_exhaustion() -> usize {
    10
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.h_plant > 0.0 && self.h_plant <= 1e-3 + 1e-15) {
            return Err(Error::Config("plant step must lie in (0, 1 ms]".into()));
        }
        if self.commands.is_empty() || self.commands.windows(2).any(|w| w[0].t > w[1].t) {
            return Err(Error::Config("commands must be non-empty and sorted by activation time".into()));
        }
        if self.commands.iter().any(|c| !(c.command.v_ref >= 0.0)) {
            return Err(Error::Config("reference speeds must be non-negative".into()));
        }
        if !(self.perceived_horizon > 0.0) {
            return Err(Error::Config("perceived horizon must be positive".into()));
        }
        for c in &self.commands {
            if let Some(name) = &c.after_passing {
                if !self.obstacles.iter().any(|o| &o.name == name) {
                    return Err(Error::Config(format!("command waits for unknown obstacle {name}")));
                }
            }
        }
        if self.obstacles.iter().any(|o| o.phases.is_empty() || !(o.rho > 0.0)) {
            return Err(Error::Config("obstacles need at least one phase and a positive radius".into()));
        }
        self.perturbation.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Advance the active command index: the next command becomes active
    /// once its time has come and its passing condition (if any) holds.
    fn next_command(&self, active: usize, t: f64, ego_s: f64, truths: &[ObstacleTruth], params: &VehicleParams) -> usize {
        let mut k = active;
        while let Some(c) = self.commands.get(k + 1) {
            let passed = match &c.after_passing {
                None => true,
                Some(name) => self
                    .obstacles
                    .iter()
                    .zip(truths)
                    .find(|(o, _)| &o.name == name)
                    .is_some_and(|(o, tr)| ego_s - tr.s >= passing_gap(params, o)),
            };
            if c.t <= t + 1e-9 && passed {
                k += 1;
            } else {
                break;
            }
        }
        k
    }

    /// Obstacles visible at t = 0 and the first command, as the planner
    /// would receive them in the first cycle.
    pub fn initial_snapshot(&self) -> (Vec<Obstacle>, BehaviouralCommand) {
        let obstacles = self
            .obstacles
            .iter()
            .filter(|o| o.visible(0.0))
            .map(|o| o.snapshot(&ObstacleTruth { s: o.s0, y: o.y0, phase: 0, phase_start: 0.0 }))
            .collect();
        (obstacles, self.commands[0].command.clone())
    }

    /// Straight two-lane road; the ego vehicle at 13 m/s closes on a car
    /// driving 10 m/s 25 m ahead and is told to overtake.
    pub fn overtake(params: &VehicleParams) -> Self {
        let mut cmd = BehaviouralCommand::drive(13.0);
        cmd.mode = crate::ocp::DrivingMode::Overtake;
        Self {
            name: "overtake".into(),
            road: RoadSource::Straight { straight_length: 400.0, left: 5.25, right: -1.75 },
            ego: VehicleState::cruise(0.0, 0.0, 13.0, params),
            obstacles: vec![ObstacleScript {
                name: "lead".into(),
                s0: 25.0,
                y0: 0.0,
                rho: 1.0,
                d_c: 1.1,
                phases: vec![Phase { vs: 10.0, vy: 0.0, duration: None, until_y: None }],
                detection_time: None,
            }],
            commands: vec![
                TimedCommand { t: 0.0, command: cmd, after_passing: None },
                TimedCommand { t: 0.0, command: BehaviouralCommand::drive(13.0), after_passing: Some("lead".into()) },
            ],
            duration: 15.0,
            perceived_horizon: 100.0,
            perturbation: Perturbation::default(),
            noise: None,
            seed: 0,
            h_plant: 1e-3,
            max_emergency_cycles: 10,
        }
    }

    /// Ego at 8 m/s; a car hidden beside the road pulls out 20 m ahead and
    /// is only seen at t = 1.2 s.
    pub fn blind_spot(params: &VehicleParams) -> Self {
        Self {
            name: "blind_spot".into(),
            road: RoadSource::Straight { straight_length: 200.0, left: 5.25, right: -1.75 },
            ego: VehicleState::cruise(0.0, 0.0, 8.0, params),
            obstacles: vec![ObstacleScript {
                name: "merging".into(),
                s0: 20.0,
                y0: -5.5,
                rho: 1.0,
                d_c: 1.1,
                phases: vec![
                    Phase { vs: 1.0, vy: 2.8, duration: None, until_y: Some(0.0) },
                    Phase { vs: 3.0, vy: 0.0, duration: None, until_y: None },
                ],
                detection_time: Some(1.2),
            }],
            commands: vec![TimedCommand { t: 0.0, command: BehaviouralCommand::drive(8.0), after_passing: None }],
            duration: 8.0,
            perceived_horizon: 50.0,
            perturbation: Perturbation::default(),
            noise: None,
            seed: 0,
            h_plant: 1e-3,
            max_emergency_cycles: 10,
        }
    }
}

/// Classical RK4 plant step with the controls held.
pub fn step_plant(state: &StateVec, control: &ControlRates, h_plant: f64, road: &RoadMap, params: &VehicleParams) -> Result<StateVec> {
    if !(h_plant > 0.0 && h_plant <= 1e-3 + 1e-15) {
        return Err(Error::Domain(format!("plant step {h_plant} outside (0, 1 ms]")));
    }
    let kappa = |s: f64| road.curvature_clamped(s);
    vehicle::rk4_step(state, &control.to_vector(), h_plant, &kappa, params)
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PlantRecord {
    pub state: VehicleState,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    /// smallest circle-pair clearance to any obstacle (truth), m
    pub clearance: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ObstacleView {
    pub name: String,
    pub s: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Detection { obstacle: String },
    CommandChange { mode: crate::ocp::DrivingMode, v_ref: f64 },
    Fallback { selected: char },
    Emergency,
    Collision { obstacle: String },
    MapExit,
    PlannerExhausted,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CycleRecord {
    pub t: f64,
    pub estimate: VehicleState,
    pub obstacles: Vec<ObstacleView>,
    pub output: PlannerOutput,
    pub min_clearance: f64,
    pub boundary_margin: f64,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Collision,
    MapExit,
    PlannerExhausted,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct SimLog {
    pub scenario: String,
    pub plant: Vec<PlantRecord>,
    pub cycles: Vec<CycleRecord>,
    pub events: Vec<Event>,
    pub outcome: Outcome,
    /// plant parameters actually simulated
    pub plant_params: VehicleParams,
    pub strict_timing: bool,
    pub cycle_budget_ms: f64,
}

fn ego_obstacle_clearance(ego: &StateVec, params: &VehicleParams, obs: &Obstacle) -> f64 {
    let e = circle_centers(ego[idx::S], ego[idx::Y], ego[idx::XI], params.d_c);
    let o = circle_centers(obs.s0, obs.y0, obs.heading(), obs.d_c);
    let mut best = f64::INFINITY;
    for a in &e {
        for b in &o {
            best = best.min(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() - params.rho_ego - obs.rho);
        }
    }
    best
}

fn boundary_margin(ego: &StateVec, params: &VehicleParams, road: &RoadMap) -> f64 {
    circle_centers(ego[idx::S], ego[idx::Y], ego[idx::XI], params.d_c)
        .iter()
        .map(|c| {
            let ((left, right), _) = road.boundaries_with_slope_clamped(c.0);
            (left - c.1 - params.rho_ego).min(c.1 - right - params.rho_ego)
        })
        .fold(f64::INFINITY, f64::min)
}

fn plant_record(x: &StateVec, road: &RoadMap, clearance: f64) -> Result<PlantRecord> {
    let (gx, gy, psi) = road.curvilinear_to_global(x[idx::S].clamp(0.0, road.length()), x[idx::Y], x[idx::XI])?;
    Ok(PlantRecord { state: VehicleState::from_vector(x), x: gx, y: gy, psi, clearance })
}

/// Run the scenario with the given (nominal) planner model. Collisions, map
/// exits and planner exhaustion end the run early and are recorded as events.
pub fn run_closed_loop(scenario: &Scenario, params: &VehicleParams, config: &PlannerConfig) -> Result<SimLog> {
    scenario.validate()?;
    let road = scenario.road.build()?;
    let plant_params = scenario.perturbation.apply(params);
    plant_params.validate()?;
    let mut planner = Planner::new(config.clone(), params.clone())?;
    let dt = config.ocp.dt;
    let steps_per_cycle = (dt / scenario.h_plant).round() as usize;
    if steps_per_cycle == 0 || ((steps_per_cycle as f64) * scenario.h_plant - dt).abs() > 1e-9 {
        return Err(Error::Config("planning period must be a multiple of the plant step".into()));
    }
    let h = dt / steps_per_cycle as f64;
    let n_cycles = (scenario.duration / dt).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise: Option<Vec<Normal<f64>>> = match &scenario.noise {
        Some(n) => Some(
            n.std
                .iter()
                .map(|s| Normal::new(0.0, *s).map_err(|e| Error::Config(format!("noise: {e}"))))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    let mut x = scenario.ego.to_vector();
    x[idx::T] = 0.0;
    let mut truths: Vec<ObstacleTruth> = scenario
        .obstacles
        .iter()
        .map(|o| ObstacleTruth { s: o.s0, y: o.y0, phase: 0, phase_start: 0.0 })
        .collect();
    let clearance_now = |x: &StateVec, truths: &[ObstacleTruth]| -> (f64, Option<usize>) {
        let mut best = (f64::INFINITY, None);
        for (k, (script, o)) in scenario.obstacles.iter().zip(truths).enumerate() {
            let c = ego_obstacle_clearance(x, &plant_params, &script.snapshot(o));
            if c < best.0 {
                best = (c, Some(k));
            }
        }
        best
    };

    let mut log = SimLog {
        scenario: scenario.name.clone(),
        plant: Vec::with_capacity(n_cycles * steps_per_cycle + 1),
        cycles: Vec::with_capacity(n_cycles),
        events: Vec::new(),
        outcome: Outcome::Completed,
        plant_params: plant_params.clone(),
        strict_timing: config.strict_timing,
        cycle_budget_ms: config.cycle_budget_ms,
    };
    log.plant.push(plant_record(&x, &road, clearance_now(&x, &truths).0)?);
    let mut detected = vec![false; scenario.obstacles.len()];
    let mut last_command: Option<BehaviouralCommand> = None;
    let mut emergency_run = 0usize;
    let mut active = 0usize;

    'cycles: for k in 0..n_cycles {
        let t = k as f64 * dt;
        let mut estimate = x;
        if let Some(dists) = &noise {
            for (i, d) in dists.iter().enumerate() {
                if i != idx::T {
                    estimate[i] += d.sample(&mut rng);
                }
            }
        }
        let estimate = VehicleState::from_vector(&estimate);

        let mut views = Vec::new();
        let mut visible = Vec::new();
        for (i, (script, o)) in scenario.obstacles.iter().zip(&truths).enumerate() {
            let vis = script.visible(t);
            if vis && !detected[i] {
                detected[i] = true;
                if script.detection_time.is_some() {
                    log.events.push(Event { t, kind: EventKind::Detection { obstacle: script.name.clone() } });
                }
            }
            views.push(ObstacleView { name: script.name.clone(), s: o.s, y: o.y, visible: vis });
            if vis {
                visible.push(script.snapshot(o));
            }
        }

        active = scenario.next_command(active, t, x[idx::S], &truths, &plant_params);
        let command = scenario.commands[active].command.clone();
        if last_command.as_ref() != Some(&command) {
            log.events.push(Event { t, kind: EventKind::CommandChange { mode: command.mode, v_ref: command.v_ref } });
            last_command = Some(command.clone());
        }
        let perceived = scenario.perceived_horizon;
        let output = planner.plan_cycle(&estimate, &road, &visible, &command, perceived)?;
        match output.status {
            CycleStatus::Nominal => emergency_run = 0,
            CycleStatus::Fallback => {
                emergency_run = 0;
                log.events.push(Event { t, kind: EventKind::Fallback { selected: output.selected.unwrap_or('?') } });
            }
            CycleStatus::Emergency => {
                emergency_run += 1;
                log.events.push(Event { t, kind: EventKind::Emergency });
            }
        }
        let control = output.applied;
        log.cycles.push(CycleRecord {
            t,
            estimate,
            obstacles: views,
            output,
            min_clearance: clearance_now(&x, &truths).0,
            boundary_margin: boundary_margin(&x, &plant_params, &road),
        });
        if emergency_run >= scenario.max_emergency_cycles {
            log.events.push(Event { t, kind: EventKind::PlannerExhausted });
            log.outcome = Outcome::PlannerExhausted;
            break;
        }

        for j in 0..steps_per_cycle {
            let tp = t + j as f64 * h;
            x = step_plant(&x, &control, h, &road, &plant_params)?;
            x[idx::T] = t + (j + 1) as f64 * h;
            for (script, o) in scenario.obstacles.iter().zip(truths.iter_mut()) {
                script.advance(o, tp, h);
            }
            let (clearance, who) = clearance_now(&x, &truths);
            log.plant.push(plant_record(&x, &road, clearance)?);
            if clearance < 0.0 {
                let name = who.map(|w| scenario.obstacles[w].name.clone()).unwrap_or_default();
                log.events.push(Event { t: x[idx::T], kind: EventKind::Collision { obstacle: name } });
                log.outcome = Outcome::Collision;
                break 'cycles;
            }
            if x[idx::S] >= road.length() || boundary_margin(&x, &plant_params, &road) < -plant_params.rho_ego {
                log.events.push(Event { t: x[idx::T], kind: EventKind::MapExit });
                log.outcome = Outcome::MapExit;
                break 'cycles;
            }
        }
    }
    Ok(log)
}

/// Time-extremal margins of a run.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub min_clearance: f64,
    pub t_min_clearance: f64,
    pub min_boundary_margin: f64,
    /// smallest distance of Tr to the friction-ellipse torque limits, N m
    pub min_ellipse_margin: f64,
    /// largest realised deceleration, m/s^2
    pub peak_deceleration: f64,
    pub t_peak_deceleration: f64,
    /// deceleration limit of the friction ellipse
    pub deceleration_limit: f64,
    pub max_abs_u1: f64,
    pub max_abs_u2: f64,
    pub max_lateral_offset: f64,
    pub min_speed: f64,
}

pub fn constraint_audit(log: &SimLog, road: &RoadMap) -> AuditReport {
    let p = &log.plant_params;
    let mut r = AuditReport {
        min_clearance: f64::INFINITY,
        t_min_clearance: 0.0,
        min_boundary_margin: f64::INFINITY,
        min_ellipse_margin: f64::INFINITY,
        peak_deceleration: 0.0,
        t_peak_deceleration: 0.0,
        deceleration_limit: p.a2,
        max_abs_u1: 0.0,
        max_abs_u2: 0.0,
        max_lateral_offset: 0.0,
        min_speed: f64::INFINITY,
    };
    for rec in &log.plant {
        let x = rec.state.to_vector();
        if rec.clearance < r.min_clearance {
            r.min_clearance = rec.clearance;
            r.t_min_clearance = rec.state.t;
        }
        r.min_boundary_margin = r.min_boundary_margin.min(boundary_margin(&x, p, road));
        if let Ok(dx) = vehicle::dynamics(&x, &ControlVec::zeros(), road.curvature_clamped(rec.state.s), p) {
            let (tr_min, tr_max) = friction_ellipse_bounds(&x, dx[idx::VY], p);
            r.min_ellipse_margin = r.min_ellipse_margin.min((rec.state.tr - tr_min).min(tr_max - rec.state.tr));
            if -dx[idx::VX] > r.peak_deceleration {
                r.peak_deceleration = -dx[idx::VX];
                r.t_peak_deceleration = rec.state.t;
            }
        }
        r.max_lateral_offset = r.max_lateral_offset.max(rec.state.y.abs());
        r.min_speed = r.min_speed.min(rec.state.vx);
    }
    for c in &log.cycles {
        r.max_abs_u1 = r.max_abs_u1.max(c.output.applied.u1.abs());
        r.max_abs_u2 = r.max_abs_u2.max(c.output.applied.u2.abs());
    }
    r
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TimingSummary {
    pub cycle_ms_median: f64,
    pub cycle_ms_p95: f64,
    pub cycle_ms_max: f64,
    pub leader_feedback_ms_median: f64,
    pub leader_feedback_ms_max: f64,
    pub budget_violations: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn timing_summary(log: &SimLog) -> TimingSummary {
    let mut cycle: Vec<f64> = log.cycles.iter().map(|c| c.output.cycle_ms).collect();
    let mut leader: Vec<f64> = log
        .cycles
        .iter()
        .filter_map(|c| c.output.subs.iter().find(|s| s.slot == 0).map(|s| s.feedback_ms()))
        .collect();
    cycle.sort_by(f64::total_cmp);
    leader.sort_by(f64::total_cmp);
    TimingSummary {
        cycle_ms_median: percentile(&cycle, 0.5),
        cycle_ms_p95: percentile(&cycle, 0.95),
        cycle_ms_max: cycle.last().copied().unwrap_or(0.0),
        leader_feedback_ms_median: percentile(&leader, 0.5),
        leader_feedback_ms_max: leader.last().copied().unwrap_or(0.0),
        budget_violations: cycle.iter().filter(|c| **c > log.cycle_budget_ms).count(),
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct Summary {
    pub scenario: String,
    pub outcome: Outcome,
    pub audit: AuditReport,
    pub events: Vec<Event>,
    pub timing: TimingSummary,
    pub fallback_cycles: usize,
    pub emergency_cycles: usize,
    pub effective: serde_json::Value,
}

pub fn summarize(log: &SimLog, road: &RoadMap, effective: serde_json::Value) -> Summary {
    Summary {
        scenario: log.scenario.clone(),
        outcome: log.outcome,
        audit: constraint_audit(log, road),
        events: log.events.clone(),
        timing: timing_summary(log),
        fallback_cycles: log.cycles.iter().filter(|c| c.output.status == CycleStatus::Fallback).count(),
        emergency_cycles: log.cycles.iter().filter(|c| c.output.status == CycleStatus::Emergency).count(),
        effective,
    }
}

/// Plant trajectory as CSV, one row per plant step.
pub fn write_state_csv(log: &SimLog, w: &mut impl Write) -> Result<()> {
    writeln!(w, "t,s,y,xi,vx,vy,omega,delta,tr,x,y_global,psi")?;
    for r in &log.plant {
        let s = &r.state;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            s.t, s.s, s.y, s.xi, s.vx, s.vy, s.omega, s.delta, s.tr, r.x, r.y, r.psi
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SubLine<'a> {
    id: char,
    slot: usize,
    horizon: f64,
    status: &'a SubStatus,
    wsr: Vec<usize>,
    kkt: Vec<f64>,
    objective: Vec<f64>,
}

#[derive(Serialize)]
struct DiagnosticsLine<'a> {
    t: f64,
    status: CycleStatus,
    selected: Option<char>,
    applied: ControlRates,
    lambda: f64,
    min_clearance: f64,
    boundary_margin: f64,
    obstacles: &'a [ObstacleView],
    subs: Vec<SubLine<'a>>,
}

/// Per-cycle planner diagnostics as JSON lines. Wall-clock figures are left
/// out so that the file is reproducible; see [`write_timing_csv`].
pub fn write_diagnostics_jsonl(log: &SimLog, w: &mut impl Write) -> Result<()> {
    for c in &log.cycles {
        let line = DiagnosticsLine {
            t: c.t,
            status: c.output.status,
            selected: c.output.selected,
            applied: c.output.applied,
            lambda: c.output.lambda,
            min_clearance: c.min_clearance,
            boundary_margin: c.boundary_margin,
            obstacles: &c.obstacles,
            subs: c
                .output
                .subs
                .iter()
                .map(|s| SubLine {
                    id: s.id,
                    slot: s.slot,
                    horizon: s.horizon,
                    status: &s.status,
                    wsr: s.iterations.iter().map(|i| i.wsr).collect(),
                    kkt: s.iterations.iter().map(|i| i.kkt).collect(),
                    objective: s.iterations.iter().map(|i| i.objective).collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Per-cycle, per-sub-planner wall-clock times.
pub fn write_timing_csv(log: &SimLog, w: &mut impl Write) -> Result<()> {
    writeln!(w, "t,id,slot,status,wall_ms,prepare_ms,feedback_ms,wsr,cycle_ms")?;
    for c in &log.cycles {
        for s in &c.output.subs {
            let prep: f64 = s.iterations.iter().map(|i| i.prepare_ms).sum();
            let status = serde_json::to_string(&s.status)?;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                c.t,
                s.id,
                s.slot,
                status.replace(',', ";").replace('"', ""),
                s.wall_ms,
                prep,
                s.feedback_ms(),
                s.total_wsr(),
                c.output.cycle_ms
            )?;
        }
    }
    Ok(())
}

/// Figure-ready CSVs: trajectory overlay with predictions, state and input
/// series, and per-sub-planner CPU time.
pub fn emit_plot_data(log: &SimLog, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join("trajectory_overlay.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "t,kind,id,node,s,y")?;
    for c in &log.cycles {
        writeln!(w, "{},ego,ego,0,{},{}", c.t, c.estimate.s, c.estimate.y)?;
        for o in &c.obstacles {
            writeln!(w, "{},obstacle,{},0,{},{}", c.t, o.name, o.s, o.y)?;
        }
        let id = c.output.selected.map(String::from).unwrap_or_default();
        for (k, x) in c.output.trajectory.iter().enumerate() {
            writeln!(w, "{},prediction,{},{},{},{}", c.t, id, k, x.s, x.y)?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("state_input_series.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "t,s,y,xi,vx,vy,omega,delta,tr,u1,u2,status,selected")?;
    for c in &log.cycles {
        let s = &c.estimate;
        let status = serde_json::to_string(&c.output.status)?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.t,
            s.s,
            s.y,
            s.xi,
            s.vx,
            s.vy,
            s.omega,
            s.delta,
            s.tr,
            c.output.applied.u1,
            c.output.applied.u2,
            status.trim_matches('"'),
            c.output.selected.map(String::from).unwrap_or_default()
        )?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("cpu_time.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    write_timing_csv(log, &mut w)?;
    w.flush()?;
    written.push(path);
    Ok(written)
}

/// Write `log.csv`, `diagnostics.jsonl`, `timing.csv` and `summary.json`.
pub fn write_artifacts(log: &SimLog, road: &RoadMap, effective: serde_json::Value, dir: &Path) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join("log.csv"))?);
    write_state_csv(log, &mut w)?;
    w.flush()?;
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join("diagnostics.jsonl"))?);
    write_diagnostics_jsonl(log, &mut w)?;
    w.flush()?;
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join("timing.csv"))?);
    write_timing_csv(log, &mut w)?;
    w.flush()?;
    let summary = summarize(log, road, effective);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
