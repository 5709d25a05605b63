//! Multiple-shooting Gauss-Newton SQP with the real-time iteration split.
//!
//! `prepare` linearises the dynamics, cost and path constraints around the
//! current iterate and condenses the Hessian and constraint matrix over the
//! control increments. `feedback` embeds the measured initial state, which
//! only touches vector data (O(N nx^2)), solves the dense QP with a hot start
//! and takes a full step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{self, ActiveConstraint, DenseQp, QpOptions, QpStatus, Side, WorkingSet};

/// Identifies a path-constraint row across cycles.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub node: usize,
    pub tag: usize,
}

/// Linearised path constraint `lo <= value + grad' dx_k <= hi` at node `key.node`.
#[derive(Clone, Debug)]
pub struct StageRow {
    pub key: RowKey,
    pub grad: DVector<f64>,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Quadratic model `1/2 dx' hess dx + grad' dx` of a stage term.
#[derive(Clone, Debug)]
pub struct QuadraticTerm {
    pub hess: DMatrix<f64>,
    pub grad: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct Linearization {
    pub x_next: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

pub trait ShootingProblem: Sync {
    fn horizon(&self) -> usize;
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn linearize(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization>;
    /// Cost on the state at node `k`, `1 <= k <= N` (node N carries the terminal term).
    fn state_cost(&self, k: usize, x: &DVector<f64>) -> Result<QuadraticTerm>;
    fn control_cost(&self, k: usize, u: &DVector<f64>) -> QuadraticTerm;
    /// Absolute bounds on the control at node `k`.
    fn control_bounds(&self, k: usize) -> (DVector<f64>, DVector<f64>);
    /// Path constraints on the state at node `k`, `1 <= k <= N`.
    fn state_rows(&self, k: usize, x: &DVector<f64>) -> Result<Vec<StageRow>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShootingIterate {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub feasible: bool,
}

impl ShootingIterate {
    /// Constant-state trajectory with zero controls.
    pub fn constant(x0: &DVector<f64>, nu: usize, n: usize) -> Self {
        Self { x: vec![x0.clone(); n + 1], u: vec![DVector::zeros(nu); n], feasible: true }
    }

    /// Forward simulation of a control sequence from `x0`.
    pub fn rollout<P: ShootingProblem + ?Sized>(problem: &P, x0: &DVector<f64>, u: Vec<DVector<f64>>) -> Result<Self> {
        let mut x = vec![x0.clone()];
        for (k, uk) in u.iter().enumerate() {
            let next = problem.linearize(k, &x[k], uk)?.x_next;
            x.push(next);
        }
        Ok(Self { x, u, feasible: true })
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }
}

/// Active-set entry expressed in problem terms so it survives a shift.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActiveKey {
    Control { node: usize, component: usize },
    Row(RowKey),
}

#[derive(Clone, Debug)]
pub struct CondensedQp {
    /// H and A are final; g and all bounds hold the x0-independent parts.
    pub qp: DenseQp,
    pub lin: Vec<Linearization>,
    pub defects: Vec<DVector<f64>>,
    pub stage: Vec<QuadraticTerm>,
    pub control: Vec<QuadraticTerm>,
    pub rows: Vec<StageRow>,
    pub u_lo: Vec<DVector<f64>>,
    pub u_hi: Vec<DVector<f64>>,
    pub nx: usize,
    pub nu: usize,
}

impl CondensedQp {
    pub fn horizon(&self) -> usize {
        self.lin.len()
    }

    fn keys(&self) -> Vec<ActiveKey> {
        let n_u = self.horizon() * self.nu;
        let mut keys: Vec<ActiveKey> =
            (0..n_u).map(|i| ActiveKey::Control { node: i / self.nu, component: i % self.nu }).collect();
        keys.extend(self.rows.iter().map(|r| ActiveKey::Row(r.key)));
        keys
    }

    /// Trajectory of the constant part `c_k` of `dx_k` for a given `dx_0`.
    fn free_response(&self, dx0: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut c = vec![dx0.clone()];
        for (l, d) in self.lin.iter().zip(&self.defects) {
            let next = &l.a * c.last().unwrap() + d;
            c.push(next);
        }
        c
    }

    /// Fill the x0-dependent vector data of the QP.
    pub fn embed(&self, dx0: &DVector<f64>, u: &[DVector<f64>]) -> DenseQp {
        let n = self.horizon();
        let nu = self.nu;
        let c = self.free_response(dx0);
        let mut qp = self.qp.clone();
        // gradient via the adjoint recursion
        let mut nu_adj = DVector::zeros(self.nx);
        for i in (0..n).rev() {
            let st = &self.stage[i];
            nu_adj = &st.hess * &c[i + 1] + &st.grad + &nu_adj;
            let gi = &self.control[i].grad + self.lin[i].b.tr_mul(&nu_adj);
            qp.g.rows_mut(i * nu, nu).copy_from(&gi);
            nu_adj = self.lin[i].a.tr_mul(&nu_adj);
        }
        for i in 0..n {
            for j in 0..nu {
                qp.lb[i * nu + j] = self.u_lo[i][j] - u[i][j];
                qp.ub[i * nu + j] = self.u_hi[i][j] - u[i][j];
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            let shift = row.value + row.grad.dot(&c[row.key.node]);
            qp.lba[r] = row.lo - shift;
            qp.uba[r] = row.hi - shift;
        }
        qp
    }

    /// State increments implied by `dx0` and the control increments.
    pub fn expand(&self, dx0: &DVector<f64>, du: &DVector<f64>) -> Vec<DVector<f64>> {
        let nu = self.nu;
        let mut dx = vec![dx0.clone()];
        for (k, (l, d)) in self.lin.iter().zip(&self.defects).enumerate() {
            let next = &l.a * &dx[k] + &l.b * du.rows(k * nu, nu) + d;
            dx.push(next);
        }
        dx
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub prepare_ms: f64,
    pub feedback_ms: f64,
    pub qp_status: QpStatus,
    pub wsr: usize,
    /// max of step norm, defect norm and linearised constraint violation
    pub kkt: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct FeedbackOutcome {
    pub u_apply: DVector<f64>,
    pub status: QpStatus,
    pub wsr: usize,
    pub step_norm: f64,
    pub objective: f64,
    pub feedback_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SqpReport {
    pub iterations: Vec<IterationStats>,
    pub u_apply: Option<DVector<f64>>,
}

impl SqpReport {
    pub fn succeeded(&self) -> bool {
        self.u_apply.is_some()
    }
}

/// RTI engine: the iterate plus solver state carried between cycles.
#[derive(Clone, Debug)]
pub struct RtiEngine {
    pub iterate: ShootingIterate,
    pub qp_options: QpOptions,
    active: Vec<(ActiveKey, Side)>,
}

impl RtiEngine {
    pub fn new(iterate: ShootingIterate, qp_options: QpOptions) -> Self {
        Self { iterate, qp_options, active: Vec::new() }
    }

    pub fn active_keys(&self) -> &[(ActiveKey, Side)] {
        &self.active
    }

    pub fn clear_active(&mut self) {
        self.active.clear();
    }

    pub fn prepare<P: ShootingProblem + ?Sized>(&self, problem: &P) -> Result<CondensedQp> {
        let n = problem.horizon();
        let (nx, nu) = (problem.nx(), problem.nu());
        let it = &self.iterate;
        if it.x.len() != n + 1 || it.u.len() != n || it.x.iter().any(|x| x.len() != nx) || it.u.iter().any(|u| u.len() != nu) {
            return Err(Error::Dimension(format!("iterate does not match a horizon of {n} with nx={nx}, nu={nu}")));
        }
        let mut lin = Vec::with_capacity(n);
        let mut defects = Vec::with_capacity(n);
        for k in 0..n {
            let l = problem
                .linearize(k, &it.x[k], &it.u[k])
                .map_err(|e| Error::Feedback(format!("integration failed at node {k}: {e}")))?;
            defects.push(&l.x_next - &it.x[k + 1]);
            lin.push(l);
        }
        let mut stage = Vec::with_capacity(n);
        let mut rows = Vec::new();
        for k in 1..=n {
            stage.push(problem.state_cost(k, &it.x[k])?);
            rows.extend(problem.state_rows(k, &it.x[k])?);
        }
        let control: Vec<QuadraticTerm> = (0..n).map(|k| problem.control_cost(k, &it.u[k])).collect();
        let (u_lo, u_hi): (Vec<_>, Vec<_>) = (0..n).map(|k| problem.control_bounds(k)).unzip();

        let nv = n * nu;
        let mut h = DMatrix::zeros(nv, nv);
        // column block j: lambda_k = H_k Gamma_{k,j} + A_k' lambda_{k+1}
        for j in 0..n {
            let mut gamma = lin[j].b.clone();
            let mut gammas = Vec::with_capacity(n - j);
            for k in j + 1..=n {
                gammas.push(gamma.clone());
                if k < n {
                    gamma = &lin[k].a * &gamma;
                }
            }
            let mut lambda = DMatrix::zeros(nx, nu);
            for k in (j + 1..=n).rev() {
                lambda = &stage[k - 1].hess * &gammas[k - j - 1] + lambda;
                // lambda now holds the adjoint at node k; B_{k-1}' lambda_k is block (k-1, j)
                let block = lin[k - 1].b.tr_mul(&lambda);
                h.view_mut(((k - 1) * nu, j * nu), (nu, nu)).copy_from(&block);
                lambda = lin[k - 1].a.tr_mul(&lambda);
            }
            let diag = h.view((j * nu, j * nu), (nu, nu)) + &control[j].hess;
            h.view_mut((j * nu, j * nu), (nu, nu)).copy_from(&diag);
        }
        // fill the upper triangle from the lower one
        for i in 0..nv {
            for j in i + 1..nv {
                h[(i, j)] = h[(j, i)];
            }
        }
        let mut a = DMatrix::zeros(rows.len(), nv);
        for (r, row) in rows.iter().enumerate() {
            let mut rho = row.grad.clone();
            for j in (0..row.key.node).rev() {
                let coef = lin[j].b.tr_mul(&rho);
                a.view_mut((r, j * nu), (1, nu)).copy_from(&coef.transpose());
                if j > 0 {
                    rho = lin[j].a.tr_mul(&rho);
                }
            }
        }
        let m = rows.len();
        let qp = DenseQp {
            h,
            g: DVector::zeros(nv),
            lb: DVector::zeros(nv),
            ub: DVector::zeros(nv),
            a,
            lba: DVector::zeros(m),
            uba: DVector::zeros(m),
        };
        Ok(CondensedQp { qp, lin, defects, stage, control, rows, u_lo, u_hi, nx, nu })
    }

    /// Embed `x0`, solve the QP and take the full step. The iterate is only
    /// updated when the QP is solved to optimality.
    pub fn feedback(&mut self, cqp: &CondensedQp, x0: &DVector<f64>) -> Result<FeedbackOutcome> {
        let start = Instant::now();
        if x0.len() != cqp.nx {
            return Err(Error::Dimension(format!("initial state has {} entries, expected {}", x0.len(), cqp.nx)));
        }
        let dx0 = x0 - &self.iterate.x[0];
        let qp = self.embed_checked(cqp, &dx0)?;
        let keys = cqp.keys();
        let init = WorkingSet(
            self.active
                .iter()
                .filter_map(|(key, side)| keys.iter().position(|k| k == key).map(|index| ActiveConstraint { index, side: *side }))
                .collect(),
        );
        let sol = qp::solve(&qp, Some(&init), &self.qp_options)?;
        let mut outcome = FeedbackOutcome {
            u_apply: self.iterate.u[0].clone(),
            status: sol.status,
            wsr: sol.wsr,
            step_norm: 0.0,
            objective: sol.objective,
            feedback_ms: 0.0,
        };
        if sol.status == QpStatus::Optimal {
            self.active = sol.working_set.0.iter().map(|c| (keys[c.index], c.side)).collect();
            let dx = cqp.expand(&dx0, &sol.x);
            let nu = cqp.nu;
            for (k, d) in dx.iter().enumerate() {
                self.iterate.x[k] += d;
            }
            for k in 0..cqp.horizon() {
                self.iterate.u[k] += sol.x.rows(k * nu, nu);
            }
            self.iterate.feasible = true;
            outcome.u_apply = self.iterate.u[0].clone();
            outcome.step_norm = sol.x.amax().max(dx.iter().skip(1).map(|d| d.amax()).fold(0.0, f64::max));
        } else {
            self.iterate.feasible = false;
        }
        outcome.feedback_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(outcome)
    }

    fn embed_checked(&self, cqp: &CondensedQp, dx0: &DVector<f64>) -> Result<DenseQp> {
        if self.iterate.u.len() != cqp.horizon() {
            return Err(Error::Dimension("iterate horizon changed since preparation".into()));
        }
        Ok(cqp.embed(dx0, &self.iterate.u))
    }

    /// Move every node one step earlier, duplicating the tail; the problem
    /// supplies the tail state by integrating the repeated last control.
    pub fn shift<P: ShootingProblem + ?Sized>(&mut self, problem: &P) {
        let it = &mut self.iterate;
        let n = it.u.len();
        if n == 0 {
            return;
        }
        it.x.remove(0);
        it.u.remove(0);
        let u_last = it.u.last().cloned().unwrap_or_else(|| DVector::zeros(problem.nu()));
        it.u.push(u_last.clone());
        let x_last = it.x.last().unwrap().clone();
        let tail = problem.linearize(n - 1, &x_last, &u_last).map(|l| l.x_next).unwrap_or(x_last);
        it.x.push(tail);
        self.active = self
            .active
            .iter()
            .filter_map(|(key, side)| {
                let moved = match *key {
                    ActiveKey::Control { node, component } => {
                        node.checked_sub(1).map(|node| ActiveKey::Control { node, component })
                    }
                    ActiveKey::Row(RowKey { node, tag }) => {
                        node.checked_sub(1).filter(|&n| n > 0).map(|node| ActiveKey::Row(RowKey { node, tag }))
                    }
                };
                moved.map(|k| (k, *side))
            })
            .collect();
    }

    /// `n_sqp` preparation/feedback passes against the same initial state.
    pub fn sqp_cycle<P: ShootingProblem + ?Sized>(&mut self, problem: &P, x0: &DVector<f64>, n_sqp: usize) -> Result<SqpReport> {
        if n_sqp == 0 {
            return Err(Error::Config("n_sqp must be at least 1".into()));
        }
        let mut report = SqpReport { iterations: Vec::new(), u_apply: None };
        for _ in 0..n_sqp {
            let t0 = Instant::now();
            let cqp = self.prepare(problem)?;
            let prepare_ms = t0.elapsed().as_secs_f64() * 1e3;
            let defect = cqp.defects.iter().map(|d| d.amax()).fold(0.0, f64::max);
            let out = self.feedback(&cqp, x0)?;
            let violation = if out.status == QpStatus::Optimal { 0.0 } else { f64::INFINITY };
            report.iterations.push(IterationStats {
                prepare_ms,
                feedback_ms: out.feedback_ms,
                qp_status: out.status,
                wsr: out.wsr,
                kkt: out.step_norm.max(defect).max(violation),
                objective: out.objective,
            });
            if out.status != QpStatus::Optimal {
                report.u_apply = None;
                return Ok(report);
            }
            report.u_apply = Some(out.u_apply);
        }
        Ok(report)
    }
}

/// Discrete linear system with quadratic costs, mainly a test vehicle for the
/// engine: `x+ = A x + B u`, stage `x'Qx + u'Ru`, terminal `x'Px`.
#[derive(Clone, Debug)]
pub struct LinearQuadraticProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub horizon: usize,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl LinearQuadraticProblem {
    pub fn unconstrained(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>, horizon: usize) -> Self {
        let nu = b.ncols();
        Self {
            a,
            b,
            q,
            r,
            p,
            horizon,
            u_min: DVector::from_element(nu, f64::NEG_INFINITY),
            u_max: DVector::from_element(nu, f64::INFINITY),
        }
    }
}

impl ShootingProblem for LinearQuadraticProblem {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn nx(&self) -> usize {
        self.a.nrows()
    }
    fn nu(&self) -> usize {
        self.b.ncols()
    }
    fn linearize(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        Ok(Linearization { x_next: &self.a * x + &self.b * u, a: self.a.clone(), b: self.b.clone() })
    }
    fn state_cost(&self, k: usize, x: &DVector<f64>) -> Result<QuadraticTerm> {
        let w = if k == self.horizon { &self.p } else { &self.q };
        Ok(QuadraticTerm { hess: w.clone(), grad: w * x })
    }
    fn control_cost(&self, _k: usize, u: &DVector<f64>) -> QuadraticTerm {
        QuadraticTerm { hess: self.r.clone(), grad: &self.r * u }
    }
    fn control_bounds(&self, _k: usize) -> (DVector<f64>, DVector<f64>) {
        (self.u_min.clone(), self.u_max.clone())
    }
    fn state_rows(&self, _k: usize, _x: &DVector<f64>) -> Result<Vec<StageRow>> {
        Ok(Vec::new())
    }
}
