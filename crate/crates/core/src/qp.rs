//! Dense convex QP solver with a warm-startable active-set strategy.
//!
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  lb  <= x   <= ub
//!                 lbA <= A x <= ubA
//! ```
//!
//! The iteration is the dual active-set scheme of Goldfarb and Idnani: it
//! starts from an unconstrained (or working-set constrained) minimiser and adds
//! the most violated constraint until the iterate is primal feasible, keeping
//! the factorisation `J = L^{-T} Q` and the triangular `R` up to date with
//! Givens rotations. A hot start seeds the working set from a previous
//! solution, so a nearby problem usually needs only a handful of changes.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lba: DVector<f64>,
    pub uba: DVector<f64>,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Lower,
    Upper,
}

/// Active constraint: index `< n` is a variable bound, otherwise the general
/// row `index - n`.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActiveConstraint {
    pub index: usize,
    pub side: Side,
}

#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkingSet(pub Vec<ActiveConstraint>);

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxWsr,
    Infeasible,
    BudgetExceeded,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers for bounds then general rows. Positive when a lower bound is
    /// active, negative for an upper bound: `H x + g = y_box + A' y_rows`.
    pub duals: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub working_set: WorkingSet,
    /// working-set changes performed (warm-start seeding excluded)
    pub wsr: usize,
    pub primal_feasible: bool,
    /// Hessian shift that had to be added for the factorisation
    pub regularization: f64,
}

#[derive(Clone, Debug)]
pub struct QpOptions {
    pub max_wsr: usize,
    pub time_budget: Option<Duration>,
    pub feas_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { max_wsr: 80, time_budget: None, feas_tol: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

impl DenseQp {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    /// Box-constrained problem without general rows.
    pub fn boxed(h: DMatrix<f64>, g: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        let n = g.len();
        Self { h, g, lb, ub, a: DMatrix::zeros(0, n), lba: DVector::zeros(0), uba: DVector::zeros(0) }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.h.nrows() != n || self.h.ncols() != n || self.lb.len() != n || self.ub.len() != n {
            return Err(Error::Dimension(format!("QP with {n} variables has inconsistent H or bounds")));
        }
        if self.a.ncols() != n || self.lba.len() != self.m() || self.uba.len() != self.m() {
            return Err(Error::Dimension("constraint matrix and its bounds disagree".into()));
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-9 * (1.0 + self.h.amax()) {
            return Err(Error::Domain(format!("Hessian is not symmetric (max asymmetry {asym:e})")));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n() {
            worst = worst.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
        }
        let ax = &self.a * x;
        for i in 0..self.m() {
            worst = worst.max(self.lba[i] - ax[i]).max(ax[i] - self.uba[i]);
        }
        worst
    }

    /// KKT residuals scaled by the problem data magnitude.
    pub fn kkt_residual(&self, x: &DVector<f64>, duals: &DVector<f64>) -> KktResidual {
        let n = self.n();
        let m = self.m();
        let y_box = duals.rows(0, n);
        let y_rows = duals.rows(n, m);
        let grad = &self.h * x + &self.g;
        let stat = &grad - y_box - self.a.transpose() * y_rows;
        let ax = &self.a * x;
        let scale = 1.0 + self.g.amax() + self.h.amax() * x.amax();
        let mut dual: f64 = 0.0;
        let mut comp: f64 = 0.0;
        let mut check = |y: f64, v: f64, lo: f64, hi: f64| {
            if y > 0.0 {
                if lo == f64::NEG_INFINITY {
                    dual = dual.max(y);
                } else {
                    comp = comp.max(y * (v - lo).abs());
                }
            } else if y < 0.0 {
                if hi == f64::INFINITY {
                    dual = dual.max(-y);
                } else {
                    comp = comp.max(-y * (hi - v).abs());
                }
            }
        };
        for i in 0..n {
            check(y_box[i], x[i], self.lb[i], self.ub[i]);
        }
        for i in 0..m {
            check(y_rows[i], ax[i], self.lba[i], self.uba[i]);
        }
        let bscale = 1.0 + x.amax();
        KktResidual {
            stationarity: stat.amax() / scale,
            primal: self.max_violation(x) / bscale,
            dual: dual / scale,
            complementarity: comp / (scale * bscale),
        }
    }

    /// Plain-text dump: one `# name rows cols` header per matrix followed by
    /// row-major decimal values.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, rows: usize, cols: usize, get: &dyn Fn(usize, usize) -> f64| {
            let _ = writeln!(out, "# {name} {rows} {cols}");
            for i in 0..rows {
                let line: Vec<String> = (0..cols).map(|j| format!("{:?}", get(i, j))).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        let n = self.n();
        let m = self.m();
        section("H", n, n, &|i, j| self.h[(i, j)]);
        section("g", n, 1, &|i, _| self.g[i]);
        section("lb", n, 1, &|i, _| self.lb[i]);
        section("ub", n, 1, &|i, _| self.ub[i]);
        section("A", m, n, &|i, j| self.a[(i, j)]);
        section("lbA", m, 1, &|i, _| self.lba[i]);
        section("ubA", m, 1, &|i, _| self.uba[i]);
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut sections: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let parts: Vec<&str> = header.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("bad section header '{line}'")));
                }
                let rows = parts[1].parse().map_err(|_| Error::Config(format!("bad row count in '{line}'")))?;
                let cols = parts[2].parse().map_err(|_| Error::Config(format!("bad column count in '{line}'")))?;
                sections.push((parts[0].to_string(), rows, cols, Vec::new()));
            } else {
                let sec = sections.last_mut().ok_or_else(|| Error::Config("data before first header".into()))?;
                for tok in line.split_whitespace() {
                    sec.3.push(tok.parse().map_err(|_| Error::Config(format!("bad number '{tok}'")))?);
                }
            }
        }
        let take = |name: &str| -> Result<DMatrix<f64>> {
            let (_, r, c, v) = sections
                .iter()
                .find(|s| s.0 == name)
                .ok_or_else(|| Error::Config(format!("missing section {name}")))?;
            if v.len() != r * c {
                return Err(Error::Config(format!("section {name} has {} values, expected {}", v.len(), r * c)));
            }
            Ok(DMatrix::from_row_slice(*r, *c, v))
        };
        let col = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let qp = Self {
            h: take("H")?,
            g: col(take("g")?),
            lb: col(take("lb")?),
            ub: col(take("ub")?),
            a: take("A")?,
            lba: col(take("lbA")?),
            uba: col(take("ubA")?),
        };
        qp.validate()?;
        Ok(qp)
    }
}

/// One-sided view `n' x >= b` of a bound or row side.
struct Constraints<'a> {
    qp: &'a DenseQp,
    norms: Vec<f64>,
}

impl<'a> Constraints<'a> {
    fn new(qp: &'a DenseQp) -> Self {
        let n = qp.n();
        let mut norms = vec![1.0; n + qp.m()];
        for i in 0..qp.m() {
            norms[n + i] = qp.a.row(i).norm();
        }
        Self { qp, norms }
    }

    fn rhs(&self, c: ActiveConstraint) -> f64 {
        let n = self.qp.n();
        match (c.index < n, c.side) {
            (true, Side::Lower) => self.qp.lb[c.index],
            (true, Side::Upper) => -self.qp.ub[c.index],
            (false, Side::Lower) => self.qp.lba[c.index - n],
            (false, Side::Upper) => -self.qp.uba[c.index - n],
        }
    }

    fn sign(side: Side) -> f64 {
        match side {
            Side::Lower => 1.0,
            Side::Upper => -1.0,
        }
    }

    /// `n' v`
    fn dot(&self, c: ActiveConstraint, v: &DVector<f64>) -> f64 {
        let n = self.qp.n();
        let raw = if c.index < n { v[c.index] } else { self.qp.a.row(c.index - n).transpose().dot(v) };
        Self::sign(c.side) * raw
    }

    /// `J' n`
    fn project(&self, c: ActiveConstraint, j: &DMatrix<f64>) -> DVector<f64> {
        let n = self.qp.n();
        let sign = Self::sign(c.side);
        if c.index < n {
            j.row(c.index).transpose() * sign
        } else {
            j.tr_mul(&self.qp.a.row(c.index - n).transpose()) * sign
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        (1.0, 0.0, a)
    } else {
        let r = a.hypot(b);
        (a / r, b / r, r)
    }
}

struct Factor {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    fn rotate_columns(&mut self, k: usize, c: f64, s: f64) {
        let n = self.j.nrows();
        for i in 0..n {
            let a = self.j[(i, k)];
            let b = self.j[(i, k + 1)];
            self.j[(i, k)] = c * a + s * b;
            self.j[(i, k + 1)] = -s * a + c * b;
        }
    }

    /// Append a constraint with `d = J' n`. Returns false if it is linearly
    /// dependent on the active ones.
    fn add(&mut self, mut d: DVector<f64>, norm: f64) -> bool {
        let n = d.len();
        let q = self.q;
        for k in (q + 1..n).rev() {
            if d[k] == 0.0 {
                continue;
            }
            let (c, s, r) = givens(d[k - 1], d[k]);
            d[k - 1] = r;
            d[k] = 0.0;
            self.rotate_columns(k - 1, c, s);
        }
        if d[q].abs() <= 1e-12 * norm.max(1e-300) {
            return false;
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.q += 1;
        true
    }

    fn remove(&mut self, l: usize) {
        let q = self.q;
        for col in l..q - 1 {
            for i in 0..q {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for k in l..q - 1 {
            let (c, s, rr) = givens(self.r[(k, k)], self.r[(k + 1, k)]);
            self.r[(k, k)] = rr;
            self.r[(k + 1, k)] = 0.0;
            for col in k + 1..q - 1 {
                let a = self.r[(k, col)];
                let b = self.r[(k + 1, col)];
                self.r[(k, col)] = c * a + s * b;
                self.r[(k + 1, col)] = -s * a + c * b;
            }
            self.rotate_columns(k, c, s);
        }
        self.q -= 1;
    }

    /// Solve `R x = b` for the leading q x q block.
    fn solve_r(&self, b: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut x = vec![0.0; q];
        for i in (0..q).rev() {
            let mut v = b[i];
            for k in i + 1..q {
                v -= self.r[(i, k)] * x[k];
            }
            x[i] = v / self.r[(i, i)];
        }
        x
    }

    /// Solve `R' x = b`.
    fn solve_rt(&self, b: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut x = vec![0.0; q];
        for i in 0..q {
            let mut v = b[i];
            for k in 0..i {
                v -= self.r[(k, i)] * x[k];
            }
            x[i] = v / self.r[(i, i)];
        }
        x
    }
}

/// Cholesky factor of `H + eps I`, increasing `eps` from `1e-8 trace/n` until
/// the factorisation succeeds with pivots above tolerance.
fn regularized_cholesky(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = h.nrows();
    let scale = (h.trace() / n.max(1) as f64).abs().max(1e-300);
    let mut eps = 0.0;
    for _ in 0..12 {
        let shifted = h + DMatrix::identity(n, n) * eps;
        if let Some(ch) = shifted.clone().cholesky() {
            let l = ch.unpack();
            let min_pivot = (0..n).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_pivot * min_pivot > 1e-14 * scale {
                return Ok((l, eps));
            }
        }
        eps = if eps == 0.0 { 1e-8 * scale } else { eps * 10.0 };
    }
    Err(Error::Domain("Hessian could not be made positive definite".into()))
}

pub fn solve(qp: &DenseQp, init: Option<&WorkingSet>, opts: &QpOptions) -> Result<QpSolution> {
    qp.validate()?;
    let start = Instant::now();
    let n = qp.n();
    let m = qp.m();
    let cons = Constraints::new(qp);

    let infeasible_bounds = (0..n).any(|i| qp.lb[i] > qp.ub[i]) || (0..m).any(|i| qp.lba[i] > qp.uba[i]);

    let (l, regularization) = regularized_cholesky(&qp.h)?;
    let j = l
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Domain("singular Cholesky factor".into()))?;
    let mut f = Factor { j, r: DMatrix::zeros(n, n), q: 0 };
    let mut active: Vec<ActiveConstraint> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut wsr = 0usize;

    let finish = |x: DVector<f64>, active: &[ActiveConstraint], mult: &[f64], status: QpStatus, wsr: usize| {
        let mut duals = DVector::zeros(n + m);
        for (c, u) in active.iter().zip(mult) {
            duals[c.index] += Constraints::sign(c.side) * u;
        }
        let primal_feasible = qp.max_violation(&x) <= opts.feas_tol * (1.0 + x.amax());
        QpSolution {
            objective: qp.objective(&x),
            x,
            duals,
            status,
            working_set: WorkingSet(active.to_vec()),
            wsr,
            primal_feasible,
            regularization,
        }
    };

    if infeasible_bounds {
        return Ok(finish(DVector::zeros(n), &[], &[], QpStatus::Infeasible, 0));
    }

    let is_finite = |c: ActiveConstraint| cons.rhs(c).is_finite();

    // Equality-constrained minimiser over the active set and its multipliers.
    let exact = |f: &Factor, active: &[ActiveConstraint]| -> (DVector<f64>, Vec<f64>) {
        let q = f.q;
        let b: Vec<f64> = active.iter().map(|c| cons.rhs(*c)).collect();
        let y1 = f.solve_rt(&b);
        let jtg = f.j.tr_mul(&qp.g);
        let mut x = DVector::zeros(n);
        for k in 0..n {
            let coef = if k < q { y1[k] } else { -jtg[k] };
            if coef != 0.0 {
                x.axpy(coef, &f.j.column(k), 1.0);
            }
        }
        let rhs: Vec<f64> = (0..q).map(|k| y1[k] + jtg[k]).collect();
        (x, f.solve_r(&rhs))
    };

    let mut x;
    if let Some(ws) = init {
        let mut seen = std::collections::HashSet::new();
        for &c in &ws.0 {
            if c.index >= n + m || !is_finite(c) || !seen.insert(c.index) {
                continue;
            }
            let d = cons.project(c, &f.j);
            if f.add(d, cons.norms[c.index]) {
                active.push(c);
            }
        }
        loop {
            let (xe, ue) = exact(&f, &active);
            x = xe;
            mult = ue;
            let worst = mult
                .iter()
                .enumerate()
                .filter(|(_, u)| **u < -1e-12)
                .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
                .map(|(k, _)| k);
            match worst {
                Some(k) => {
                    f.remove(k);
                    active.remove(k);
                    mult.remove(k);
                    wsr += 1;
                }
                None => break,
            }
        }
        for u in mult.iter_mut() {
            *u = u.max(0.0);
        }
    } else {
        x = exact(&f, &active).0;
    }

    let tol_of = |c: ActiveConstraint| opts.feas_tol * (cons.norms[c.index] + cons.rhs(c).abs());
    let mut refined = false;

    loop {
        if wsr >= opts.max_wsr {
            return Ok(finish(x, &active, &mult, QpStatus::MaxWsr, wsr));
        }
        if let Some(budget) = opts.time_budget {
            if start.elapsed() > budget {
                return Ok(finish(x, &active, &mult, QpStatus::BudgetExceeded, wsr));
            }
        }
        // most violated constraint, scaled by its normal, lowest index on ties
        let mut pick: Option<(ActiveConstraint, f64)> = None;
        let ax = &qp.a * &x;
        for idx in 0..n + m {
            if active.iter().any(|c| c.index == idx) {
                continue;
            }
            let v = if idx < n { x[idx] } else { ax[idx - n] };
            for side in [Side::Lower, Side::Upper] {
                let c = ActiveConstraint { index: idx, side };
                let b = cons.rhs(c);
                if !b.is_finite() {
                    continue;
                }
                let slack = Constraints::sign(side) * v - b;
                if slack < -tol_of(c) {
                    let scaled = slack / cons.norms[idx].max(1e-300);
                    if pick.is_none_or(|(_, best)| scaled < best) {
                        pick = Some((c, scaled));
                    }
                }
            }
        }
        let Some((p, _)) = pick else {
            if refined {
                return Ok(finish(x, &active, &mult, QpStatus::Optimal, wsr));
            }
            // recompute from the factorisation to shed accumulated drift
            let (xe, ue) = exact(&f, &active);
            x = xe;
            mult = ue.into_iter().map(|u| u.max(0.0)).collect();
            refined = true;
            continue;
        };
        refined = false;

        let mut u_plus = 0.0;
        loop {
            let d = cons.project(p, &f.j);
            let q = f.q;
            let mut z = DVector::zeros(n);
            for k in q..n {
                if d[k] != 0.0 {
                    z.axpy(d[k], &f.j.column(k), 1.0);
                }
            }
            let r = f.solve_r(&d.as_slice()[..q]);
            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (k, (&rk, &uk)) in r.iter().zip(&mult).enumerate() {
                if rk > 1e-12 {
                    let ratio = uk / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let znorm = z.amax();
            let zn = cons.dot(p, &z);
            let t2 = if znorm > 1e-14 && zn > 1e-14 * cons.norms[p.index] {
                let slack = cons.dot(p, &x) - cons.rhs(p);
                -slack / zn
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Ok(finish(x, &active, &mult, QpStatus::Infeasible, wsr));
            }
            if t2.is_infinite() {
                for (uk, rk) in mult.iter_mut().zip(&r) {
                    *uk -= t1 * rk;
                }
                u_plus += t1;
                let k = drop.expect("finite partial step has a blocking constraint");
                f.remove(k);
                active.remove(k);
                mult.remove(k);
                wsr += 1;
                if wsr >= opts.max_wsr {
                    return Ok(finish(x, &active, &mult, QpStatus::MaxWsr, wsr));
                }
                continue;
            }
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (uk, rk) in mult.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            u_plus += t;
            if t2 <= t1 {
                if f.add(d, cons.norms[p.index]) {
                    active.push(p);
                    mult.push(u_plus);
                }
                wsr += 1;
                break;
            }
            let k = drop.expect("partial step has a blocking constraint");
            f.remove(k);
            active.remove(k);
            mult.remove(k);
            wsr += 1;
            if wsr >= opts.max_wsr {
                return Ok(finish(x, &active, &mult, QpStatus::MaxWsr, wsr));
            }
        }
    }
}

/// Re-solve a problem of the same dimensions starting from the working set of
/// a previous solution.
pub fn hotstart(prev: &QpSolution, qp: &DenseQp, opts: &QpOptions) -> Result<QpSolution> {
    if prev.x.len() != qp.n() {
        return Err(Error::Dimension(format!(
            "hot start from a {}-variable solution into a {}-variable problem",
            prev.x.len(),
            qp.n()
        )));
    }
    solve(qp, Some(&prev.working_set), opts)
}

/// Solver instance that remembers the last working set between calls.
#[derive(Clone, Debug, Default)]
pub struct ActiveSetSolver {
    pub options: QpOptions,
    last: Option<QpSolution>,
}

impl ActiveSetSolver {
    pub fn new(options: QpOptions) -> Self {
        Self { options, last: None }
    }

    pub fn solve(&mut self, qp: &DenseQp, init: Option<&WorkingSet>) -> Result<QpSolution> {
        let sol = solve(qp, init, &self.options)?;
        self.last = Some(sol.clone());
        Ok(sol)
    }

    /// Solve, seeding from the previous call when dimensions match.
    pub fn hotstart(&mut self, qp: &DenseQp) -> Result<QpSolution> {
        let sol = match &self.last {
            Some(prev) if prev.x.len() == qp.n() => hotstart(prev, qp, &self.options)?,
            _ => solve(qp, None, &self.options)?,
        };
        self.last = Some(sol.clone());
        Ok(sol)
    }

    pub fn last(&self) -> Option<&QpSolution> {
        self.last.as_ref()
    }
}
