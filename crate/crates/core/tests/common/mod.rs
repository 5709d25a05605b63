//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urban_nmpc::qp::DenseQp;

/// Random strictly convex QP that is feasible by construction.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DenseQp {
    let mut gen = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let mroot = DMatrix::from_fn(n, n, |_, _| gen(-1.0, 1.0));
    let h = mroot.transpose() * &mroot + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| gen(-3.0, 3.0));
    let lb = DVector::from_fn(n, |_, _| if gen(0.0, 1.0) < 0.15 { f64::NEG_INFINITY } else { -gen(0.3, 2.0) });
    let ub = DVector::from_fn(n, |_, _| if gen(0.0, 1.0) < 0.15 { f64::INFINITY } else { gen(0.3, 2.0) });
    // interior point of the box used to make the general rows feasible
    let x_feas = DVector::from_fn(n, |i, _| {
        let lo = if lb[i].is_finite() { lb[i] } else { -1.0 };
        let hi = if ub[i].is_finite() { ub[i] } else { 1.0 };
        lo + (hi - lo) * 0.5
    });
    let a = DMatrix::from_fn(m, n, |_, _| gen(-1.0, 1.0));
    let ax = &a * &x_feas;
    let lba = DVector::from_fn(m, |i, _| if gen(0.0, 1.0) < 0.3 { f64::NEG_INFINITY } else { ax[i] - gen(0.0, 1.0) });
    let uba = DVector::from_fn(m, |i, _| if gen(0.0, 1.0) < 0.3 { f64::INFINITY } else { ax[i] + gen(0.0, 1.0) });
    DenseQp { h, g, lb, ub, a, lba, uba }
}

/// Stacked one-sided rows `C x >= d` for every finite bound side.
fn one_sided(qp: &DenseQp) -> (DMatrix<f64>, DVector<f64>) {
    let n = qp.n();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..n {
        let e = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
        if qp.lb[i].is_finite() {
            rows.push((e.clone(), qp.lb[i]));
        }
        if qp.ub[i].is_finite() {
            rows.push((-e, -qp.ub[i]));
        }
    }
    for i in 0..qp.m() {
        let a = qp.a.row(i).transpose();
        if qp.lba[i].is_finite() {
            rows.push((a.clone(), qp.lba[i]));
        }
        if qp.uba[i].is_finite() {
            rows.push((-a, -qp.uba[i]));
        }
    }
    let c = DMatrix::from_fn(rows.len(), n, |r, j| rows[r].0[j]);
    let d = DVector::from_fn(rows.len(), |r, _| rows[r].1);
    (c, d)
}

/// Try every assignment of {inactive, lower, upper} to every constraint and
/// return the KKT point. Only usable for a handful of constraints.
pub fn enumerate_qp(qp: &DenseQp) -> Option<DVector<f64>> {
    let n = qp.n();
    let k = n + qp.m();
    let normal = |j: usize| -> DVector<f64> {
        if j < n {
            DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 })
        } else {
            qp.a.row(j - n).transpose()
        }
    };
    let bound = |j: usize, upper: bool| -> f64 {
        match (j < n, upper) {
            (true, false) => qp.lb[j],
            (true, true) => qp.ub[j],
            (false, false) => qp.lba[j - n],
            (false, true) => qp.uba[j - n],
        }
    };
    let total = 3usize.pow(k as u32);
    let mut best: Option<(f64, DVector<f64>)> = None;
    'combo: for code in 0..total {
        let mut c = code;
        let mut act: Vec<(usize, bool)> = Vec::new();
        for j in 0..k {
            match c % 3 {
                1 => act.push((j, false)),
                2 => act.push((j, true)),
                _ => {}
            }
            c /= 3;
        }
        if act.len() > n {
            continue;
        }
        for &(j, up) in &act {
            if !bound(j, up).is_finite() {
                continue 'combo;
            }
        }
        let q = act.len();
        let mut kkt = DMatrix::zeros(n + q, n + q);
        let mut rhs = DVector::zeros(n + q);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        for i in 0..n {
            rhs[i] = -qp.g[i];
        }
        for (r, &(j, up)) in act.iter().enumerate() {
            let a = normal(j);
            for i in 0..n {
                kkt[(i, n + r)] = -a[i];
                kkt[(n + r, i)] = a[i];
            }
            rhs[n + r] = bound(j, up);
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        if qp.max_violation(&x) > 1e-9 {
            continue;
        }
        for (r, &(_, up)) in act.iter().enumerate() {
            let y = sol[n + r];
            if (!up && y < -1e-9) || (up && y > 1e-9) {
                continue 'combo;
            }
        }
        let obj = qp.objective(&x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

/// Basic primal-dual interior-point method on `C x - d = s >= 0`.
pub fn interior_point_qp(qp: &DenseQp) -> Option<DVector<f64>> {
    let n = qp.n();
    let (c, d) = one_sided(qp);
    let p = c.nrows();
    let mut x = DVector::zeros(n);
    let mut s = (&c * &x - &d).map(|v| v.max(1.0));
    let mut z = DVector::from_element(p, 1.0);
    let scale = 1.0 + qp.g.amax() + d.amax();
    for _ in 0..300 {
        let rd = &qp.h * &x + &qp.g - c.transpose() * &z;
        let rp = &c * &x - &s - &d;
        let mu = if p > 0 { s.dot(&z) / p as f64 } else { 0.0 };
        if rd.amax() < 1e-11 * scale && rp.amax() < 1e-11 * scale && mu < 1e-12 * scale {
            return Some(x);
        }
        let sigma = 0.1;
        let w = DVector::from_fn(p, |i, _| z[i] / s[i]);
        let mut lhs = qp.h.clone();
        for i in 0..p {
            let row = c.row(i);
            lhs += row.transpose() * row * w[i];
        }
        let corr = DVector::from_fn(p, |i, _| (sigma * mu - s[i] * z[i] - z[i] * rp[i]) / s[i]);
        let rhs = -&rd + c.transpose() * corr;
        let dx = lhs.cholesky()?.solve(&rhs);
        let ds = &c * &dx + &rp;
        let dz = DVector::from_fn(p, |i, _| (sigma * mu - s[i] * z[i] - z[i] * ds[i]) / s[i]);
        let mut alpha: f64 = 1.0;
        for i in 0..p {
            if ds[i] < 0.0 {
                alpha = alpha.min(-0.99 * s[i] / ds[i]);
            }
            if dz[i] < 0.0 {
                alpha = alpha.min(-0.99 * z[i] / dz[i]);
            }
        }
        x += &dx * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
    }
    None
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random perturbation of the vector data of a QP (same matrices).
pub fn perturb_qp(rng: &mut ChaCha8Rng, qp: &DenseQp, scale: f64) -> DenseQp {
    let mut out = qp.clone();
    for v in out.g.iter_mut() {
        *v += scale * rng.random_range(-1.0..1.0);
    }
    for v in out.lb.iter_mut().chain(out.ub.iter_mut()) {
        if v.is_finite() {
            *v += 0.1 * scale * rng.random_range(-1.0..1.0);
        }
    }
    for i in 0..out.n() {
        if out.lb[i] > out.ub[i] {
            out.lb[i] = out.ub[i];
        }
    }
    out
}

/// Exact optimum by enumerating every subset of the one-sided constraints
/// that are nearly active at `guess` (typically an interior-point estimate).
/// Returns `None` when more than `max_candidates` rows are near-active.
pub fn enumerate_near_active(qp: &DenseQp, guess: &DVector<f64>, tol: f64, max_candidates: usize) -> Option<DVector<f64>> {
    let n = qp.n();
    let (c, d) = one_sided(qp);
    let slack = &c * guess - &d;
    let cand: Vec<usize> = (0..c.nrows()).filter(|&r| slack[r] < tol).collect();
    if cand.len() > max_candidates {
        return None;
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    'subset: for mask in 0u64..(1u64 << cand.len()) {
        let act: Vec<usize> = cand.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &r)| r).collect();
        if act.len() > n {
            continue;
        }
        let q = act.len();
        let mut kkt = DMatrix::zeros(n + q, n + q);
        let mut rhs = DVector::zeros(n + q);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        for i in 0..n {
            rhs[i] = -qp.g[i];
        }
        for (k, &r) in act.iter().enumerate() {
            for i in 0..n {
                kkt[(i, n + k)] = -c[(r, i)];
                kkt[(n + k, i)] = c[(r, i)];
            }
            rhs[n + k] = d[r];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        if qp.max_violation(&x) > 1e-9 {
            continue;
        }
        for k in 0..q {
            if sol[n + k] < -1e-9 {
                continue 'subset;
            }
        }
        let obj = qp.objective(&x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}
