//! Discrete-time algebraic Riccati equation
//! `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "Riccati data: A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    Ok(())
}

fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::Riccati(format!("{what} is singular")))
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// Stabilising solution by the structure-preserving doubling algorithm.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(a, b, q, r)?;
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * inverse(r, "R")? * b.transpose();
    let mut hk = q.clone();
    for _ in 0..64 {
        let w = inverse(&(&eye + &gk * &hk), "I + G H")?;
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let mut h_next = &hk + ak.transpose() * &hk * &w * &ak;
        symmetrize(&mut h_next);
        let change = (&h_next - &hk).amax();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.iter().all(|v| v.is_finite()) {
            break;
        }
        if change <= 1e-14 * (1.0 + hk.amax()) {
            return Ok(hk);
        }
    }
    Err(Error::Riccati("doubling iteration did not converge (pair not stabilisable/detectable?)".into()))
}

/// Solution by fixed-point (value) iteration from `P = Q`; slow but simple.
pub fn solve_dare_iterative(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<DMatrix<f64>> {
    check_dims(a, b, q, r)?;
    let mut p = q.clone();
    for _ in 0..max_iter {
        let mut next = riccati_map(a, b, q, r, &p)?;
        symmetrize(&mut next);
        let change = (&next - &p).amax();
        p = next;
        if change <= tol * (1.0 + p.amax()) {
            return Ok(p);
        }
    }
    Err(Error::Riccati(format!("value iteration did not converge in {max_iter} steps")))
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let s = inverse(&(r + &bt_p * b), "R + B'PB")?;
    let at_p = a.transpose() * p;
    Ok(&at_p * a - &at_p * b * s * &bt_p * a + q)
}

/// `A'PA - A'PB (R + B'PB)^-1 B'PA + Q - P`
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(riccati_map(a, b, q, r, p)? - p)
}

/// Optimal feedback `K` with `u = -K x`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    Ok(inverse(&(r + &bt_p * b), "R + B'PB")? * bt_p * a)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_integrator_matches_closed_form() {
        // x+ = x + h u:  h^2 P^2 - Q h^2 P - Q R = 0
        let (h, q, r) = (0.05, 1.0, 1.0);
        let p = solve_dare(&scalar(1.0), &scalar(h), &scalar(q), &scalar(r)).unwrap();
        let exact = (q * h * h + (q * q * h.powi(4) + 4.0 * h * h * q * r).sqrt()) / (2.0 * h * h);
        assert_relative_eq!(p[(0, 0)], exact, max_relative = 1e-12);
    }

    #[test]
    fn homogeneous_in_weights() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.5]));
        let r = scalar(0.2);
        let p = solve_dare(&a, &b, &q, &r).unwrap();
        let p3 = solve_dare(&a, &b, &(&q * 3.0), &(&r * 3.0)).unwrap();
        assert!((p3 - &p * 3.0).amax() < 1e-9 * p.amax());
        let res = dare_residual(&a, &b, &q, &r, &p).unwrap();
        assert!(res.amax() < 1e-10 * p.amax());
        let k = lqr_gain(&a, &b, &r, &p).unwrap();
        assert!(spectral_radius(&(&a - &b * k)) < 1.0);
    }

    #[test]
    fn doubling_agrees_with_value_iteration() {
        let a = DMatrix::from_row_slice(3, 3, &[1.01, 0.2, 0.0, 0.0, 0.95, 0.1, 0.05, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.2, 0.0, 0.0, 0.3]);
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(2, 2) * 0.5;
        let p1 = solve_dare(&a, &b, &q, &r).unwrap();
        let p2 = solve_dare_iterative(&a, &b, &q, &r, 100_000, 1e-15).unwrap();
        assert!((&p1 - &p2).amax() < 1e-8 * p1.amax());
    }

    #[test]
    fn unstabilisable_pair_fails() {
        // unstable mode with no input authority
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let r = solve_dare(&a, &b, &DMatrix::identity(2, 2), &scalar(1.0));
        assert!(matches!(r, Err(Error::Riccati(_))));
    }
}
