//! Small numerical helpers: matrix-free preconditioned conjugate gradient
//! and a damped dense normal-equation solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final `|r| / |b|`.
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG for an SPD operator given as `apply(x, out)`.
///
/// `x` holds the initial guess and receives the solution. Stops when
/// `|r| <= tol * |b|` or after `max_iter` iterations.
pub fn pcg<F>(apply: F, diag: &[f64], b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> CgReport
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return CgReport { iterations: 0, relative_residual: 0.0, converged: true };
    }
    let inv: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    for it in 0..max_iter {
        if rel <= tol {
            return CgReport { iterations: it, relative_residual: rel, converged: true };
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return CgReport { iterations: it, relative_residual: rel, converged: false };
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        for i in 0..n {
            z[i] = r[i] * inv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgReport { iterations: max_iter, relative_residual: rel, converged: rel <= tol }
}

/// Solves `(JtJ + lambda * diag(JtJ)) dx = -Jtr` by Cholesky. Diagonal
/// entries are floored so parameters with no data still get damped.
pub fn damped_step(jtj: &DMatrix<f64>, jtr: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = jtj.nrows();
    let floor = jtj.diagonal().amax().max(1e-12) * 1e-9;
    let mut a = jtj.clone();
    for i in 0..n {
        a[(i, i)] += lambda * jtj[(i, i)].max(floor);
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("damped normal equations are not positive definite".into()))?;
    Ok(-chol.solve(jtr))
}
