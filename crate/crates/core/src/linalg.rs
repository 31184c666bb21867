//! `f64` numerical linear algebra used by the solvers.
//!
//! Rank decisions go through column-pivoted QR or SVD with relative
//! thresholds; Newton steps on rank-deficient Jacobians are the minimum-norm
//! least-squares solution, so the iteration remains well defined on
//! overdetermined and singular systems alike.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Relative singular-value / pivot threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Minimum-norm least-squares solution of `A x = b` via column-pivoted QR
/// followed by a QR of the leading triangle's transpose (a complete
/// orthogonal decomposition). Returns the solution and the numerical rank.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> (DVector<f64>, usize) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (DVector::zeros(n), 0);
    }
    let qr = a.clone().col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let kmax = m.min(n);
    let r00 = r[(0, 0)].abs();
    if r00 == 0.0 {
        return (DVector::zeros(n), 0);
    }
    let mut rank = 0;
    for i in 0..kmax {
        if r[(i, i)].abs() > rel_tol * r00 {
            rank = i + 1;
        } else {
            break;
        }
    }
    let c = {
        let qtb = q.transpose() * b;
        qtb.rows(0, rank).into_owned()
    };
    // R1 (rank x n) has full row rank; min-norm y with R1 y = c comes from
    // the thin QR of R1^T: R1^T = Q2 R2, y = Q2 (R2^T)^{-1} c.
    let r1t = r.rows(0, rank).transpose();
    let qr2 = r1t.qr();
    let q2 = qr2.q();
    let r2t = qr2.r().transpose();
    let z = r2t
        .solve_lower_triangular(&c)
        .expect("leading triangle is nonsingular by the rank cut");
    let y = q2 * z;
    let mut x = y;
    qr.p().inv_permute_rows(&mut x);
    (x, rank)
}

/// Orthonormal basis of the (right) null space of `a`, via SVD.
/// Columns of the result span `{x : a x = 0}`.
pub fn nullspace(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    // Pad to at least square so the thin SVD's V covers all of R^n.
    let padded = if m < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, m).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let tol = if smax > 0.0 { rel_tol * smax } else { rel_tol };
    let mut cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    // Rows of V^T beyond the singular-value count also belong to the kernel.
    cols.extend(svd.singular_values.len()..v_t.nrows());
    let mut out = DMatrix::zeros(n, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        out.column_mut(j).copy_from(&v_t.row(i).transpose());
    }
    out
}

/// Principal angles (radians, ascending) between the column spans of `u`
/// and `v`. Both are orthonormalized first, so the inputs need not be.
pub fn principal_angles(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Vec<f64> {
    let qu = orthonormalize(u);
    let qv = orthonormalize(v);
    if qu.ncols() == 0 || qv.ncols() == 0 {
        return Vec::new();
    }
    let m = qu.transpose() * qv;
    let svd = m.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles
}

/// Orthonormal basis for the column span (drops dependent columns).
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return a.clone();
    }
    let qr = a.clone().col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let r00 = r[(0, 0)].abs();
    if r00 == 0.0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let mut rank = 0;
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)].abs() > RANK_TOL * r00 {
            rank = i + 1;
        } else {
            break;
        }
    }
    q.columns(0, rank).into_owned()
}

/// Convergence report from [`damped_newton`].
#[derive(Clone, Copy, Debug, Default)]
pub struct NewtonReport {
    pub iters: usize,
    pub final_residual: f64,
    /// Largest column-rank defect seen in any Jacobian along the iteration.
    pub max_rank_defect: usize,
}

/// Damped (line-searched) Newton iteration with minimum-norm steps.
///
/// Convergence is `|residual|_inf < tol`; the backtracking line search
/// halves the step until the 2-norm decreases, down to `damping_min`.
/// With `polish`, one extra full step is taken after convergence and kept
/// only if it further reduces the residual.
pub fn damped_newton(
    mut resid: impl FnMut(&DVector<f64>) -> DVector<f64>,
    mut jac: impl FnMut(&DVector<f64>) -> DMatrix<f64>,
    x0: &DVector<f64>,
    tol: f64,
    max_iters: usize,
    damping_min: f64,
    polish: bool,
) -> Result<(DVector<f64>, NewtonReport)> {
    let mut x = x0.clone();
    let mut report = NewtonReport::default();
    let mut f = resid(&x);
    for it in 0..max_iters {
        report.iters = it;
        report.final_residual = f.amax();
        if report.final_residual < tol {
            if polish {
                let j = jac(&x);
                let (delta, _) = min_norm_lstsq(&j, &(-&f), RANK_TOL);
                let xt = &x + &delta;
                let ft = resid(&xt);
                if ft.amax() < report.final_residual {
                    x = xt;
                    report.final_residual = ft.amax();
                }
            }
            return Ok((x, report));
        }
        let j = jac(&x);
        let (delta, rank) = min_norm_lstsq(&j, &(-&f), RANK_TOL);
        let defect = j.ncols() - rank;
        report.max_rank_defect = report.max_rank_defect.max(defect);
        let f2 = f.norm();
        let mut lambda = 1.0;
        loop {
            let xt = &x + &delta * lambda;
            let ft = resid(&xt);
            if ft.norm() < f2 {
                x = xt;
                f = ft;
                break;
            }
            lambda *= 0.5;
            if lambda < damping_min {
                return Err(if defect > 0 {
                    Error::SingularJacobian {
                        defect,
                        residual: f.amax(),
                    }
                } else {
                    Error::NewtonDiverged {
                        iters: it,
                        residual: f.amax(),
                    }
                });
            }
        }
    }
    let final_residual = f.amax();
    if final_residual < tol {
        report.iters = max_iters;
        report.final_residual = final_residual;
        return Ok((x, report));
    }
    Err(Error::NewtonDiverged {
        iters: max_iters,
        residual: final_residual,
    })
}
