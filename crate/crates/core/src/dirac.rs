//! Presymplectic two-forms, the generalized energy and its differential,
//! and numerical structure-membership residuals at three levels: the full
//! Pontryagin bundle, the momentum level set, and the reduced space.
//!
//! Membership in the graph of a two-form is tested directly: a pair
//! `(cdot, alpha)` belongs to the graph iff `alpha = Omega(cdot, .)`, so
//! the residual vector is `alpha + [Omega] cdot` with `[Omega]` the
//! antisymmetric component matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::eval::{lag_gradients, mat_partial, EvalScalar};
use crate::frames::Frame;
use crate::linalg::{nullspace, RANK_TOL};
use crate::routh::{
    reduced_partials, routhian_lifts, scatter_configuration, FullQuasiRates, FullQuasiState,
    LagrangianSystem, ReducedRates, ReducedState,
};

/// Every two-form matrix must be antisymmetric to this tolerance.
pub const ANTISYM_TOL: f64 = 1e-12;

/// The component matrix of a two-form at a point, in a declared basis.
#[derive(Clone, Debug)]
pub struct TwoFormAtPoint {
    pub matrix: DMatrix<f64>,
    pub basis_label: String,
}

impl TwoFormAtPoint {
    /// Wrap a matrix, enforcing antisymmetry.
    pub fn new(matrix: DMatrix<f64>, basis_label: impl Into<String>) -> Result<Self> {
        let mut worst = 0.0f64;
        for i in 0..matrix.nrows() {
            for j in 0..matrix.ncols() {
                worst = worst.max((matrix[(i, j)] + matrix[(j, i)]).abs());
            }
        }
        if worst > ANTISYM_TOL {
            return Err(Error::InvarianceViolation {
                what: "two-form antisymmetry".into(),
                value: worst,
                tol: ANTISYM_TOL,
            });
        }
        Ok(TwoFormAtPoint {
            matrix,
            basis_label: basis_label.into(),
        })
    }

    /// Dimension of the underlying space.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Components of an energy differential at a point, in the same basis as
/// the companion two-form.
#[derive(Clone, Debug)]
pub struct EnergyDifferentialAtPoint {
    pub components: DVector<f64>,
}

/// The generalized energy `E(q, v, p) = <p, v> - L(q, v)`.
pub fn generalized_energy(sys: &LagrangianSystem, q: &[f64], v: &[f64], p: &[f64]) -> f64 {
    let pv: f64 = p.iter().zip(v).map(|(&pi, &vi)| pi * vi).sum();
    pv - sys.l.at(q, v)
}

/// Membership residual of a full Pontryagin jet in the graph structure:
/// with energy-differential components `(alpha, beta, gamma)
/// = (-dL/dq, p - dL/dv, v)` in the `(q, v, p)` coordinate basis, returns
/// `(alpha + dp, beta, gamma - dq)`.
pub fn dirac_residual_full(
    sys: &LagrangianSystem,
    q: &[f64],
    v: &[f64],
    p: &[f64],
    dq: &[f64],
    _dv: &[f64],
    dp: &[f64],
) -> DVector<f64> {
    let n = q.len();
    let (lq, lv) = lag_gradients::<f64>(sys.l.as_ref(), q, v);
    let mut rows = Vec::with_capacity(3 * n);
    for i in 0..n {
        rows.push(-lq[i] + dp[i]);
    }
    for i in 0..n {
        rows.push(p[i] - lv[i]);
    }
    for i in 0..n {
        rows.push(v[i] - dq[i]);
    }
    DVector::from_vec(rows)
}

/// Basis offsets for the momentum-level-set two-form and differential:
/// `(dx, E~, dv, dv~, dp)`.
fn mu_level_offsets(m: usize, k: usize) -> (usize, usize, usize, usize, usize) {
    (0, m, m + k, 2 * m + k, 2 * m + 2 * k)
}

/// The presymplectic form on the momentum level set, in the basis
/// `(dx, E~, dv, dv~, dp)`:
/// `dx^i ^ dp_i + (1/2) mu_a (B^a_ij dx^i ^ dx^j - C^a_bc E~^b ^ E~^c)`.
/// Velocity directions carry zero rows and columns.
pub fn omega_mu(sys: &LagrangianSystem, mu: &[f64], q: &[f64]) -> Result<TwoFormAtPoint> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    sym.moving_frame().eval(q)?;
    let b = sym.curvature_unchecked::<f64>(q);
    let d = 3 * m + 2 * k;
    let (ox, oe, _ov, _ovt, op) = mu_level_offsets(m, k);
    let mut w = DMatrix::zeros(d, d);
    for i in 0..m {
        w[(ox + i, op + i)] = 1.0;
        w[(op + i, ox + i)] = -1.0;
    }
    for i in 0..m {
        for j in 0..m {
            let mut s = 0.0;
            for (a, &mu_a) in mu.iter().enumerate() {
                s += mu_a * b.get(a, i, j);
            }
            w[(ox + i, ox + j)] += s;
        }
    }
    for bb in 0..k {
        for c in 0..k {
            let mut s = 0.0;
            for (a, &mu_a) in mu.iter().enumerate() {
                s -= mu_a * sym.struct_consts.get(a, bb, c);
            }
            w[(oe + bb, oe + c)] += s;
        }
    }
    TwoFormAtPoint::new(w, "dx, E~, dv, dv~, dp")
}

/// The canonical two-form of the cotangent bundle written in
/// quasi-coordinates: `W^alpha ^ dpq_alpha
/// + (1/2) R^alpha_bg pq_alpha W^beta ^ W^gamma` in the basis `(W, dpq)`.
pub fn omega_quasi(frame: &Frame, q: &[f64], pq: &[f64]) -> Result<TwoFormAtPoint> {
    let n = frame.n;
    frame.eval(q)?;
    let r = frame.anholonomity_unchecked::<f64>(q);
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    for a in 0..n {
        w[(a, n + a)] = 1.0;
        w[(n + a, a)] = -1.0;
    }
    for beta in 0..n {
        for gamma in 0..n {
            let mut s = 0.0;
            for alpha in 0..n {
                s += r.get(alpha, beta, gamma) * pq[alpha];
            }
            w[(beta, gamma)] += s;
        }
    }
    TwoFormAtPoint::new(w, "W, dpq")
}

/// Change-of-basis matrix from coordinate components `(dq, dp)` to
/// quasi-components `(W, dpq)` of a tangent vector on the cotangent
/// bundle: `u_W = W u_q`, `u_pq = Z^T u_p + G u_q` with
/// `G_bg = p_alpha dZ^alpha_b / dq^gamma`.
///
/// Conjugating the canonical `(dq, dp)` symplectic matrix by this map
/// must reproduce [`omega_quasi`]; the tests and the acceptance suite use
/// it as the oracle for the anholonomity correction term.
pub fn quasi_basis_change(frame: &Frame, q: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
    let n = frame.n;
    let at = frame.eval(q)?;
    let mut t = DMatrix::zeros(2 * n, 2 * n);
    for b in 0..n {
        for c in 0..n {
            t[(b, c)] = at.w.get(b, c);
            t[(n + b, n + c)] = at.z.get(c, b);
        }
    }
    for gamma in 0..n {
        let dz = mat_partial::<f64>(frame.z.as_ref(), q, gamma);
        for b in 0..n {
            let mut s = 0.0;
            for alpha in 0..n {
                s += p[alpha] * dz.get(alpha, b);
            }
            t[(n + b, gamma)] = s;
        }
    }
    Ok(t)
}

/// Differential of the restricted generalized energy
/// `E_mu = p_i v^i - R^mu` on the momentum level set, in the basis
/// `(dx, E~, dv, dv~, dp)`:
/// `-(X^C(R) + E^V(R) B v) dx - (X^V(R) - p) dv
///  + (mu + E^V(R)) C vtilde E~ - E^V(R) dvtilde + v dp`.
pub fn d_energy_mu(
    sys: &LagrangianSystem,
    mu: &[f64],
    s: &FullQuasiState,
) -> Result<EnergyDifferentialAtPoint> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let q = s.q.as_slice();
    sym.moving_frame().eval(q)?;
    let v_nat = sym.natural_velocity::<f64>(q, s.v.as_slice(), s.vtilde.as_slice());
    let derivs = routhian_lifts::<f64>(sys, mu, q, &v_nat);
    let b = sym.curvature_unchecked::<f64>(q);
    let (ox, oe, ov, ovt, op) = mu_level_offsets(m, k);
    let mut c = DVector::zeros(3 * m + 2 * k);
    for i in 0..m {
        let mut bterm = 0.0;
        for a in 0..k {
            for j in 0..m {
                bterm += derivs.ev[a] * b.get(a, i, j) * s.v[j];
            }
        }
        c[ox + i] = -(derivs.xc[i] + bterm);
    }
    for bb in 0..k {
        let mut s_e = 0.0;
        for a in 0..k {
            for cc in 0..k {
                s_e += (mu[a] + derivs.ev[a]) * sym.struct_consts.get(a, bb, cc) * s.vtilde[cc];
            }
        }
        c[oe + bb] = s_e;
    }
    for i in 0..m {
        c[ov + i] = -(derivs.xv[i] - s.p[i]);
    }
    for a in 0..k {
        c[ovt + a] = -derivs.ev[a];
    }
    for i in 0..m {
        c[op + i] = s.v[i];
    }
    Ok(EnergyDifferentialAtPoint { components: c })
}

/// Quasi-basis components of a momentum-level-set tangent built from
/// candidate rates: `(xdot, u~, 0, 0, pdot)` where `u~` is the group
/// quasi-velocity of `dq`. Velocity-direction components do not influence
/// membership (the form annihilates them) and are set to zero.
pub fn mu_level_tangent(
    sys: &LagrangianSystem,
    s: &FullQuasiState,
    rates: &FullQuasiRates,
) -> DVector<f64> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let (ox, oe, _ov, _ovt, op) = mu_level_offsets(m, k);
    let u = sym.group_quasi_velocity::<f64>(s.q.as_slice(), rates.dq.as_slice());
    let mut t = DVector::zeros(3 * m + 2 * k);
    for (i, &xi) in sym.shape_idx.iter().enumerate() {
        t[ox + i] = rates.dq[xi];
    }
    for (a, &ua) in u.iter().enumerate() {
        t[oe + a] = ua;
    }
    for i in 0..m {
        t[op + i] = rates.dp[i];
    }
    t
}

/// Stacked residuals of the restricted structure equations on the
/// momentum level set:
/// `(mu_a C^a_bc (vtilde^c - u^c), E^V(R^mu), v - xdot, X^V(R^mu) - p,
///   pdot - X^C(R^mu) + mu_a B^a_ij v^j)`.
pub fn restricted_dirac_residual(
    sys: &LagrangianSystem,
    mu: &[f64],
    s: &FullQuasiState,
    rates: &FullQuasiRates,
) -> Result<DVector<f64>> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let q = s.q.as_slice();
    sym.moving_frame().eval(q)?;
    let v_nat = sym.natural_velocity::<f64>(q, s.v.as_slice(), s.vtilde.as_slice());
    let derivs = routhian_lifts::<f64>(sys, mu, q, &v_nat);
    let u = sym.group_quasi_velocity::<f64>(q, rates.dq.as_slice());
    let b = sym.curvature_unchecked::<f64>(q);
    let mut rows = Vec::with_capacity(3 * m + 2 * k);
    for bb in 0..k {
        let mut s_row = 0.0;
        for (a, &mu_a) in mu.iter().enumerate() {
            for c in 0..k {
                s_row += mu_a * sym.struct_consts.get(a, bb, c) * (s.vtilde[c] - u[c]);
            }
        }
        rows.push(s_row);
    }
    for a in 0..k {
        rows.push(derivs.ev[a]);
    }
    for (i, &xi) in sym.shape_idx.iter().enumerate() {
        rows.push(s.v[i] - rates.dq[xi]);
    }
    for i in 0..m {
        rows.push(derivs.xv[i] - s.p[i]);
    }
    for i in 0..m {
        let mut gyro = 0.0;
        for (a, &mu_a) in mu.iter().enumerate() {
            for j in 0..m {
                gyro += mu_a * b.get(a, i, j) * s.v[j];
            }
        }
        rows.push(rates.dp[i] - derivs.xc[i] + gyro);
    }
    Ok(DVector::from_vec(rows))
}

/// Basis offsets for the reduced two-form and differential:
/// `(dx, E^, dv, dvhat, dp)` with the `E^` block of size `|I|`.
fn reduced_offsets(m: usize, k: usize, n_i: usize) -> (usize, usize, usize, usize, usize) {
    (0, m, m + n_i, 2 * m + n_i, 2 * m + n_i + k)
}

/// The reduced presymplectic form on the quotient, in the hat basis
/// `(dx, E^K, dv, dvhat, dp)`:
/// `dx ^ dp + (1/2) mu_a (B^a_ij dx^i ^ dx^j
///  - A^I_K A^J_L C^a_IJ E^K ^ E^L)`.
pub fn omega_reduced(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    x: &[f64],
    theta_i: &[f64],
) -> Result<TwoFormAtPoint> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    let qf = scatter_configuration::<f64>(sym, theta_a, x, theta_i);
    sym.moving_frame().eval(&qf)?;
    let b = sym.curvature_unchecked::<f64>(&qf);
    let a_mat = sym.body_frame_at::<f64>(&qf);
    let (ox, oe, _ov, _ovh, op) = reduced_offsets(m, k, n_i);
    let d = 3 * m + n_i + k;
    let mut w = DMatrix::zeros(d, d);
    for i in 0..m {
        w[(ox + i, op + i)] = 1.0;
        w[(op + i, ox + i)] = -1.0;
    }
    for i in 0..m {
        for j in 0..m {
            let mut s = 0.0;
            for (a, &mu_a) in mu.iter().enumerate() {
                s += mu_a * b.get(a, i, j);
            }
            w[(ox + i, ox + j)] += s;
        }
    }
    for (r, &kk) in sym.split.i_idx.iter().enumerate() {
        for (s_col, &ll) in sym.split.i_idx.iter().enumerate() {
            let mut val = 0.0;
            for (a, &mu_a) in mu.iter().enumerate() {
                for &ii in &sym.split.i_idx {
                    for &jj in &sym.split.i_idx {
                        val -= mu_a
                            * a_mat.get(ii, kk)
                            * a_mat.get(jj, ll)
                            * sym.struct_consts.get(a, ii, jj);
                    }
                }
            }
            w[(oe + r, oe + s_col)] += val;
        }
    }
    TwoFormAtPoint::new(w, "dx, E^, dv, dvhat, dp")
}

/// Differential of the reduced energy `p_i v^i - R` in the hat basis
/// `(dx, E^K, dv, dvhat, dp)`: the coordinate differential
/// `(-dR/dx, -dR/dtheta^I, p - dR/dv, -dR/dvhat, v)` with its
/// `(dx, dtheta)` part rewritten on the semi-basic dual frame
/// `E^K = (L_II^-1)^K_J (dtheta^J + Lambda^J_i dx^i)`.
pub fn d_energy_reduced(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    r: &ReducedState,
) -> Result<EnergyDifferentialAtPoint> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    let qf = scatter_configuration::<f64>(sym, theta_a, r.x.as_slice(), r.theta_i.as_slice());
    sym.moving_frame().eval(&qf)?;
    let partials = reduced_partials::<f64>(
        sys,
        mu,
        theta_a,
        r.x.as_slice(),
        r.theta_i.as_slice(),
        r.v.as_slice(),
        r.vhat.as_slice(),
    );
    let lmat = sym.body_group_frame::<f64>(&qf);
    let lam = f64::mat(sym.lambda.as_ref(), &qf);
    let (ox, oe, ov, ovh, op) = reduced_offsets(m, k, n_i);
    let mut c = DVector::zeros(3 * m + n_i + k);
    // Coordinate components on (dx, dtheta^I), then the basis conversion:
    // E-component_K = sum_J w_thetaJ L^J_K, x-component_i -= w_thetaJ L^J_i.
    for i in 0..m {
        let mut s = -partials.d_x[i];
        for (rr, &jj) in sym.split.i_idx.iter().enumerate() {
            s -= -partials.d_theta_i[rr] * lam.get(jj, i);
        }
        c[ox + i] = s;
    }
    for (r_e, &kk) in sym.split.i_idx.iter().enumerate() {
        let mut s = 0.0;
        for (rr, &jj) in sym.split.i_idx.iter().enumerate() {
            s += -partials.d_theta_i[rr] * lmat.get(jj, kk);
        }
        c[oe + r_e] = s;
    }
    for i in 0..m {
        c[ov + i] = r.p[i] - partials.d_v[i];
    }
    for a in 0..k {
        c[ovh + a] = -partials.d_vhat[a];
    }
    for i in 0..m {
        c[op + i] = r.v[i];
    }
    Ok(EnergyDifferentialAtPoint { components: c })
}

/// Hat-basis components of a reduced tangent from candidate rates:
/// `(xdot, uhat^K, 0, 0, pdot)` with
/// `uhat^K = (L_II^-1)^K_J (dtheta^J + Lambda^J_i xdot^i)`.
pub fn reduced_tangent(
    sys: &LagrangianSystem,
    theta_a: &[f64],
    r: &ReducedState,
    rates: &ReducedRates,
) -> Result<DVector<f64>> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    let qf = scatter_configuration::<f64>(sym, theta_a, r.x.as_slice(), r.theta_i.as_slice());
    let lmat = sym.body_group_frame::<f64>(&qf);
    let lam = f64::mat(sym.lambda.as_ref(), &qf);
    let (ox, oe, _ov, _ovh, op) = reduced_offsets(m, k, n_i);
    // Solve the I-block of L for the hat rate.
    let mut lii = crate::smat::SMat::<f64>::zeros(n_i, n_i);
    for (rr, &jj) in sym.split.i_idx.iter().enumerate() {
        for (cc, &kk) in sym.split.i_idx.iter().enumerate() {
            lii.set(rr, cc, lmat.get(jj, kk));
        }
    }
    let rhs: Vec<f64> = sym
        .split
        .i_idx
        .iter()
        .enumerate()
        .map(|(rr, &jj)| {
            let mut s = rates.dtheta_i[rr];
            for i in 0..m {
                s += lam.get(jj, i) * rates.dx[i];
            }
            s
        })
        .collect();
    let uhat = lii.solve(&rhs).map_err(|_| Error::SingularFrame {
        detail: "semi-basic dual frame is singular on the invariant block".into(),
    })?;
    let mut t = DVector::zeros(3 * m + n_i + k);
    for i in 0..m {
        t[ox + i] = rates.dx[i];
    }
    for (r_e, &u) in uhat.iter().enumerate() {
        t[oe + r_e] = u;
    }
    for i in 0..m {
        t[op + i] = rates.dp[i];
    }
    Ok(t)
}

/// Membership residual of a reduced jet in the graph of the reduced
/// presymplectic form: `dE + [Omega] cdot` in the hat basis. Zero exactly
/// on solutions of the reduced equations, up to the isotropy kernel in
/// the group directions.
pub fn reduced_dirac_residual(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    r: &ReducedState,
    rates: &ReducedRates,
) -> Result<DVector<f64>> {
    sys.sym.validate_splitting(mu)?;
    let form = omega_reduced(sys, mu, theta_a, r.x.as_slice(), r.theta_i.as_slice())?;
    let de = d_energy_reduced(sys, mu, theta_a, r)?;
    let t = reduced_tangent(sys, theta_a, r, rates)?;
    Ok(de.components + form.matrix * t)
}

/// Orthonormal basis of the numerical null space of a two-form
/// (singular values below `1e-10 * max` are treated as zero).
pub fn kernel_basis(form: &TwoFormAtPoint) -> Vec<DVector<f64>> {
    let ns = nullspace(&form.matrix, RANK_TOL);
    (0..ns.ncols()).map(|j| ns.column(j).into_owned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{LagrangianDef, MatrixDef};
    use crate::frames::Dims;
    use crate::linalg::principal_angles;
    use crate::routh::{implicit_el_residual, lr_rows};
    use crate::smat::{SMat, Ten3};
    use crate::symmetry::{MuSplit, SymmetrySetup};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    struct ConstMat {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }
    impl MatrixDef for ConstMat {
        fn shape(&self) -> (usize, usize) {
            (self.rows, self.cols)
        }
        fn eval<S: EvalScalar>(&self, _q: &[S]) -> SMat<S> {
            SMat::from_fn(self.rows, self.cols, |i, j| {
                S::from_f64(self.data[i * self.cols + j])
            })
        }
    }
    fn const_mat(rows: usize, cols: usize, data: &[f64]) -> Arc<dyn crate::eval::MatrixFn> {
        Arc::new(ConstMat {
            rows,
            cols,
            data: data.to_vec(),
        })
    }

    struct CyclicLinearLag;
    impl LagrangianDef for CyclicLinearLag {
        fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
            v[0] * v[0] + v[0] * v[1] - q[0] * q[0] * S::from_f64(0.5)
        }
    }

    fn cyclic_linear() -> LagrangianSystem {
        let dims = Dims::new(2, 1, 1).unwrap();
        let sym = SymmetrySetup::new(
            dims,
            vec![1],
            const_mat(1, 1, &[0.0]),
            const_mat(1, 1, &[1.0]),
            Ten3::zeros(1, 1, 1),
            None,
            MuSplit::all_isotropy(1),
        )
        .unwrap();
        LagrangianSystem::new(
            "cyclic-linear",
            vec!["x".into(), "y".into()],
            Arc::new(CyclicLinearLag),
            sym,
            vec![],
            vec![0.0, 0.0],
            0.5,
        )
        .unwrap()
    }

    fn cyclic_exact(t: f64) -> (FullQuasiState, FullQuasiRates) {
        let s = FullQuasiState {
            q: DVector::from_vec(vec![t, -t * t * t / 6.0]),
            v: DVector::from_vec(vec![1.0]),
            vtilde: DVector::from_vec(vec![-t * t / 2.0]),
            p: DVector::from_vec(vec![2.0 - t * t / 2.0]),
            ptilde: DVector::from_vec(vec![1.0]),
        };
        let rates = FullQuasiRates {
            dq: DVector::from_vec(vec![1.0, -t * t / 2.0]),
            dp: DVector::from_vec(vec![-t]),
        };
        (s, rates)
    }

    #[test]
    fn energy_arithmetic() {
        let sys = cyclic_linear();
        // v = (1, 0), p = (2, 1), x = 0: p.v - L = 2 - 1 = 1.
        let e = generalized_energy(&sys, &[0.0, 0.0], &[1.0, 0.0], &[2.0, 1.0]);
        assert!((e - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_residual_is_reordered_implicit_el() {
        let sys = cyclic_linear();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 2;
        for _ in 0..100 {
            let rv = |rng: &mut rand_chacha::ChaCha8Rng| {
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>()
            };
            let (q, v, p, dq, dv, dp) = (
                rv(&mut rng),
                rv(&mut rng),
                rv(&mut rng),
                rv(&mut rng),
                rv(&mut rng),
                rv(&mut rng),
            );
            let d = dirac_residual_full(&sys, &q, &v, &p, &dq, &dv, &dp);
            let pt = crate::frames::PontryaginPoint::new(q, v, p);
            let e = implicit_el_residual(&sys, &pt, &dq, &dp);
            // Blocks: dirac (dp - dL/dq, p - dL/dv, v - dq) versus
            // implicit EL (dq - v, p - dL/dv, dp - dL/dq).
            for i in 0..n {
                assert!((d[i] - e[2 * n + i]).abs() < 1e-14);
                assert!((d[n + i] - e[n + i]).abs() < 1e-14);
                assert!((d[2 * n + i] + e[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn full_residual_zero_on_closed_form_jet() {
        let sys = cyclic_linear();
        let t = 1.0;
        let q = [t, -t * t * t / 6.0];
        let v = [1.0, -t * t / 2.0];
        let p = [2.0 - t * t / 2.0, 1.0];
        let dq = v;
        let dv = [0.0, -t];
        let dp = [-t, 0.0];
        let r = dirac_residual_full(&sys, &q, &v, &p, &dq, &dv, &dp);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn omega_mu_is_canonical_at_zero_momentum() {
        let sys = cyclic_linear();
        let form = omega_mu(&sys, &[0.0], &[0.4, 0.3]).unwrap();
        // d = 5: (dx, E~, dv, dv~, dp); only the dx/dp pairing survives.
        assert_eq!(form.dim(), 5);
        let mut expected = DMatrix::zeros(5, 5);
        expected[(0, 4)] = 1.0;
        expected[(4, 0)] = -1.0;
        assert!((form.matrix.clone() - expected).amax() < 1e-15);
    }

    #[test]
    fn omega_mu_kernel_for_abelian_system() {
        let sys = cyclic_linear();
        let form = omega_mu(&sys, &[1.0], &[0.4, 0.3]).unwrap();
        let kb = kernel_basis(&form);
        // Kernel: the group direction and both velocity directions.
        assert_eq!(kb.len(), 3);
        let mut span = DMatrix::zeros(5, 3);
        span[(1, 0)] = 1.0;
        span[(2, 1)] = 1.0;
        span[(3, 2)] = 1.0;
        let kb_mat = DMatrix::from_columns(&kb.iter().map(|c| c.clone()).collect::<Vec<_>>());
        let angles = principal_angles(&kb_mat, &span);
        assert!(angles.iter().all(|&a| a < 1e-10), "{angles:?}");
    }

    #[test]
    fn omega_quasi_matches_conjugated_canonical_form() {
        // Frame Z_0 = d/dx, Z_1 = x d/dy on x > 0 (nontrivial bracket).
        struct ScaledZ;
        impl MatrixDef for ScaledZ {
            fn shape(&self) -> (usize, usize) {
                (2, 2)
            }
            fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
                SMat::from_fn(2, 2, |i, j| match (i, j) {
                    (0, 0) => S::one(),
                    (1, 1) => q[0],
                    _ => S::zero(),
                })
            }
        }
        struct ScaledW;
        impl MatrixDef for ScaledW {
            fn shape(&self) -> (usize, usize) {
                (2, 2)
            }
            fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
                SMat::from_fn(2, 2, |i, j| match (i, j) {
                    (0, 0) => S::one(),
                    (1, 1) => S::one() / q[0],
                    _ => S::zero(),
                })
            }
        }
        let frame = Frame::new(2, Arc::new(ScaledZ), Arc::new(ScaledW));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..25 {
            let q = [rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0)];
            let p = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            // Quasi-momenta of p: pq = Z^T p.
            let at = frame.eval(&q).unwrap();
            let pq = [
                at.z.get(0, 0) * p[0] + at.z.get(1, 0) * p[1],
                at.z.get(0, 1) * p[0] + at.z.get(1, 1) * p[1],
            ];
            let form = omega_quasi(&frame, &q, &pq).unwrap();
            let t = quasi_basis_change(&frame, &q, &p).unwrap();
            let canonical = {
                let mut c = DMatrix::zeros(4, 4);
                for i in 0..2 {
                    c[(i, 2 + i)] = 1.0;
                    c[(2 + i, i)] = -1.0;
                }
                c
            };
            let conj = t.transpose() * form.matrix.clone() * t.clone();
            assert!(
                (conj - canonical).amax() < 1e-10,
                "conjugation defect at q = {q:?}"
            );
        }
    }

    #[test]
    fn d_energy_components_on_closed_form() {
        let sys = cyclic_linear();
        let (s, rates) = cyclic_exact(0.8);
        let de = d_energy_mu(&sys, &[1.0], &s).unwrap();
        // dp component is v exactly; E~ components vanish (Abelian);
        // dv~ component is -E^V(R) = -(v_x - mu) = 0 on the solution.
        assert_eq!(de.components.len(), 5);
        assert!((de.components[4] - 1.0).abs() < 1e-15);
        assert!(de.components[1].abs() < 1e-15);
        assert!(de.components[3].abs() < 1e-13);
        // Membership: dE + Omega cdot = 0 along the solution.
        let form = omega_mu(&sys, &[1.0], s.q.as_slice()).unwrap();
        let t = mu_level_tangent(&sys, &s, &rates);
        let resid = de.components + form.matrix * t;
        assert!(resid.amax() < 1e-12, "{resid}");
    }

    #[test]
    fn restricted_residual_zero_along_solutions() {
        let sys = cyclic_linear();
        for &t in &[0.0, 0.6, 1.4] {
            let (s, rates) = cyclic_exact(t);
            let r = restricted_dirac_residual(&sys, &[1.0], &s, &rates).unwrap();
            assert_eq!(r.len(), 5);
            assert!(r.amax() < 1e-13, "t = {t}: {r}");
        }
    }

    #[test]
    fn restricted_residual_ignores_kernel_rate_shift() {
        // Shifting the group rate away from vtilde leaves the first block
        // zero for an Abelian system (the C-contraction annihilates it),
        // and the remaining blocks are insensitive to dq's group slot.
        let sys = cyclic_linear();
        let (s, mut rates) = cyclic_exact(0.6);
        rates.dq[1] += 0.37;
        let r = restricted_dirac_residual(&sys, &[1.0], &s, &rates).unwrap();
        assert!(r.amax() < 1e-13, "{r}");
        // The stricter implicit system does see the shift.
        let lr = lr_rows::<f64>(
            &sys,
            &[1.0],
            s.q.as_slice(),
            s.v.as_slice(),
            s.vtilde.as_slice(),
            s.p.as_slice(),
            s.ptilde.as_slice(),
            rates.dq.as_slice(),
            rates.dp.as_slice(),
        );
        let worst = lr.iter().fold(0.0f64, |mx, &r| mx.max(r.abs()));
        assert!(worst > 0.3, "{lr:?}");
    }

    #[test]
    fn reduced_membership_zero_on_closed_form() {
        let sys = cyclic_linear();
        for &t in &[0.0, 0.5, 1.2] {
            let r = ReducedState {
                x: DVector::from_vec(vec![t]),
                theta_i: DVector::zeros(0),
                v: DVector::from_vec(vec![1.0]),
                vhat: DVector::from_vec(vec![-t * t / 2.0]),
                p: DVector::from_vec(vec![2.0 - t * t / 2.0]),
            };
            let rates = ReducedRates {
                dx: DVector::from_vec(vec![1.0]),
                dtheta_i: DVector::zeros(0),
                dp: DVector::from_vec(vec![-t]),
            };
            let resid = reduced_dirac_residual(&sys, &[1.0], &[0.0], &r, &rates).unwrap();
            assert_eq!(resid.len(), 4);
            assert!(resid.amax() < 1e-10, "t = {t}: {resid}");
        }
    }

    #[test]
    fn reduced_membership_detects_force_violation() {
        let sys = cyclic_linear();
        let r = ReducedState {
            x: DVector::from_vec(vec![0.5]),
            theta_i: DVector::zeros(0),
            v: DVector::from_vec(vec![1.0]),
            vhat: DVector::from_vec(vec![-0.125]),
            p: DVector::from_vec(vec![2.0 - 0.125]),
        };
        let rates = ReducedRates {
            dx: DVector::from_vec(vec![1.0]),
            dtheta_i: DVector::zeros(0),
            dp: DVector::from_vec(vec![0.7]), // should be -x = -0.5
        };
        let resid = reduced_dirac_residual(&sys, &[1.0], &[0.0], &r, &rates).unwrap();
        assert!((resid.amax() - 1.2).abs() < 1e-12, "{resid}");
    }

    #[test]
    fn kernel_of_pure_symplectic_block_is_empty() {
        let mut mtx = DMatrix::zeros(2, 2);
        mtx[(0, 1)] = 1.0;
        mtx[(1, 0)] = -1.0;
        let form = TwoFormAtPoint::new(mtx, "dx, dp").unwrap();
        assert!(kernel_basis(&form).is_empty());
    }

    #[test]
    fn two_form_rejects_nonantisymmetric_matrix() {
        let mut mtx = DMatrix::zeros(2, 2);
        mtx[(0, 1)] = 1.0;
        mtx[(1, 0)] = -0.99;
        assert!(TwoFormAtPoint::new(mtx, "bad").is_err());
    }
}
