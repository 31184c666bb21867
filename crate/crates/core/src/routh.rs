//! The generalized Routhian and the residual forms of the equations of
//! motion at every level: implicit Euler-Lagrange on the Pontryagin bundle,
//! implicit Lagrange-Routh on the momentum level set, the reduced equations
//! on the quotient, and the classical (regular-case) Routh equations.
//!
//! All residuals are "operator" forms: they take a state and candidate
//! rates and return the stacked equation defects, so the same code serves
//! the integrator (at dual scalars, for exact Jacobians) and the
//! diagnostics (at `f64`).

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::eval::{lag_gradients, EvalScalar, JetFn, LagrangianDef, LagrangianFn, Lift};
use crate::frames::PontryaginPoint;
use crate::linalg::RANK_TOL;
use crate::scalar::D1;
use crate::smat::SMat;
use crate::symmetry::SymmetrySetup;

/// `L` must be invariant under the group fields to this tolerance.
pub const INVARIANCE_TOL: f64 = 1e-8;
/// Inner Newton tolerance for the regular-case group-velocity solve.
pub const GVEL_NEWTON_TOL: f64 = 1e-12;

/// A Lagrangian system with declared symmetry and optional extra
/// (secondary) constraints on the Pontryagin bundle.
#[derive(Clone)]
pub struct LagrangianSystem {
    pub label: String,
    /// Coordinate names, one per configuration dimension.
    pub coords: Vec<String>,
    pub l: Arc<dyn LagrangianFn>,
    pub sym: SymmetrySetup,
    pub extra_constraints: Vec<ExtraConstraint>,
    /// A configuration around which sampling-based validation is safe
    /// (away from frame singularities and potential blow-ups).
    pub probe_q: Vec<f64>,
    /// Scale of configuration perturbations around `probe_q`.
    pub probe_scale: f64,
    /// Optional configuration-domain guard (singular potentials).
    pub guard: Option<Arc<dyn StateGuard>>,
}

impl std::fmt::Debug for LagrangianSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LagrangianSystem")
            .field("label", &self.label)
            .field("coords", &self.coords)
            .field("dims", &self.sym.dims)
            .field(
                "extra_constraints",
                &self
                    .extra_constraints
                    .iter()
                    .map(|c| c.label.as_str())
                    .collect::<Vec<_>>(),
            )
            .finish_non_exhaustive()
    }
}

/// A scalar phase-space constraint `e(q, v, p) = 0` with a display label.
#[derive(Clone)]
pub struct ExtraConstraint {
    pub label: String,
    pub f: Arc<dyn JetFn>,
}

/// A configuration-domain check run before Lagrangian evaluation during
/// integration (for potentials with singular loci, e.g. pairwise
/// logarithms); returns a typed error when the configuration is
/// unevaluable.
pub trait StateGuard: Send + Sync {
    fn check(&self, q: &[f64]) -> Result<()>;
}

impl LagrangianSystem {
    /// Build a system, validating group invariance of `L` at seeded samples.
    pub fn new(
        label: impl Into<String>,
        coords: Vec<String>,
        l: Arc<dyn LagrangianFn>,
        sym: SymmetrySetup,
        extra_constraints: Vec<ExtraConstraint>,
        probe_q: Vec<f64>,
        probe_scale: f64,
    ) -> Result<Self> {
        let sys = LagrangianSystem {
            label: label.into(),
            coords,
            l,
            sym,
            extra_constraints,
            probe_q,
            probe_scale,
            guard: None,
        };
        if sys.coords.len() != sys.sym.dims.n {
            return Err(Error::Invalid(format!(
                "{} coordinate names for n = {}",
                sys.coords.len(),
                sys.sym.dims.n
            )));
        }
        if sys.probe_q.len() != sys.sym.dims.n {
            return Err(Error::Invalid(
                "probe configuration has wrong length".into(),
            ));
        }
        let frame = sys.sym.moving_frame();
        for (q, v) in sys.sample_states(16, 0x5EED) {
            let (zc, _) = frame.lift_derivatives::<f64>(sys.l.as_ref(), &q, &v);
            for a in 0..sys.sym.dims.k {
                let val = zc[sys.sym.dims.m + a];
                if val.abs() > INVARIANCE_TOL {
                    return Err(Error::InvarianceViolation {
                        what: format!("group invariance of L (field {a}) at q = {q:?}"),
                        value: val,
                        tol: INVARIANCE_TOL,
                    });
                }
            }
        }
        Ok(sys)
    }

    /// Attach a configuration-domain guard.
    pub fn with_guard(mut self, guard: Arc<dyn StateGuard>) -> Self {
        self.guard = Some(guard);
        self
    }

    /// Frozen fiber-coordinate representative used whenever reduced
    /// quantities need a full configuration (group invariance makes the
    /// choice immaterial).
    pub fn theta_a_ref(&self) -> Vec<f64> {
        self.sym
            .split
            .a_idx
            .iter()
            .map(|&a| self.probe_q[self.sym.group_idx[a]])
            .collect()
    }

    /// Seeded sample states around the probe configuration.
    pub fn sample_states(&self, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = self.sym.dims.n;
        (0..count)
            .map(|_| {
                let q: Vec<f64> = self
                    .probe_q
                    .iter()
                    .map(|&q0| q0 + self.probe_scale * rng.gen_range(-1.0..1.0))
                    .collect();
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (q, v)
            })
            .collect()
    }
}

/// State on the momentum level set in quasi-coordinates:
/// `(q, v^i, vtilde^a, p_i, ptilde_a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullQuasiState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub vtilde: DVector<f64>,
    pub p: DVector<f64>,
    pub ptilde: DVector<f64>,
}

/// Candidate rates for [`FullQuasiState`]: configuration and shape
/// quasi-momentum (the group quasi-momentum is pinned, not evolved).
#[derive(Clone, Debug, PartialEq)]
pub struct FullQuasiRates {
    pub dq: DVector<f64>,
    pub dp: DVector<f64>,
}

/// State on the reduced space: `(x, theta^I, v^i, vhat^a, p_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedState {
    pub x: DVector<f64>,
    pub theta_i: DVector<f64>,
    pub v: DVector<f64>,
    pub vhat: DVector<f64>,
    pub p: DVector<f64>,
}

/// Candidate rates for [`ReducedState`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedRates {
    pub dx: DVector<f64>,
    pub dtheta_i: DVector<f64>,
    pub dp: DVector<f64>,
}

/// The four derivative families of the Routhian along the moving frame.
#[derive(Clone, Debug)]
pub struct RouthianDerivs<S> {
    /// Complete lifts along the shape fields.
    pub xc: Vec<S>,
    /// Vertical lifts along the shape fields.
    pub xv: Vec<S>,
    /// Complete lifts along the group fields.
    pub ec: Vec<S>,
    /// Vertical lifts along the group fields.
    pub ev: Vec<S>,
}

/// The generalized Routhian `R^mu = L - mu_a vtilde^a` as a tangent-bundle
/// function (with `vtilde` the group quasi-velocity components of `v`).
pub struct RouthianFn {
    pub l: Arc<dyn LagrangianFn>,
    pub sym: SymmetrySetup,
    pub mu: Vec<f64>,
}

impl LagrangianDef for RouthianFn {
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
        let vtilde = self.sym.group_quasi_velocity::<S>(q, v);
        let mut r = S::lag(self.l.as_ref(), q, v);
        for (a, &mu_a) in self.mu.iter().enumerate() {
            r = r - S::from_f64(mu_a) * vtilde[a];
        }
        r
    }
}

/// Scatter reduced coordinates `(x, theta^I)` plus frozen fiber values
/// `theta^A` into a full configuration at scalar `S`.
pub fn scatter_configuration<S: EvalScalar>(
    sym: &SymmetrySetup,
    theta_a: &[f64],
    x: &[S],
    theta_i: &[S],
) -> Vec<S> {
    let mut q = vec![S::zero(); sym.dims.n];
    for (i, &xi) in sym.shape_idx.iter().enumerate() {
        q[xi] = x[i];
    }
    for (r, &a) in sym.split.a_idx.iter().enumerate() {
        q[sym.group_idx[a]] = S::from_f64(theta_a[r]);
    }
    for (r, &i) in sym.split.i_idx.iter().enumerate() {
        q[sym.group_idx[i]] = theta_i[r];
    }
    q
}

/// Natural velocity from reduced velocities at the configuration `q`:
/// shape slots carry `v`, group slots carry `(K A) vhat - Lambda v`.
pub fn assemble_velocity<S: EvalScalar>(
    sym: &SymmetrySetup,
    q: &[S],
    v: &[S],
    vhat: &[S],
) -> Vec<S> {
    let lmat = sym.body_group_frame::<S>(q);
    let lam = S::mat(sym.lambda.as_ref(), q);
    let mut vn = vec![S::zero(); sym.dims.n];
    for (i, &xi) in sym.shape_idx.iter().enumerate() {
        vn[xi] = v[i];
    }
    for (b, &tb) in sym.group_idx.iter().enumerate() {
        let mut s = S::zero();
        for a in 0..sym.dims.k {
            s = s + lmat.get(b, a) * vhat[a];
        }
        for i in 0..sym.shape_idx.len() {
            s = s - lam.get(b, i) * v[i];
        }
        vn[tb] = s;
    }
    vn
}

/// The Routhian over reduced coordinates `(x, theta^I; v, vhat)`, composed
/// through the hat frame at a representative configuration with the fiber
/// coordinates `theta^A` frozen.
///
/// The natural velocity is rebuilt as `v_theta = (K A) vhat - Lambda v`,
/// so differentiating this function with dual scalars yields exactly the
/// reduced-coordinate partials of the Routhian (chain rule through the
/// frame, never through a quotient section).
pub struct ReducedRouthianFn {
    pub base: RouthianFn,
    /// Frozen values of the fiber coordinates `theta^A`.
    pub theta_a: Vec<f64>,
}

impl LagrangianDef for ReducedRouthianFn {
    /// `q`-argument is `[x, theta^I]`, `v`-argument is `[v, vhat]`.
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
        let sym = &self.base.sym;
        let m = sym.dims.m;
        let qf = scatter_configuration::<S>(sym, &self.theta_a, &q[..m], &q[m..]);
        let vf = assemble_velocity::<S>(sym, &qf, &v[..m], &v[m..]);
        self.base.eval(&qf, &vf)
    }
}

/// Reduced-coordinate partials of the Routhian at a reduced state.
#[derive(Clone, Debug)]
pub struct ReducedPartials<S> {
    pub d_x: Vec<S>,
    pub d_theta_i: Vec<S>,
    pub d_v: Vec<S>,
    pub d_vhat: Vec<S>,
}

/// The generalized Routhian `R^mu(q, v) = L(q, v) - mu_a vtilde^a`.
pub fn routhian(sys: &LagrangianSystem, mu: &[f64], q: &[f64], v: &[f64]) -> Result<f64> {
    sys.sym.moving_frame().eval(q)?;
    let f = RouthianFn {
        l: sys.l.clone(),
        sym: sys.sym.clone(),
        mu: mu.to_vec(),
    };
    Ok(f.at(q, v))
}

/// Frame derivatives of the Routhian, split into shape and group families.
pub fn routhian_derivatives(
    sys: &LagrangianSystem,
    mu: &[f64],
    q: &[f64],
    v: &[f64],
) -> Result<RouthianDerivs<f64>> {
    sys.sym.moving_frame().eval(q)?;
    Ok(routhian_lifts::<f64>(sys, mu, q, v))
}

/// Generic-scalar version of [`routhian_derivatives`] (no frame check).
pub fn routhian_lifts<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    q: &[S],
    v: &[S],
) -> RouthianDerivs<S> {
    let f = RouthianFn {
        l: sys.l.clone(),
        sym: sys.sym.clone(),
        mu: mu.to_vec(),
    };
    let frame = sys.sym.moving_frame();
    let (zc, zv) = frame.lift_derivatives::<S>(&f, q, v);
    let m = sys.sym.dims.m;
    RouthianDerivs {
        xc: zc[..m].to_vec(),
        xv: zv[..m].to_vec(),
        ec: zc[m..].to_vec(),
        ev: zv[m..].to_vec(),
    }
}

/// Stacked implicit Euler-Lagrange residual
/// `(dq - v, p - dL/dv, dp - dL/dq)` at a Pontryagin point.
pub fn implicit_el_residual(
    sys: &LagrangianSystem,
    pt: &PontryaginPoint,
    dq: &[f64],
    dp: &[f64],
) -> DVector<f64> {
    DVector::from_vec(el_rows::<f64>(
        sys.l.as_ref(),
        pt.q.as_slice(),
        pt.v.as_slice(),
        pt.p.as_slice(),
        dq,
        dp,
    ))
}

/// Generic rows of the implicit Euler-Lagrange equations.
pub fn el_rows<S: Lift>(
    l: &dyn LagrangianFn,
    q: &[S],
    v: &[S],
    p: &[S],
    dq: &[S],
    dp: &[S],
) -> Vec<S> {
    let n = q.len();
    let (lq, lv) = lag_gradients::<S>(l, q, v);
    let mut rows = Vec::with_capacity(3 * n);
    for i in 0..n {
        rows.push(dq[i] - v[i]);
    }
    for i in 0..n {
        rows.push(p[i] - lv[i]);
    }
    for i in 0..n {
        rows.push(dp[i] - lq[i]);
    }
    rows
}

/// Stacked implicit Lagrange-Routh residual on the momentum level set:
/// `(vtilde - u, E^V(R^mu), ptilde - mu, v - xdot, X^V(R^mu) - p,
///   pdot - X^C(R^mu) + mu_a B^a_ij v^j)`.
pub fn implicit_lr_residual(
    sys: &LagrangianSystem,
    mu: &[f64],
    s: &FullQuasiState,
    rates: &FullQuasiRates,
) -> Result<DVector<f64>> {
    sys.sym.moving_frame().eval(s.q.as_slice())?;
    Ok(DVector::from_vec(lr_rows::<f64>(
        sys,
        mu,
        s.q.as_slice(),
        s.v.as_slice(),
        s.vtilde.as_slice(),
        s.p.as_slice(),
        s.ptilde.as_slice(),
        rates.dq.as_slice(),
        rates.dp.as_slice(),
    )))
}

/// Generic rows of the implicit Lagrange-Routh equations.
#[allow(clippy::too_many_arguments)]
pub fn lr_rows<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    q: &[S],
    v: &[S],
    vtilde: &[S],
    p: &[S],
    ptilde: &[S],
    dq: &[S],
    dp: &[S],
) -> Vec<S> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let v_nat = sym.natural_velocity::<S>(q, v, vtilde);
    let derivs = routhian_lifts::<S>(sys, mu, q, &v_nat);
    let u = sym.group_quasi_velocity::<S>(q, dq);
    let b = sym.curvature_unchecked::<S>(q);
    let mut rows = Vec::with_capacity(3 * sym.dims.n);
    for a in 0..k {
        rows.push(vtilde[a] - u[a]);
    }
    for a in 0..k {
        rows.push(derivs.ev[a]);
    }
    for a in 0..k {
        rows.push(ptilde[a] - S::from_f64(mu[a]));
    }
    for (i, &xi) in sym.shape_idx.iter().enumerate() {
        rows.push(v[i] - dq[xi]);
    }
    for i in 0..m {
        rows.push(derivs.xv[i] - p[i]);
    }
    for i in 0..m {
        let mut gyro = S::zero();
        for (a, &mu_a) in mu.iter().enumerate() {
            for j in 0..m {
                gyro = gyro + S::from_f64(mu_a) * b.get(a, i, j) * v[j];
            }
        }
        rows.push(dp[i] - derivs.xc[i] + gyro);
    }
    rows
}

/// Reduced-coordinate partials of the Routhian at `(x, theta^I, v, vhat)`,
/// by exact differentiation of the composed hat-frame Routhian.
pub fn reduced_partials<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    x: &[S],
    theta_i: &[S],
    v: &[S],
    vhat: &[S],
) -> ReducedPartials<S> {
    let f = ReducedRouthianFn {
        base: RouthianFn {
            l: sys.l.clone(),
            sym: sys.sym.clone(),
            mu: mu.to_vec(),
        },
        theta_a: theta_a.to_vec(),
    };
    let m = sys.sym.dims.m;
    let q_red: Vec<S> = x.iter().chain(theta_i).copied().collect();
    let v_red: Vec<S> = v.iter().chain(vhat).copied().collect();
    let (dq, dv) = lag_gradients::<S>(&f, &q_red, &v_red);
    ReducedPartials {
        d_x: dq[..m].to_vec(),
        d_theta_i: dq[m..].to_vec(),
        d_v: dv[..m].to_vec(),
        d_vhat: dv[m..].to_vec(),
    }
}

/// Stacked reduced implicit Lagrange-Routh residual on the quotient:
/// `(xdot - v, theta^I-dot - vhat^J L^I_J + xdot^i Lambda^I_i,
///   pdot_i - dR/dx^i + Lambda^I_i dR/dtheta^I + mu_a B^a_ij xdot^j,
///   p_i - dR/dv^i, dR/dvhat^a)`.
/// Value of the Routhian at a reduced state (hat-frame composition with
/// the fiber coordinates frozen at `theta_a`).
pub fn reduced_routhian(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    x: &[f64],
    theta_i: &[f64],
    v: &[f64],
    vhat: &[f64],
) -> f64 {
    let f = ReducedRouthianFn {
        base: RouthianFn {
            l: sys.l.clone(),
            sym: sys.sym.clone(),
            mu: mu.to_vec(),
        },
        theta_a: theta_a.to_vec(),
    };
    let mut qr = x.to_vec();
    qr.extend_from_slice(theta_i);
    let mut vr = v.to_vec();
    vr.extend_from_slice(vhat);
    f.eval::<f64>(&qr, &vr)
}

pub fn reduced_lr_residual(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    r: &ReducedState,
    rates: &ReducedRates,
) -> Result<DVector<f64>> {
    let qf = scatter_configuration::<f64>(&sys.sym, theta_a, r.x.as_slice(), r.theta_i.as_slice());
    sys.sym.moving_frame().eval(&qf)?;
    Ok(DVector::from_vec(red_rows::<f64>(
        sys,
        mu,
        theta_a,
        r.x.as_slice(),
        r.theta_i.as_slice(),
        r.v.as_slice(),
        r.vhat.as_slice(),
        r.p.as_slice(),
        rates.dx.as_slice(),
        rates.dtheta_i.as_slice(),
        rates.dp.as_slice(),
    )))
}

/// Generic rows of the reduced equations.
#[allow(clippy::too_many_arguments)]
pub fn red_rows<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    x: &[S],
    theta_i: &[S],
    v: &[S],
    vhat: &[S],
    p: &[S],
    dx: &[S],
    dtheta_i: &[S],
    dp: &[S],
) -> Vec<S> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let qf = scatter_configuration::<S>(sym, theta_a, x, theta_i);
    let partials = reduced_partials::<S>(sys, mu, theta_a, x, theta_i, v, vhat);
    let lmat = sym.body_group_frame::<S>(&qf);
    let lam = S::mat(sym.lambda.as_ref(), &qf);
    let b = sym.curvature_unchecked::<S>(&qf);
    let n_i = sym.split.i_idx.len();
    let mut rows = Vec::with_capacity(3 * m + n_i + k);
    for i in 0..m {
        rows.push(dx[i] - v[i]);
    }
    for (r, &ii) in sym.split.i_idx.iter().enumerate() {
        // theta^I rate: vhat^J L^I_J - xdot^i Lambda^I_i with J running
        // over the complement indices only.
        let mut rhs = S::zero();
        for &jj in &sym.split.i_idx {
            rhs = rhs + lmat.get(ii, jj) * vhat[jj];
        }
        for i in 0..m {
            rhs = rhs - lam.get(ii, i) * dx[i];
        }
        rows.push(dtheta_i[r] - rhs);
    }
    for i in 0..m {
        let mut gyro = S::zero();
        for (a, &mu_a) in mu.iter().enumerate() {
            for j in 0..m {
                gyro = gyro + S::from_f64(mu_a) * b.get(a, i, j) * dx[j];
            }
        }
        let mut lam_term = S::zero();
        for (r, &ii) in sym.split.i_idx.iter().enumerate() {
            lam_term = lam_term + lam.get(ii, i) * partials.d_theta_i[r];
        }
        rows.push(dp[i] - partials.d_x[i] + lam_term + gyro);
    }
    for i in 0..m {
        rows.push(p[i] - partials.d_v[i]);
    }
    for a in 0..k {
        rows.push(partials.d_vhat[a]);
    }
    rows
}

/// Group-velocity Hessian of `L` along the group frame's vertical lifts,
/// with its numerical rank (singular values below `1e-10 * max` are zero).
pub fn check_g_regular(sys: &LagrangianSystem, q: &[f64], v: &[f64]) -> (usize, SMat<f64>) {
    let k = sys.sym.dims.k;
    let km = f64::mat(sys.sym.kmat.as_ref(), q);
    let mut h = SMat::zeros(k, k);
    // Column b: derivative of the momentum map along the b-th group
    // field's vertical lift, i.e. seed v along its theta-components.
    for b in 0..k {
        let qd: Vec<D1> = q.iter().map(|&x| D1::constant(x)).collect();
        let mut vd: Vec<D1> = v.iter().map(|&x| D1::constant(x)).collect();
        for (bp, &tb) in sys.sym.group_idx.iter().enumerate() {
            vd[tb].du = km.get(bp, b);
        }
        let col = sys.sym.momentum_map::<D1>(sys.l.as_ref(), &qd, &vd);
        for a in 0..k {
            h.set(a, b, col[a].du);
        }
    }
    let svd = h.to_na().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = if smax <= 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|&&s| s > RANK_TOL * smax)
            .count()
    };
    (rank, h)
}

/// Solves the regular-case group-velocity condition `dR/dvhat = 0` for
/// `vhat` at fixed `(x, theta^I, v)`.
///
/// The primal solve is a damped Newton iteration at `f64` starting from
/// zero group velocity; the result is then lifted to `S` by chord sweeps
/// with the converged Jacobian, so derivative parts of the arguments
/// propagate exactly through the implicit function.
pub fn solve_group_velocity<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    x: &[S],
    theta_i: &[S],
    v: &[S],
) -> Result<Vec<S>> {
    let k = sys.sym.dims.k;
    let x0: Vec<f64> = x.iter().map(|s| s.value()).collect();
    let ti0: Vec<f64> = theta_i.iter().map(|s| s.value()).collect();
    let v0: Vec<f64> = v.iter().map(|s| s.value()).collect();
    let not_g_regular = |vhat: &[f64]| {
        let qf = scatter_configuration::<f64>(&sys.sym, theta_a, &x0, &ti0);
        let vf = assemble_velocity::<f64>(&sys.sym, &qf, &v0, vhat);
        let (rank, _) = check_g_regular(sys, &qf, &vf);
        Error::NotGRegular { rank, dim: k }
    };
    let grad = |vhat: &[f64]| -> Vec<f64> {
        reduced_partials::<f64>(sys, mu, theta_a, &x0, &ti0, &v0, vhat).d_vhat
    };
    let mut vhat = vec![0.0f64; k];
    let mut jac = SMat::<f64>::zeros(k, k);
    let mut converged = false;
    for _ in 0..50 {
        let g = grad(&vhat);
        let gnorm = g.iter().fold(0.0f64, |mx, &gi| mx.max(gi.abs()));
        // Jacobian dg/dvhat by seeding each component.
        let xs: Vec<D1> = x0.iter().map(|&t| D1::constant(t)).collect();
        let ts: Vec<D1> = ti0.iter().map(|&t| D1::constant(t)).collect();
        let vs: Vec<D1> = v0.iter().map(|&t| D1::constant(t)).collect();
        for b in 0..k {
            let mut vh: Vec<D1> = vhat.iter().map(|&t| D1::constant(t)).collect();
            vh[b].du = 1.0;
            let gd = reduced_partials::<D1>(sys, mu, theta_a, &xs, &ts, &vs, &vh).d_vhat;
            for a in 0..k {
                jac.set(a, b, gd[a].du);
            }
        }
        if gnorm < GVEL_NEWTON_TOL {
            converged = true;
            break;
        }
        let lu = jac.lu().map_err(|_| not_g_regular(&vhat))?;
        let delta = lu.solve(&g.iter().map(|&gi| -gi).collect::<Vec<_>>())?;
        let mut lambda = 1.0;
        loop {
            let cand: Vec<f64> = vhat
                .iter()
                .zip(&delta)
                .map(|(&vh, &d)| vh + lambda * d)
                .collect();
            let gc = grad(&cand);
            let gcn = gc.iter().fold(0.0f64, |mx, &gi| mx.max(gi.abs()));
            if gcn < gnorm {
                vhat = cand;
                break;
            }
            lambda *= 0.5;
            if lambda < 2f64.powi(-16) {
                return Err(Error::NewtonDiverged {
                    iters: 50,
                    residual: gnorm,
                });
            }
        }
    }
    if !converged {
        let g = grad(&vhat);
        let gnorm = g.iter().fold(0.0f64, |mx, &gi| mx.max(gi.abs()));
        if gnorm >= GVEL_NEWTON_TOL {
            return Err(Error::NewtonDiverged {
                iters: 50,
                residual: gnorm,
            });
        }
    }
    // Lift to S: chord sweeps with the frozen converged Jacobian resolve
    // one derivative layer per sweep.
    let mut vh_s: Vec<S> = vhat.iter().map(|&t| S::from_f64(t)).collect();
    if S::DEPTH > 0 {
        let jac_s: SMat<S> = jac.map(|t| S::from_f64(t));
        let lu_s = jac_s.lu().map_err(|_| not_g_regular(&vhat))?;
        for _ in 0..S::DEPTH {
            let g = reduced_partials::<S>(sys, mu, theta_a, x, theta_i, v, &vh_s).d_vhat;
            let delta = lu_s.solve(&g.iter().map(|&gi| S::zero() - gi).collect::<Vec<S>>())?;
            for a in 0..k {
                vh_s[a] = vh_s[a] + delta[a];
            }
        }
    }
    Ok(vh_s)
}

/// Second-order state for the classical (regular-case) Routh equations:
/// shape position/velocity/acceleration plus the surviving fiber
/// coordinates and their rates.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderState {
    pub x: DVector<f64>,
    pub theta_i: DVector<f64>,
    pub xdot: DVector<f64>,
    pub dtheta_i: DVector<f64>,
    pub xddot: DVector<f64>,
}

/// Residuals of the classical Routh equations in second-order form:
/// the `theta^I` rate equation and
/// `d/dt(dRbar/dv^i) - dRbar/dx^i + Lambda^I_i dRbar/dtheta^I
///  + mu_a B^a_ij xdot^j`,
/// where `Rbar` is the Routhian restricted to the solved group-velocity
/// level set. Its first-order partials equal the unrestricted ones at the
/// solution because the group-velocity gradient vanishes there.
pub fn classical_routh_residual(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    s: &SecondOrderState,
) -> Result<DVector<f64>> {
    let sym = &sys.sym;
    let (m, k) = (sym.dims.m, sym.dims.k);
    let qf = scatter_configuration::<f64>(sym, theta_a, s.x.as_slice(), s.theta_i.as_slice());
    let v0 = assemble_velocity::<f64>(sym, &qf, s.xdot.as_slice(), &vec![0.0; k]);
    let (rank, _) = check_g_regular(sys, &qf, &v0);
    if rank < k {
        return Err(Error::NotGRegular { rank, dim: k });
    }
    // Time-seeded arguments: the derivative part of each coordinate is its
    // time rate, so derivative parts of the partials are total time
    // derivatives along the candidate curve.
    let xs: Vec<D1> = s
        .x
        .iter()
        .zip(s.xdot.iter())
        .map(|(&x, &dx)| D1::new(x, dx))
        .collect();
    let ts: Vec<D1> = s
        .theta_i
        .iter()
        .zip(s.dtheta_i.iter())
        .map(|(&t, &dt)| D1::new(t, dt))
        .collect();
    let vs: Vec<D1> = s
        .xdot
        .iter()
        .zip(s.xddot.iter())
        .map(|(&v, &a)| D1::new(v, a))
        .collect();
    let vhat = solve_group_velocity::<D1>(sys, mu, theta_a, &xs, &ts, &vs)?;
    let partials = reduced_partials::<D1>(sys, mu, theta_a, &xs, &ts, &vs, &vhat);
    let lmat = sym.body_group_frame::<f64>(&qf);
    let lam = f64::mat(sym.lambda.as_ref(), &qf);
    let b = sym.curvature_unchecked::<f64>(&qf);
    let n_i = sym.split.i_idx.len();
    let mut rows = Vec::with_capacity(n_i + m);
    for (r, &ii) in sym.split.i_idx.iter().enumerate() {
        let mut rhs = 0.0;
        for &jj in &sym.split.i_idx {
            rhs += lmat.get(ii, jj) * vhat[jj].re;
        }
        for i in 0..m {
            rhs -= lam.get(ii, i) * s.xdot[i];
        }
        rows.push(s.dtheta_i[r] - rhs);
    }
    for i in 0..m {
        let mut gyro = 0.0;
        for (a, &mu_a) in mu.iter().enumerate() {
            for j in 0..m {
                gyro += mu_a * b.get(a, i, j) * s.xdot[j];
            }
        }
        let mut lam_term = 0.0;
        for (r, &ii) in sym.split.i_idx.iter().enumerate() {
            lam_term += lam.get(ii, i) * partials.d_theta_i[r].re;
        }
        // d/dt of the v-partial is its derivative part under time seeding.
        rows.push(partials.d_v[i].du - partials.d_x[i].re + lam_term + gyro);
    }
    Ok(DVector::from_vec(rows))
}

/// Generic first-order rows of the classical Routh equations, for states
/// `(x, theta^I, v, p)` with `p` the shape momentum of the restricted
/// Routhian. Used by the integrator's classical mode.
#[allow(clippy::too_many_arguments)]
pub fn classical_rows<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    theta_a: &[f64],
    x: &[S],
    theta_i: &[S],
    v: &[S],
    p: &[S],
    dx: &[S],
    dtheta_i: &[S],
    dp: &[S],
) -> Result<Vec<S>> {
    let sym = &sys.sym;
    let m = sym.dims.m;
    let qf = scatter_configuration::<S>(sym, theta_a, x, theta_i);
    let vhat = solve_group_velocity::<S>(sys, mu, theta_a, x, theta_i, v)?;
    let partials = reduced_partials::<S>(sys, mu, theta_a, x, theta_i, v, &vhat);
    let lmat = sym.body_group_frame::<S>(&qf);
    let lam = S::mat(sym.lambda.as_ref(), &qf);
    let b = sym.curvature_unchecked::<S>(&qf);
    let n_i = sym.split.i_idx.len();
    let mut rows = Vec::with_capacity(3 * m + n_i);
    for i in 0..m {
        rows.push(dx[i] - v[i]);
    }
    for (r, &ii) in sym.split.i_idx.iter().enumerate() {
        let mut rhs = S::zero();
        for &jj in &sym.split.i_idx {
            rhs = rhs + lmat.get(ii, jj) * vhat[jj];
        }
        for i in 0..m {
            rhs = rhs - lam.get(ii, i) * dx[i];
        }
        rows.push(dtheta_i[r] - rhs);
    }
    for i in 0..m {
        let mut gyro = S::zero();
        for (a, &mu_a) in mu.iter().enumerate() {
            for j in 0..m {
                gyro = gyro + S::from_f64(mu_a) * b.get(a, i, j) * dx[j];
            }
        }
        let mut lam_term = S::zero();
        for (r, &ii) in sym.split.i_idx.iter().enumerate() {
            lam_term = lam_term + lam.get(ii, i) * partials.d_theta_i[r];
        }
        rows.push(dp[i] - partials.d_x[i] + lam_term + gyro);
    }
    for i in 0..m {
        rows.push(p[i] - partials.d_v[i]);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MatrixDef;
    use crate::frames::Dims;
    use crate::smat::Ten3;
    use crate::symmetry::MuSplit;

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

    /// `L = v_x^2 + v_x v_y - x^2/2` on coordinates `(x, y)`, cyclic in y.
    /// Degenerate: no `v_y^2` term.
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

    /// `L = (v_r^2 + r^2 v_th^2)/2 - r^2/2` on `(r, th)`: planar central
    /// force with quadratic potential, regular in the group velocity.
    struct CentralLag;
    impl LagrangianDef for CentralLag {
        fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
            let half = S::from_f64(0.5);
            half * (v[0] * v[0] + q[0] * q[0] * v[1] * v[1]) - half * q[0] * q[0]
        }
    }

    fn central_force() -> LagrangianSystem {
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
            "central-force",
            vec!["r".into(), "th".into()],
            Arc::new(CentralLag),
            sym,
            vec![],
            vec![1.0, 0.0],
            0.3,
        )
        .unwrap()
    }

    /// Exact degenerate solution with `mu = 1`, `V = x^2/2`:
    /// `x = t`, `y = -t^3/6`, `v_x = 1`, `v_y = -t^2/2`,
    /// `p_x = 2 - t^2/2`, `p_y = 1`.
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
    fn invariance_validation_rejects_asymmetric_lagrangian() {
        struct BadLag;
        impl LagrangianDef for BadLag {
            fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
                v[0] * v[0] + q[1] * q[1]
            }
        }
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
        let err = LagrangianSystem::new(
            "bad",
            vec!["x".into(), "y".into()],
            Arc::new(BadLag),
            sym,
            vec![],
            vec![0.0, 0.0],
            0.5,
        );
        assert!(matches!(err, Err(Error::InvarianceViolation { .. })));
    }

    #[test]
    fn routhian_value_subtracts_momentum_pairing() {
        let sys = cyclic_linear();
        // R = L - mu * v_y at mu = 1.
        let q = [0.3, -0.2];
        let v = [0.7, 0.4];
        let l = v[0] * v[0] + v[0] * v[1] - q[0] * q[0] / 2.0;
        let r = routhian(&sys, &[1.0], &q, &v).unwrap();
        assert!((r - (l - v[1])).abs() < 1e-14);
    }

    #[test]
    fn implicit_el_zero_along_exact_solution() {
        let sys = cyclic_linear();
        for &t in &[0.0, 0.5, 1.3] {
            let (s, rates) = cyclic_exact(t);
            // Natural momenta: p_x = 2v_x + v_y, p_y = v_x.
            let pt = PontryaginPoint::new(
                s.q.as_slice().to_vec(),
                vec![1.0, -t * t / 2.0],
                vec![2.0 - t * t / 2.0, 1.0],
            );
            let dq = [1.0, -t * t / 2.0];
            let dp = [-t, 0.0];
            let r = implicit_el_residual(&sys, &pt, &dq, &dp);
            assert!(r.amax() < 1e-13, "t = {t}: {r}");
            let _ = rates;
        }
    }

    #[test]
    fn implicit_lr_zero_along_exact_solution() {
        let sys = cyclic_linear();
        for &t in &[0.0, 0.5, 1.3] {
            let (s, rates) = cyclic_exact(t);
            let r = implicit_lr_residual(&sys, &[1.0], &s, &rates).unwrap();
            assert_eq!(r.len(), 6);
            assert!(r.amax() < 1e-13, "t = {t}: {r}");
        }
    }

    #[test]
    fn implicit_lr_detects_momentum_mismatch() {
        let sys = cyclic_linear();
        let (mut s, rates) = cyclic_exact(0.5);
        s.ptilde[0] = 1.5;
        let r = implicit_lr_residual(&sys, &[1.0], &s, &rates).unwrap();
        // Third block (index 2 here: k = 1) carries ptilde - mu.
        assert!((r[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn reduced_residual_zero_along_exact_solution() {
        let sys = cyclic_linear();
        for &t in &[0.0, 0.5, 1.3] {
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
            let res = reduced_lr_residual(&sys, &[1.0], &[0.0], &r, &rates).unwrap();
            assert_eq!(res.len(), 4);
            assert!(res.amax() < 1e-13, "t = {t}: {res}");
        }
    }

    #[test]
    fn reduced_vhat_row_pins_degenerate_velocity() {
        // dR/dvhat = v_x - mu: nonzero iff v_x deviates from mu.
        let sys = cyclic_linear();
        let r = ReducedState {
            x: DVector::from_vec(vec![0.2]),
            theta_i: DVector::zeros(0),
            v: DVector::from_vec(vec![1.25]),
            vhat: DVector::from_vec(vec![0.0]),
            p: DVector::from_vec(vec![2.5]),
        };
        let rates = ReducedRates {
            dx: DVector::from_vec(vec![1.25]),
            dtheta_i: DVector::zeros(0),
            dp: DVector::from_vec(vec![-0.2]),
        };
        let res = reduced_lr_residual(&sys, &[1.0], &[0.0], &r, &rates).unwrap();
        assert!((res[3] - 0.25).abs() < 1e-14, "{res}");
    }

    #[test]
    fn reduced_partials_match_direct_formulas() {
        // For the central-force Routhian at mu:
        //   d/dx = r vhat^2 - r, d/dv = v_r, d/dvhat = r^2 vhat - mu.
        let sys = central_force();
        let (r, vr, vh, mu) = (1.3, 0.4, 0.7, 0.9);
        let p = reduced_partials::<f64>(&sys, &[mu], &[0.0], &[r], &[], &[vr], &[vh]);
        assert!((p.d_x[0] - (r * vh * vh - r)).abs() < 1e-13);
        assert!((p.d_v[0] - vr).abs() < 1e-14);
        assert!((p.d_vhat[0] - (r * r * vh - mu)).abs() < 1e-14);
    }

    #[test]
    fn g_regular_ranks() {
        let deg = cyclic_linear();
        let (rank, h) = check_g_regular(&deg, &[0.3, 0.1], &[0.5, -0.2]);
        assert_eq!(rank, 0);
        assert!(h.max_abs() < 1e-14);

        let reg = central_force();
        let (rank, h) = check_g_regular(&reg, &[1.5, 0.0], &[0.0, 0.0]);
        assert_eq!(rank, 1);
        assert!((h.get(0, 0) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn classical_rejects_degenerate_system() {
        let sys = cyclic_linear();
        let s = SecondOrderState {
            x: DVector::from_vec(vec![0.1]),
            theta_i: DVector::zeros(0),
            xdot: DVector::from_vec(vec![1.0]),
            dtheta_i: DVector::zeros(0),
            xddot: DVector::from_vec(vec![0.0]),
        };
        let err = classical_routh_residual(&sys, &[1.0], &[0.0], &s);
        assert!(matches!(err, Err(Error::NotGRegular { rank: 0, dim: 1 })));
    }

    #[test]
    fn classical_zero_on_circular_orbit() {
        // V = r^2/2, mu = 1: effective force -V' + mu^2/r^3 vanishes at
        // r = 1, so the circular orbit is an equilibrium of the shape
        // dynamics.
        let sys = central_force();
        let s = SecondOrderState {
            x: DVector::from_vec(vec![1.0]),
            theta_i: DVector::zeros(0),
            xdot: DVector::from_vec(vec![0.0]),
            dtheta_i: DVector::zeros(0),
            xddot: DVector::from_vec(vec![0.0]),
        };
        let r = classical_routh_residual(&sys, &[1.0], &[0.0], &s).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r.amax() < 1e-12, "{r}");
    }

    #[test]
    fn classical_matches_effective_potential_force() {
        // Generic point: residual of the radial equation should be
        // xddot - (-V'(r) + mu^2/r^3).
        let sys = central_force();
        let (r0, mu, a) = (1.4, 0.8, 0.25);
        let s = SecondOrderState {
            x: DVector::from_vec(vec![r0]),
            theta_i: DVector::zeros(0),
            xdot: DVector::from_vec(vec![0.3]),
            dtheta_i: DVector::zeros(0),
            xddot: DVector::from_vec(vec![a]),
        };
        let res = classical_routh_residual(&sys, &[mu], &[0.0], &s).unwrap();
        let force = -r0 + mu * mu / (r0 * r0 * r0);
        assert!((res[0] - (a - force)).abs() < 1e-11, "{res}");
    }

    #[test]
    fn classical_first_order_rows_vanish_on_circular_orbit() {
        let sys = central_force();
        // p_r = dRbar/dv_r = v_r = 0 on the circular orbit.
        let rows = classical_rows::<f64>(
            &sys,
            &[1.0],
            &[0.0],
            &[1.0],
            &[],
            &[0.0],
            &[0.0],
            &[0.0],
            &[],
            &[0.0],
        )
        .unwrap();
        for (i, &v) in rows.iter().enumerate() {
            assert!(v.abs() < 1e-12, "row {i} = {v}");
        }
    }

    #[test]
    fn group_velocity_solve_lifts_derivatives() {
        // vhat*(r) = mu / r^2; seed r to check d vhat*/dr = -2 mu / r^3.
        let sys = central_force();
        let r0 = 1.2;
        let mu = 0.7;
        let x = [D1::new(r0, 1.0)];
        let vh = solve_group_velocity::<D1>(&sys, &[mu], &[0.0], &x, &[], &[D1::constant(0.4)])
            .unwrap();
        assert!((vh[0].re - mu / (r0 * r0)).abs() < 1e-12);
        assert!((vh[0].du - (-2.0 * mu / (r0 * r0 * r0))).abs() < 1e-10);
    }

    #[test]
    fn rder_identities_hold_at_seeded_points() {
        // The frame derivatives of R^mu relate to those of L by:
        //   X_i^C(R) = X_i^C(L) + mu_a B^a_ij v^j   (B = 0 here),
        //   X_i^V(R) = X_i^V(L),
        //   E_a^C(R) = -mu_c C^c_ab vtilde^b        (= 0, Abelian),
        //   E_a^V(R) = E_a^V(L) - mu_a.
        let sys = cyclic_linear();
        let mu = [0.9];
        for (q, v) in sys.sample_states(50, 7) {
            let rd = routhian_lifts::<f64>(&sys, &mu, &q, &v);
            let frame = sys.sym.moving_frame();
            let (lc, lv) = frame.lift_derivatives::<f64>(sys.l.as_ref(), &q, &v);
            assert!((rd.xc[0] - lc[0]).abs() < 1e-12);
            assert!((rd.xv[0] - lv[0]).abs() < 1e-12);
            assert!(rd.ec[0].abs() < 1e-12);
            assert!((rd.ev[0] - (lv[1] - mu[0])).abs() < 1e-12);
        }
    }
}
