//! Implicit one-step DAE integration of the residual systems: full
//! implicit Euler-Lagrange, the momentum-level-set system in
//! quasi-velocities, the reduced system, and (for group-regular systems)
//! the classical second-order form in first-order variables.
//!
//! Discretization: implicit midpoint on the differential rows combined
//! with endpoint enforcement of the algebraic rows (a half-explicit
//! index-1 treatment), solved by damped Newton with minimum-norm steps so
//! rank-deficient Jacobians (the degenerate case) are handled and
//! surfaced rather than fatal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::eval::{lag_gradients, EvalScalar, Lift};
use crate::linalg::{min_norm_lstsq, nullspace, NewtonReport, RANK_TOL};
use crate::routh::{
    classical_rows, el_rows, lr_rows, red_rows, reduced_partials, reduced_routhian,
    scatter_configuration, solve_group_velocity, LagrangianSystem,
};
use crate::scalar::{Dual, D1};

/// Residual rows of time-differentiated constraints beyond this bound mark
/// a state as inconsistent (a hidden constraint is violated).
pub const PRESERVATION_TOL: f64 = 1e-8;

/// Which residual system drives the integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Natural coordinates `(q, v, p)`, full implicit Euler-Lagrange.
    Full,
    /// Momentum level set in quasi-velocities:
    /// `(q, v, vtilde, p, ptilde)`.
    MMu,
    /// Reduced coordinates `(x, theta^I, v, vhat, p)`.
    Reduced,
    /// Group-regular classical form `(x, theta^I, v, p)` with the group
    /// velocity eliminated pointwise.
    Classical,
}

impl Mode {
    /// Flat state dimension for a system.
    pub fn state_dim(self, sys: &LagrangianSystem) -> usize {
        let d = &sys.sym.dims;
        let n_i = sys.sym.split.i_idx.len();
        match self {
            Mode::Full => 3 * d.n,
            Mode::MMu => d.n + 2 * d.m + 2 * d.k,
            Mode::Reduced => 3 * d.m + n_i + d.k,
            Mode::Classical => 3 * d.m + n_i,
        }
    }

    /// Component names in flat-state order (CSV headers).
    pub fn state_names(self, sys: &LagrangianSystem) -> Vec<String> {
        let sym = &sys.sym;
        let c = &sys.coords;
        let shape: Vec<&String> = sym.shape_idx.iter().map(|&i| &c[i]).collect();
        let group: Vec<&String> = sym.group_idx.iter().map(|&i| &c[i]).collect();
        let mut names = Vec::new();
        match self {
            Mode::Full => {
                names.extend(c.iter().cloned());
                names.extend(c.iter().map(|s| format!("v_{s}")));
                names.extend(c.iter().map(|s| format!("p_{s}")));
            }
            Mode::MMu => {
                names.extend(c.iter().cloned());
                names.extend(shape.iter().map(|s| format!("v_{s}")));
                names.extend(group.iter().map(|s| format!("vtilde_{s}")));
                names.extend(shape.iter().map(|s| format!("p_{s}")));
                names.extend(group.iter().map(|s| format!("ptilde_{s}")));
            }
            Mode::Reduced => {
                names.extend(shape.iter().map(|s| s.to_string()));
                names.extend(sym.split.i_idx.iter().map(|&a| group[a].to_string()));
                names.extend(shape.iter().map(|s| format!("v_{s}")));
                names.extend(group.iter().map(|s| format!("vhat_{s}")));
                names.extend(shape.iter().map(|s| format!("p_{s}")));
            }
            Mode::Classical => {
                names.extend(shape.iter().map(|s| s.to_string()));
                names.extend(sym.split.i_idx.iter().map(|&a| group[a].to_string()));
                names.extend(shape.iter().map(|s| format!("v_{s}")));
                names.extend(shape.iter().map(|s| format!("p_{s}")));
            }
        }
        names
    }
}

/// One-step solver configuration.
#[derive(Clone, Debug)]
pub struct StepConfig {
    pub h: f64,
    pub newton_tol: f64,
    pub max_iters: usize,
    pub damping_min: f64,
    pub mode: Mode,
    /// Take one extra full Newton step after convergence (kept only if it
    /// reduces the residual); drives per-step constraint residuals toward
    /// machine precision so they do not accumulate over long runs.
    pub polish: bool,
}

impl StepConfig {
    pub fn new(mode: Mode, h: f64) -> Self {
        StepConfig {
            h,
            newton_tol: 1e-10,
            max_iters: 50,
            damping_min: (2.0f64).powi(-16),
            mode,
            polish: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Invalid(format!("step size h = {} must be > 0", self.h)));
        }
        if !(self.newton_tol > 0.0) || !(self.damping_min > 0.0) {
            return Err(Error::Invalid("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample integration diagnostics.
#[derive(Clone, Debug, Default)]
pub struct SampleDiagnostics {
    /// Max deviation of the group quasi-momentum from `mu`.
    pub momentum_drift: f64,
    /// |E - E(t0)| for the mode's energy function.
    pub energy_drift: f64,
    /// Sup-norm of the continuous residual operator at the discrete rates
    /// (algebraic rows only for the initial sample).
    pub dirac_residual: f64,
    pub newton_iters: usize,
    pub rank_defect: usize,
}

/// A recorded integration: times, flat states, per-sample diagnostics.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub mode: Mode,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub diagnostics: Vec<SampleDiagnostics>,
}

impl Trajectory {
    /// Validating constructor: strictly increasing times, matching lengths.
    pub fn new(
        mode: Mode,
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        diagnostics: Vec<SampleDiagnostics>,
    ) -> Result<Self> {
        if times.len() != states.len() || times.len() != diagnostics.len() {
            return Err(Error::Invalid(format!(
                "trajectory length mismatch: {} times, {} states, {} diagnostics",
                times.len(),
                states.len(),
                diagnostics.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("times must be strictly increasing".into()));
        }
        Ok(Trajectory {
            mode,
            times,
            states,
            diagnostics,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_momentum_drift(&self) -> f64 {
        self.diagnostics
            .iter()
            .fold(0.0, |m, d| m.max(d.momentum_drift))
    }

    pub fn max_energy_drift(&self) -> f64 {
        self.diagnostics
            .iter()
            .fold(0.0, |m, d| m.max(d.energy_drift))
    }

    pub fn max_dirac_residual(&self) -> f64 {
        self.diagnostics
            .iter()
            .fold(0.0, |m, d| m.max(d.dirac_residual))
    }

    pub fn max_rank_defect(&self) -> usize {
        self.diagnostics.iter().map(|d| d.rank_defect).max().unwrap_or(0)
    }

    pub fn total_newton_iters(&self) -> usize {
        self.diagnostics.iter().map(|d| d.newton_iters).sum()
    }
}

/// An integration that may have stopped early: the recorded part plus the
/// failure (with its time) when one occurred.
#[derive(Debug)]
pub struct IntegrationRun {
    pub trajectory: Trajectory,
    pub failure: Option<Error>,
}

impl IntegrationRun {
    /// The trajectory if the run completed, the failure otherwise.
    pub fn into_result(self) -> Result<Trajectory> {
        match self.failure {
            None => Ok(self.trajectory),
            Some(e) => Err(e),
        }
    }
}

/// Consistent-initialization report: the projected state plus rank and
/// hidden-constraint diagnostics.
#[derive(Clone, Debug)]
pub struct InitReport {
    pub state: DVector<f64>,
    /// Sup-norm of the algebraic rows at the projected state.
    pub constraint_residual: f64,
    /// Column-rank defect of the constraint Jacobian at the solution.
    pub rank_defect: usize,
    /// Orthonormal null-space basis of the constraint Jacobian (present
    /// exactly when `rank_defect > 0`): the directions the algebraic rows
    /// leave free.
    pub nullspace: Option<DMatrix<f64>>,
    /// Residual of the time-differentiated algebraic rows under the
    /// induced rates (how well the constraints are preserved).
    pub preservation_defect: f64,
}

// ---------------------------------------------------------------------
// Residual assembly
// ---------------------------------------------------------------------

/// Natural `(q, v, p)` of a flat mode state, for extra-constraint rows and
/// domain guards.
fn natural_jet<S: Lift>(
    sys: &LagrangianSystem,
    mode: Mode,
    theta_a: &[f64],
    s: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let sym = &sys.sym;
    let (n, m, k) = (sym.dims.n, sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    match mode {
        Mode::Full => (
            s[..n].to_vec(),
            s[n..2 * n].to_vec(),
            s[2 * n..3 * n].to_vec(),
        ),
        Mode::MMu => {
            let q = &s[..n];
            let v = &s[n..n + m];
            let vt = &s[n + m..n + m + k];
            let p = &s[n + m + k..n + 2 * m + k];
            let pt = &s[n + 2 * m + k..];
            let v_nat = sym.natural_velocity::<S>(q, v, vt);
            let mut pq = p.to_vec();
            pq.extend_from_slice(pt);
            let at = sym.moving_frame().eval_unchecked::<S>(q);
            let p_nat = at.w.transpose().matvec(&pq);
            (q.to_vec(), v_nat, p_nat)
        }
        Mode::Reduced => {
            let x = &s[..m];
            let ti = &s[m..m + n_i];
            let v = &s[m + n_i..2 * m + n_i];
            let vh = &s[2 * m + n_i..2 * m + n_i + k];
            let p = &s[2 * m + n_i + k..];
            let q = scatter_configuration::<S>(sym, theta_a, x, ti);
            let v_nat = crate::routh::assemble_velocity::<S>(sym, &q, v, vh);
            // Momentum level set: the group quasi-momenta are fixed at mu,
            // the shape quasi-momenta are the state's p.
            let mut pq = p.to_vec();
            pq.extend(std::iter::repeat(S::zero()).take(k));
            let at = sym.moving_frame().eval_unchecked::<S>(&q);
            let p_nat = at.w.transpose().matvec(&pq);
            (q, v_nat, p_nat)
        }
        Mode::Classical => {
            let x = &s[..m];
            let ti = &s[m..m + n_i];
            let v = &s[m + n_i..2 * m + n_i];
            let q = scatter_configuration::<S>(sym, theta_a, x, ti);
            let mut v_nat = vec![S::zero(); n];
            for (i, &xi) in sym.shape_idx.iter().enumerate() {
                v_nat[xi] = v[i];
            }
            (q, v_nat, vec![S::zero(); n])
        }
    }
}

/// Natural momentum of a reduced flat state with the group quasi-momenta
/// pinned at `mu` (used by reconstruction and extra-constraint rows).
fn reduced_natural_momentum<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    q: &[S],
    p_shape: &[S],
) -> Vec<S> {
    let sym = &sys.sym;
    let mut pq = p_shape.to_vec();
    pq.extend(mu.iter().map(|&m| S::from_f64(m)));
    let at = sym.moving_frame().eval_unchecked::<S>(q);
    at.w.transpose().matvec(&pq)
}

/// Extra-constraint rows at a flat state.
fn extra_rows<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: Mode,
    theta_a: &[f64],
    s: &[S],
) -> Vec<S> {
    // Classical mode requires group regularity and is only used on systems
    // without declared constraints; the other modes evaluate them on the
    // natural jet of the state.
    if sys.extra_constraints.is_empty() || mode == Mode::Classical {
        return Vec::new();
    }
    let (q, v, mut p) = natural_jet::<S>(sys, mode, theta_a, s);
    if mode == Mode::Reduced {
        let sym = &sys.sym;
        let (m, k) = (sym.dims.m, sym.dims.k);
        let n_i = sym.split.i_idx.len();
        let p_shape = &s[2 * m + n_i + k..];
        p = reduced_natural_momentum::<S>(sys, mu, &q, p_shape);
    }
    sys.extra_constraints
        .iter()
        .map(|e| S::jet(e.f.as_ref(), &q, &v, &p))
        .collect()
}

/// Index ranges of differential rows within the continuous residual
/// stacking of each mode (all other rows are algebraic).
fn differential_row_ranges(sys: &LagrangianSystem, mode: Mode) -> Vec<std::ops::Range<usize>> {
    let (n, m, k) = (sys.sym.dims.n, sys.sym.dims.m, sys.sym.dims.k);
    let n_i = sys.sym.split.i_idx.len();
    match mode {
        Mode::Full => vec![0..n, 2 * n..3 * n],
        Mode::MMu => vec![0..k, 3 * k..3 * k + m, 3 * k + 2 * m..3 * k + 3 * m],
        Mode::Reduced => vec![0..2 * m + n_i],
        Mode::Classical => vec![0..2 * m + n_i],
    }
}

/// Continuous residual rows of a mode at a state with given rates.
fn continuous_rows<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: Mode,
    theta_a: &[f64],
    s: &[S],
    rate: &[S],
) -> Result<Vec<S>> {
    let sym = &sys.sym;
    let (n, m, k) = (sym.dims.n, sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    match mode {
        Mode::Full => Ok(el_rows::<S>(
            sys.l.as_ref(),
            &s[..n],
            &s[n..2 * n],
            &s[2 * n..],
            &rate[..n],
            &rate[2 * n..],
        )),
        Mode::MMu => Ok(lr_rows::<S>(
            sys,
            mu,
            &s[..n],
            &s[n..n + m],
            &s[n + m..n + m + k],
            &s[n + m + k..n + 2 * m + k],
            &s[n + 2 * m + k..],
            &rate[..n],
            &rate[n + m + k..n + 2 * m + k],
        )),
        Mode::Reduced => Ok(red_rows::<S>(
            sys,
            mu,
            theta_a,
            &s[..m],
            &s[m..m + n_i],
            &s[m + n_i..2 * m + n_i],
            &s[2 * m + n_i..2 * m + n_i + k],
            &s[2 * m + n_i + k..],
            &rate[..m],
            &rate[m..m + n_i],
            &rate[2 * m + n_i + k..],
        )),
        Mode::Classical => classical_rows::<S>(
            sys,
            mu,
            theta_a,
            &s[..m],
            &s[m..m + n_i],
            &s[m + n_i..2 * m + n_i],
            &s[2 * m + n_i..],
            &rate[..m],
            &rate[m..m + n_i],
            &rate[2 * m + n_i..],
        ),
    }
}

/// Stacked residual of one implicit step: differential rows discretized
/// by the midpoint rule, algebraic rows (and extra constraints) enforced
/// at the step endpoint.
fn discrete_residual<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: Mode,
    theta_a: &[f64],
    s0: &[f64],
    s1: &[S],
    h: f64,
) -> Result<Vec<S>> {
    let dim = s0.len();
    let half = S::from_f64(0.5);
    let inv_h = S::from_f64(1.0 / h);
    let mut mid = Vec::with_capacity(dim);
    let mut rate = Vec::with_capacity(dim);
    for i in 0..dim {
        let a = S::from_f64(s0[i]);
        mid.push((a + s1[i]) * half);
        rate.push((s1[i] - a) * inv_h);
    }
    let rows_mid = continuous_rows::<S>(sys, mu, mode, theta_a, &mid, &rate)?;
    let rows_end = continuous_rows::<S>(sys, mu, mode, theta_a, s1, &rate)?;
    let diff = differential_row_ranges(sys, mode);
    let mut out = rows_end;
    for r in diff {
        out[r.clone()].clone_from_slice(&rows_mid[r]);
    }
    out.extend(extra_rows::<S>(sys, mu, mode, theta_a, s1));
    Ok(out)
}

/// Algebraic rows (plus extra constraints) of a mode at a single state.
fn algebraic_residual<S: Lift>(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: Mode,
    theta_a: &[f64],
    s: &[S],
) -> Result<Vec<S>> {
    let dim = s.len();
    let zero_rate = vec![S::zero(); dim];
    let rows = continuous_rows::<S>(sys, mu, mode, theta_a, s, &zero_rate)?;
    let diff = differential_row_ranges(sys, mode);
    let mut out = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        if !diff.iter().any(|r| r.contains(&i)) {
            out.push(row);
        }
    }
    out.extend(extra_rows::<S>(sys, mu, mode, theta_a, s));
    Ok(out)
}

/// Display labels for the algebraic rows, aligned with
/// [`algebraic_residual`]'s row order.
fn algebraic_row_labels(sys: &LagrangianSystem, mode: Mode) -> Vec<String> {
    let sym = &sys.sym;
    let shape: Vec<&String> = sym.shape_idx.iter().map(|&i| &sys.coords[i]).collect();
    let group: Vec<&String> = sym.group_idx.iter().map(|&i| &sys.coords[i]).collect();
    let mut labels = Vec::new();
    match mode {
        Mode::Full => {
            for c in &sys.coords {
                labels.push(format!("momentum definition for {c}"));
            }
        }
        Mode::MMu => {
            for g in &group {
                labels.push(format!("vertical group derivative for {g}"));
            }
            for g in &group {
                labels.push(format!("quasi-momentum pin for {g}"));
            }
            for x in &shape {
                labels.push(format!("momentum definition for {x}"));
            }
        }
        Mode::Reduced => {
            for x in &shape {
                labels.push(format!("momentum definition for {x}"));
            }
            for g in &group {
                labels.push(format!("group-velocity stationarity for {g}"));
            }
        }
        Mode::Classical => {
            for x in &shape {
                labels.push(format!("momentum definition for {x}"));
            }
        }
    }
    if mode != Mode::Classical {
        for e in &sys.extra_constraints {
            labels.push(e.label.clone());
        }
    }
    labels
}

/// Explicit rates the differential rows induce at a state, together with
/// the mask of state components that carry such a rate (`true`) versus
/// purely algebraic components (`false`).
fn explicit_rates(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: Mode,
    theta_a: &[f64],
    s: &[f64],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let sym = &sys.sym;
    let (n, m, k) = (sym.dims.n, sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    let dim = s.len();
    let mut rate = vec![0.0; dim];
    let mut mask = vec![false; dim];
    match mode {
        Mode::Full => {
            let (q, v) = (&s[..n], &s[n..2 * n]);
            let (lq, _) = lag_gradients::<f64>(sys.l.as_ref(), q, v);
            for i in 0..n {
                rate[i] = v[i];
                mask[i] = true;
                rate[2 * n + i] = lq[i];
                mask[2 * n + i] = true;
            }
        }
        Mode::MMu => {
            let q = &s[..n];
            let v = &s[n..n + m];
            let vt = &s[n + m..n + m + k];
            let v_nat = sym.natural_velocity::<f64>(q, v, vt);
            let derivs = crate::routh::routhian_lifts::<f64>(sys, mu, q, &v_nat);
            let b = sym.curvature_unchecked::<f64>(q);
            for (beta, &r) in v_nat.iter().enumerate() {
                rate[beta] = r;
                mask[beta] = true;
            }
            for i in 0..m {
                let mut gyro = 0.0;
                for (a, &mu_a) in mu.iter().enumerate() {
                    for j in 0..m {
                        gyro += mu_a * b.get(a, i, j) * v[j];
                    }
                }
                rate[n + m + k + i] = derivs.xc[i] - gyro;
                mask[n + m + k + i] = true;
            }
        }
        Mode::Reduced => {
            let x = &s[..m];
            let ti = &s[m..m + n_i];
            let v = &s[m + n_i..2 * m + n_i];
            let vh = &s[2 * m + n_i..2 * m + n_i + k];
            let qf = scatter_configuration::<f64>(sym, theta_a, x, ti);
            let partials = reduced_partials::<f64>(sys, mu, theta_a, x, ti, v, vh);
            let lmat = sym.body_group_frame::<f64>(&qf);
            let lam = f64::mat(sym.lambda.as_ref(), &qf);
            let b = sym.curvature_unchecked::<f64>(&qf);
            for i in 0..m {
                rate[i] = v[i];
                mask[i] = true;
            }
            for (r, &ii) in sym.split.i_idx.iter().enumerate() {
                let mut dti = 0.0;
                for &jj in &sym.split.i_idx {
                    dti += lmat.get(ii, jj) * vh[jj];
                }
                for i in 0..m {
                    dti -= lam.get(ii, i) * v[i];
                }
                rate[m + r] = dti;
                mask[m + r] = true;
            }
            for i in 0..m {
                let mut gyro = 0.0;
                for (a, &mu_a) in mu.iter().enumerate() {
                    for j in 0..m {
                        gyro += mu_a * b.get(a, i, j) * v[j];
                    }
                }
                let mut lam_term = 0.0;
                for (r, &ii) in sym.split.i_idx.iter().enumerate() {
                    lam_term += lam.get(ii, i) * partials.d_theta_i[r];
                }
                rate[2 * m + n_i + k + i] = partials.d_x[i] - lam_term - gyro;
                mask[2 * m + n_i + k + i] = true;
            }
        }
        Mode::Classical => {
            let x = &s[..m];
            let ti = &s[m..m + n_i];
            let v = &s[m + n_i..2 * m + n_i];
            let vh = solve_group_velocity::<f64>(sys, mu, theta_a, x, ti, v)?;
            let qf = scatter_configuration::<f64>(sym, theta_a, x, ti);
            let partials = reduced_partials::<f64>(sys, mu, theta_a, x, ti, v, &vh);
            let lmat = sym.body_group_frame::<f64>(&qf);
            let lam = f64::mat(sym.lambda.as_ref(), &qf);
            let b = sym.curvature_unchecked::<f64>(&qf);
            for i in 0..m {
                rate[i] = v[i];
                mask[i] = true;
            }
            for (r, &ii) in sym.split.i_idx.iter().enumerate() {
                let mut dti = 0.0;
                for &jj in &sym.split.i_idx {
                    dti += lmat.get(ii, jj) * vh[jj];
                }
                for i in 0..m {
                    dti -= lam.get(ii, i) * v[i];
                }
                rate[m + r] = dti;
                mask[m + r] = true;
            }
            for i in 0..m {
                let mut gyro = 0.0;
                for (a, &mu_a) in mu.iter().enumerate() {
                    for j in 0..m {
                        gyro += mu_a * b.get(a, i, j) * v[j];
                    }
                }
                let mut lam_term = 0.0;
                for (r, &ii) in sym.split.i_idx.iter().enumerate() {
                    lam_term += lam.get(ii, i) * partials.d_theta_i[r];
                }
                rate[2 * m + n_i + i] = partials.d_x[i] - lam_term - gyro;
                mask[2 * m + n_i + i] = true;
            }
        }
    }
    Ok((rate, mask))
}

/// Column-seeded first-derivative Jacobian of a residual map.
fn jacobian_d1(
    eval: impl Fn(&[D1]) -> Result<Vec<D1>>,
    s: &[f64],
    rows: usize,
) -> DMatrix<f64> {
    let dim = s.len();
    let mut j = DMatrix::zeros(rows, dim);
    let mut sd: Vec<D1> = s.iter().map(|&x| D1::constant(x)).collect();
    for col in 0..dim {
        sd[col] = Dual::seeded(s[col]);
        match eval(&sd) {
            Ok(r) => {
                for (i, ri) in r.iter().enumerate() {
                    j[(i, col)] = ri.du;
                }
            }
            Err(_) => {
                for i in 0..rows {
                    j[(i, col)] = f64::NAN;
                }
            }
        }
        sd[col] = D1::constant(s[col]);
    }
    j
}

// ---------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------

/// Project a guess onto the algebraic constraint set of the mode by
/// damped Gauss-Newton with minimum-norm steps, then verify that the
/// constraints are preserved under the induced rates (the index-1
/// consistency of the remaining hidden constraints).
pub fn consistent_init(
    sys: &LagrangianSystem,
    mu: &[f64],
    guess: &DVector<f64>,
    cfg: &StepConfig,
) -> Result<InitReport> {
    cfg.validate()?;
    let mode = cfg.mode;
    let dim = mode.state_dim(sys);
    if guess.len() != dim {
        return Err(Error::Invalid(format!(
            "guess has length {} but the mode needs {dim}",
            guess.len()
        )));
    }
    if guess.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("guess must be finite".into()));
    }
    let theta_a = sys.theta_a_ref();
    let labels = algebraic_row_labels(sys, mode);

    let eval_f64 = |x: &[f64]| algebraic_residual::<f64>(sys, mu, mode, &theta_a, x);
    let mut x = guess.clone();
    let mut f = DVector::from_vec(eval_f64(x.as_slice())?);
    let n_rows = f.len();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        if f.amax() < cfg.newton_tol {
            converged = true;
            break;
        }
        let j = jacobian_d1(
            |xd| algebraic_residual::<D1>(sys, mu, mode, &theta_a, xd),
            x.as_slice(),
            n_rows,
        );
        let (delta, _) = min_norm_lstsq(&j, &(-&f), RANK_TOL);
        let f2 = f.norm();
        let mut lambda = 1.0;
        loop {
            let xt = &x + &delta * lambda;
            // An unevaluable trial point behaves like a non-decrease.
            if let Ok(ftv) = eval_f64(xt.as_slice()) {
                let ft = DVector::from_vec(ftv);
                if ft.norm() < f2 {
                    x = xt;
                    f = ft;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < cfg.damping_min {
                let rows = offending_rows(&f, &labels, cfg.newton_tol);
                return Err(Error::Inconsistent {
                    rows,
                    residual: f.amax(),
                });
            }
        }
    }
    if !converged && f.amax() >= cfg.newton_tol {
        let rows = offending_rows(&f, &labels, cfg.newton_tol);
        return Err(Error::Inconsistent {
            rows,
            residual: f.amax(),
        });
    }

    // Rank analysis of the constraint Jacobian at the solution.
    let j = jacobian_d1(
        |xd| algebraic_residual::<D1>(sys, mu, mode, &theta_a, xd),
        x.as_slice(),
        n_rows,
    );
    let ns = nullspace(&j, RANK_TOL);
    let rank_defect = ns.ncols();

    // Preservation: time-differentiate the algebraic rows. Components with
    // differential rows carry their induced rates; the rates of the purely
    // algebraic components are free unknowns solved in least squares. Any
    // irreducible residual is a violated hidden constraint.
    let (rate, mask) = explicit_rates(sys, mu, mode, &theta_a, x.as_slice())?;
    let mut b = DVector::zeros(n_rows);
    let mut free_cols = Vec::new();
    for c in 0..dim {
        if mask[c] {
            for r in 0..n_rows {
                b[r] -= j[(r, c)] * rate[c];
            }
        } else {
            free_cols.push(c);
        }
    }
    let defect_vec = if free_cols.is_empty() {
        -b
    } else {
        let a = DMatrix::from_fn(n_rows, free_cols.len(), |r, c| j[(r, free_cols[c])]);
        let (sol, _) = min_norm_lstsq(&a, &b, RANK_TOL);
        &a * sol - b
    };
    let preservation_defect = defect_vec.amax();
    if preservation_defect > PRESERVATION_TOL {
        let rows = offending_rows(&defect_vec, &labels, PRESERVATION_TOL);
        return Err(Error::Inconsistent {
            rows,
            residual: preservation_defect,
        });
    }

    Ok(InitReport {
        constraint_residual: f.amax(),
        state: x,
        rank_defect,
        nullspace: if rank_defect > 0 { Some(ns) } else { None },
        preservation_defect,
    })
}

fn offending_rows(residual: &DVector<f64>, labels: &[String], tol: f64) -> Vec<String> {
    let mut rows: Vec<String> = residual
        .iter()
        .enumerate()
        .filter(|(_, &r)| !(r.abs() <= tol))
        .map(|(i, &r)| {
            let label = labels
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("row {i}"));
            format!("{label} (|residual| = {:.3e})", r.abs())
        })
        .collect();
    if rows.is_empty() {
        rows.push("no single row exceeds the tolerance; the set is jointly unsolvable".into());
    }
    rows
}

/// Advance one implicit step. Returns the new state and the Newton report
/// of the nonlinear solve.
pub fn step(
    sys: &LagrangianSystem,
    mu: &[f64],
    s0: &DVector<f64>,
    cfg: &StepConfig,
) -> Result<(DVector<f64>, NewtonReport)> {
    cfg.validate()?;
    let mode = cfg.mode;
    let theta_a = sys.theta_a_ref();
    check_guard(sys, mode, &theta_a, s0.as_slice())?;

    // Predictor: explicit Euler on the differential components.
    let mut x = s0.clone();
    if let Ok((rate, mask)) = explicit_rates(sys, mu, mode, &theta_a, s0.as_slice()) {
        for i in 0..x.len() {
            if mask[i] {
                x[i] += cfg.h * rate[i];
            }
        }
    }

    let rows = {
        let r0 = discrete_residual::<f64>(sys, mu, mode, &theta_a, s0.as_slice(), s0.as_slice(), cfg.h)?;
        r0.len()
    };
    let nan_vec = || DVector::from_element(rows, f64::NAN);
    let resid = |s1: &DVector<f64>| -> DVector<f64> {
        match discrete_residual::<f64>(sys, mu, mode, &theta_a, s0.as_slice(), s1.as_slice(), cfg.h)
        {
            Ok(r) => DVector::from_vec(r),
            Err(_) => nan_vec(),
        }
    };
    let jac = |s1: &DVector<f64>| -> DMatrix<f64> {
        jacobian_d1(
            |sd| discrete_residual::<D1>(sys, mu, mode, &theta_a, s0.as_slice(), sd, cfg.h),
            s1.as_slice(),
            rows,
        )
    };
    let newton = crate::linalg::damped_newton(
        resid,
        jac,
        &x,
        cfg.newton_tol,
        cfg.max_iters,
        cfg.damping_min,
        cfg.polish,
    );
    let (s1, report) = match newton {
        Ok(ok) => ok,
        Err(e) => {
            // Surface a typed assembly error (domain, regularity) when one
            // is the underlying cause.
            if let Err(inner) = discrete_residual::<f64>(
                sys,
                mu,
                mode,
                &theta_a,
                s0.as_slice(),
                x.as_slice(),
                cfg.h,
            ) {
                return Err(inner);
            }
            return Err(e);
        }
    };
    check_guard(sys, mode, &theta_a, s1.as_slice())?;
    Ok((s1, report))
}

fn check_guard(
    sys: &LagrangianSystem,
    mode: Mode,
    theta_a: &[f64],
    s: &[f64],
) -> Result<()> {
    if let Some(guard) = &sys.guard {
        let (q, _, _) = natural_jet::<f64>(sys, mode, theta_a, s);
        guard.check(&q)?;
    }
    Ok(())
}

/// Integrate from `state0` to time `T` with fixed steps, recording every
/// sample. A step failure stops the run and is reported (with its time)
/// alongside the partial trajectory.
pub fn integrate(
    sys: &LagrangianSystem,
    mu: &[f64],
    state0: &DVector<f64>,
    cfg: &StepConfig,
    t_end: f64,
) -> IntegrationRun {
    let failure_at = |t: f64, e: Error| Error::StepFailed {
        time: t,
        source: Box::new(e),
    };
    if let Err(e) = cfg.validate() {
        return IntegrationRun {
            trajectory: Trajectory {
                mode: cfg.mode,
                times: vec![],
                states: vec![],
                diagnostics: vec![],
            },
            failure: Some(e),
        };
    }
    let n_steps = (t_end / cfg.h).round().max(0.0) as usize;
    let theta_a = sys.theta_a_ref();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut diagnostics = Vec::with_capacity(n_steps + 1);

    let e0 = mode_energy(sys, mu, cfg.mode, &theta_a, state0.as_slice());
    let mut diag0 = SampleDiagnostics::default();
    diag0.momentum_drift = momentum_drift(sys, mu, cfg.mode, state0.as_slice());
    diag0.dirac_residual = algebraic_residual::<f64>(sys, mu, cfg.mode, &theta_a, state0.as_slice())
        .map(|r| r.iter().fold(0.0f64, |m, &x| m.max(x.abs())))
        .unwrap_or(f64::NAN);
    times.push(0.0);
    states.push(state0.clone());
    diagnostics.push(diag0);

    let mut failure = None;
    let mut s = state0.clone();
    for i in 0..n_steps {
        let t1 = (i + 1) as f64 * cfg.h;
        match step(sys, mu, &s, cfg) {
            Ok((s1, report)) => {
                let mut d = SampleDiagnostics {
                    momentum_drift: momentum_drift(sys, mu, cfg.mode, s1.as_slice()),
                    energy_drift: 0.0,
                    dirac_residual: continuous_residual_sup(
                        sys,
                        mu,
                        cfg.mode,
                        &theta_a,
                        s.as_slice(),
                        s1.as_slice(),
                        cfg.h,
                    ),
                    newton_iters: report.iters,
                    rank_defect: report.max_rank_defect,
                };
                let e1 = mode_energy(sys, mu, cfg.mode, &theta_a, s1.as_slice());
                d.energy_drift = match (e0, e1) {
                    (Some(a), Some(b)) => (b - a).abs(),
                    _ => f64::NAN,
                };
                times.push(t1);
                states.push(s1.clone());
                diagnostics.push(d);
                s = s1;
            }
            Err(e) => {
                failure = Some(failure_at(t1, e));
                break;
            }
        }
    }
    IntegrationRun {
        trajectory: Trajectory {
            mode: cfg.mode,
            times,
            states,
            diagnostics,
        },
        failure,
    }
}

/// Sup-norm of the continuous residual operator at the midpoint state
/// with the discrete rates of a step (the post-hoc consistency measure).
fn continuous_residual_sup(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: Mode,
    theta_a: &[f64],
    s0: &[f64],
    s1: &[f64],
    h: f64,
) -> f64 {
    let dim = s0.len();
    let mut mid = vec![0.0; dim];
    let mut rate = vec![0.0; dim];
    for i in 0..dim {
        mid[i] = 0.5 * (s0[i] + s1[i]);
        rate[i] = (s1[i] - s0[i]) / h;
    }
    match continuous_rows::<f64>(sys, mu, mode, theta_a, &mid, &rate) {
        Ok(rows) => rows.iter().fold(0.0f64, |m, &x| m.max(x.abs())),
        Err(_) => f64::NAN,
    }
}

/// Max |group quasi-momentum - mu| where the mode carries one.
fn momentum_drift(sys: &LagrangianSystem, mu: &[f64], mode: Mode, s: &[f64]) -> f64 {
    let sym = &sys.sym;
    let (n, m, k) = (sym.dims.n, sym.dims.m, sym.dims.k);
    match mode {
        Mode::Full => {
            let q = &s[..n];
            let p = &s[2 * n..];
            let pt = sym.quasi_momentum::<f64>(q, p);
            pt.iter()
                .zip(mu)
                .fold(0.0f64, |mx, (&a, &b)| mx.max((a - b).abs()))
        }
        Mode::MMu => {
            let pt = &s[n + 2 * m + k..];
            pt.iter()
                .zip(mu)
                .fold(0.0f64, |mx, (&a, &b)| mx.max((a - b).abs()))
        }
        // The reduced and classical systems carry mu as a parameter; the
        // group momentum is pinned identically.
        Mode::Reduced | Mode::Classical => 0.0,
    }
}

/// The mode's energy function at a flat state (None when it cannot be
/// evaluated, e.g. a group-singular classical state).
fn mode_energy(
    sys: &LagrangianSystem,
    mu: &[f64],
    mode: Mode,
    theta_a: &[f64],
    s: &[f64],
) -> Option<f64> {
    let sym = &sys.sym;
    let (n, m, k) = (sym.dims.n, sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    match mode {
        Mode::Full => {
            let (q, v, p) = (&s[..n], &s[n..2 * n], &s[2 * n..]);
            let pv: f64 = p.iter().zip(v).map(|(&a, &b)| a * b).sum();
            Some(pv - sys.l.at(q, v))
        }
        Mode::MMu => {
            let q = &s[..n];
            let v = &s[n..n + m];
            let vt = &s[n + m..n + m + k];
            let p = &s[n + m + k..n + 2 * m + k];
            let v_nat = sym.natural_velocity::<f64>(q, v, vt);
            let l = sys.l.at(q, &v_nat);
            let muv: f64 = mu.iter().zip(vt).map(|(&a, &b)| a * b).sum();
            let pv: f64 = p.iter().zip(v).map(|(&a, &b)| a * b).sum();
            Some(pv - (l - muv))
        }
        Mode::Reduced => {
            let x = &s[..m];
            let ti = &s[m..m + n_i];
            let v = &s[m + n_i..2 * m + n_i];
            let vh = &s[2 * m + n_i..2 * m + n_i + k];
            let p = &s[2 * m + n_i + k..];
            let r = reduced_routhian(sys, mu, theta_a, x, ti, v, vh);
            let pv: f64 = p.iter().zip(v).map(|(&a, &b)| a * b).sum();
            Some(pv - r)
        }
        Mode::Classical => {
            let x = &s[..m];
            let ti = &s[m..m + n_i];
            let v = &s[m + n_i..2 * m + n_i];
            let p = &s[2 * m + n_i..];
            let vh = solve_group_velocity::<f64>(sys, mu, theta_a, x, ti, v).ok()?;
            let r = reduced_routhian(sys, mu, theta_a, x, ti, v, &vh);
            let pv: f64 = p.iter().zip(v).map(|(&a, &b)| a * b).sum();
            Some(pv - r)
        }
    }
}

/// Rebuild a full natural-coordinate trajectory from a reduced one by
/// integrating the fiber rate `thetadot^A = vhat^a L^A_a - xdot^i
/// Lambda^A_i` with a midpoint quadrature, attaching the conserved group
/// momenta, and converting momenta back to natural components.
pub fn reconstruct(
    sys: &LagrangianSystem,
    mu: &[f64],
    reduced: &Trajectory,
    theta_a0: &[f64],
) -> Result<Trajectory> {
    if reduced.mode != Mode::Reduced {
        return Err(Error::Invalid(
            "reconstruction expects a reduced-mode trajectory".into(),
        ));
    }
    let sym = &sys.sym;
    let (n, m, k) = (sym.dims.n, sym.dims.m, sym.dims.k);
    let n_i = sym.split.i_idx.len();
    let k_mu = sym.split.a_idx.len();
    if theta_a0.len() != k_mu {
        return Err(Error::Invalid(format!(
            "{} fiber initial values for k_mu = {k_mu}",
            theta_a0.len()
        )));
    }

    let unpack = |s: &DVector<f64>| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            s.as_slice()[..m].to_vec(),
            s.as_slice()[m..m + n_i].to_vec(),
            s.as_slice()[m + n_i..2 * m + n_i].to_vec(),
            s.as_slice()[2 * m + n_i..2 * m + n_i + k].to_vec(),
            s.as_slice()[2 * m + n_i + k..].to_vec(),
        )
    };

    // Fiber rate at a (theta_a, averaged reduced data) pair.
    let fiber_rate = |theta_a: &[f64], x: &[f64], ti: &[f64], vh: &[f64], xdot: &[f64]| -> Vec<f64> {
        let qf = scatter_configuration::<f64>(sym, theta_a, x, ti);
        let lmat = sym.body_group_frame::<f64>(&qf);
        let lam = f64::mat(sym.lambda.as_ref(), &qf);
        sym.split
            .a_idx
            .iter()
            .map(|&aa| {
                let row = aa;
                let mut s = 0.0;
                for a in 0..k {
                    s += lmat.get(row, a) * vh[a];
                }
                for i in 0..m {
                    s -= lam.get(row, i) * xdot[i];
                }
                s
            })
            .collect()
    };

    // Natural (q, v, p) sample from reduced data plus fiber values.
    let natural_state = |theta_a: &[f64], s: &DVector<f64>| -> DVector<f64> {
        let (x, ti, v, vh, p) = unpack(s);
        let q = scatter_configuration::<f64>(sym, theta_a, &x, &ti);
        let v_nat = crate::routh::assemble_velocity::<f64>(sym, &q, &v, &vh);
        let p_nat = reduced_natural_momentum::<f64>(sys, mu, &q, &p);
        let mut out = Vec::with_capacity(3 * n);
        out.extend_from_slice(&q);
        out.extend_from_slice(&v_nat);
        out.extend_from_slice(&p_nat);
        DVector::from_vec(out)
    };

    let mut theta_a = theta_a0.to_vec();
    let mut states = Vec::with_capacity(reduced.len());
    let mut diagnostics = Vec::with_capacity(reduced.len());
    let mut e0 = None;
    let mut prev_full: Option<(DVector<f64>, f64)> = None;
    for i in 0..reduced.len() {
        let full = natural_state(&theta_a, &reduced.states[i]);
        let q = &full.as_slice()[..n];
        let v = &full.as_slice()[n..2 * n];
        let p = &full.as_slice()[2 * n..];
        let pv: f64 = p.iter().zip(v).map(|(&a, &b)| a * b).sum();
        let e = pv - sys.l.at(q, v);
        if e0.is_none() {
            e0 = Some(e);
        }
        let pt = sym.quasi_momentum::<f64>(q, p);
        let dirac_residual = match &prev_full {
            None => {
                let (_, lv) = lag_gradients::<f64>(sys.l.as_ref(), q, v);
                (0..n).fold(0.0f64, |mx, i| mx.max((p[i] - lv[i]).abs()))
            }
            Some((sp, h)) => continuous_residual_sup(
                sys,
                mu,
                Mode::Full,
                &[],
                sp.as_slice(),
                full.as_slice(),
                *h,
            ),
        };
        diagnostics.push(SampleDiagnostics {
            momentum_drift: pt
                .iter()
                .zip(mu)
                .fold(0.0f64, |mx, (&a, &b)| mx.max((a - b).abs())),
            energy_drift: (e - e0.unwrap()).abs(),
            dirac_residual,
            newton_iters: 0,
            rank_defect: 0,
        });
        states.push(full.clone());

        if i + 1 < reduced.len() {
            let h = reduced.times[i + 1] - reduced.times[i];
            prev_full = Some((full, h));
            let (x0, ti0, _, vh0, _) = unpack(&reduced.states[i]);
            let (x1, ti1, _, vh1, _) = unpack(&reduced.states[i + 1]);
            let x_avg: Vec<f64> = x0.iter().zip(&x1).map(|(&a, &b)| 0.5 * (a + b)).collect();
            let ti_avg: Vec<f64> = ti0.iter().zip(&ti1).map(|(&a, &b)| 0.5 * (a + b)).collect();
            let vh_avg: Vec<f64> = vh0.iter().zip(&vh1).map(|(&a, &b)| 0.5 * (a + b)).collect();
            let xdot: Vec<f64> = x0.iter().zip(&x1).map(|(&a, &b)| (b - a) / h).collect();
            // Midpoint fiber value by two fixed-point sweeps (second-order
            // accurate; exact when the frame is fiber-independent).
            let mut theta_mid = theta_a.clone();
            for _ in 0..2 {
                let r = fiber_rate(&theta_mid, &x_avg, &ti_avg, &vh_avg, &xdot);
                theta_mid = theta_a
                    .iter()
                    .zip(&r)
                    .map(|(&t0, &ri)| t0 + 0.5 * h * ri)
                    .collect();
            }
            let r = fiber_rate(&theta_mid, &x_avg, &ti_avg, &vh_avg, &xdot);
            for (t, &ri) in theta_a.iter_mut().zip(&r) {
                *t += h * ri;
            }
        }
    }
    Trajectory::new(Mode::Full, reduced.times.clone(), states, diagnostics)
}
