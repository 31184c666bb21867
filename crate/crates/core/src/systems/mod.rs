//! Factory constructors for benchmark systems.
//!
//! Each factory assembles a [`LagrangianSystem`] with its symmetry data,
//! domain guards and (where the model calls for them) declared extra
//! constraints:
//!
//! * [`make_cyclic_linear`] — a Lagrangian on the plane, linear in the
//!   cyclic velocity, with a user-supplied potential; degenerate in the
//!   group direction.
//! * [`make_point_vortices`] — planar point vortices in polar coordinates
//!   with angles taken relative to the first vortex, so the rotational
//!   symmetry acts by translation in a single angle; linear in all
//!   velocities.
//! * [`make_scalar_fields`] — two rotationally-symmetric oscillator pairs
//!   plus a velocity-free coordinate pair whose momenta vanish
//!   identically; ships with the induced constraints `x1 = 0`, `y1 = 0`
//!   declared (clear `extra_constraints` to drop them).
//! * [`make_central_force`] — a group-regular benchmark with a
//!   closed-form restricted Routhian.
//! * [`make_so3_algebraic`] and [`make_affine_group`] — non-Abelian
//!   fixtures. The rotation-algebra fixture carries its structure
//!   constants and adjoint as algebraic data over an identity coordinate
//!   frame (for kernel and splitting checks); the scale-and-shift fixture
//!   is geometric: its moving frame realizes the declared brackets and
//!   its adjoint satisfies the frame-derivative invariance identity.
//!
//! User potentials are parsed by [`parse_potential`]; see [`expr`].

pub mod expr;

pub use expr::{parse_potential, PotentialExpr};

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eval::{EvalScalar, JetDef, LagrangianDef, MatrixDef, MatrixFn};
use crate::frames::Dims;
use crate::routh::{ExtraConstraint, LagrangianSystem, StateGuard};
use crate::scalar::Scalar;
use crate::smat::{SMat, Ten3};
use crate::symmetry::{MuSplit, SymmetrySetup};

/// Two vortices closer than this hit the logarithmic singularity; a
/// radius smaller than this sits on the polar-chart axis.
pub const VORTEX_COLLISION_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------

/// A constant matrix, row-major.
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
        let mut m = SMat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m.set(r, c, S::from_f64(self.data[r * self.cols + c]));
            }
        }
        m
    }
}

fn const_mat(rows: usize, cols: usize, data: &[f64]) -> Arc<dyn MatrixFn> {
    debug_assert_eq!(data.len(), rows * cols);
    Arc::new(ConstMat {
        rows,
        cols,
        data: data.to_vec(),
    })
}

fn zeros_mat(rows: usize, cols: usize) -> Arc<dyn MatrixFn> {
    const_mat(rows, cols, &vec![0.0; rows * cols])
}

/// Require every free variable of `v` to be the single allowed name.
fn check_univariate(v: &PotentialExpr, allowed: &str) -> Result<()> {
    for name in v.variables() {
        if name != allowed {
            return Err(Error::Invalid(format!(
                "potential may only depend on `{allowed}`, found `{name}`"
            )));
        }
    }
    Ok(())
}

/// Rejects configurations where the user potential is undefined.
struct PotentialGuard {
    v: PotentialExpr,
    coord: usize,
    var: &'static str,
}

impl StateGuard for PotentialGuard {
    fn check(&self, q: &[f64]) -> Result<()> {
        self.v.eval(&[(self.var, q[self.coord])]).map(|_| ())
    }
}

// ---------------------------------------------------------------------
// Cyclic-linear system
// ---------------------------------------------------------------------

/// `L(x, y, v_x, v_y) = v_x^2 + v_x v_y - V(x)`: linear in the cyclic
/// velocity `v_y`, so the group-velocity Hessian vanishes identically.
struct CyclicLinearLag {
    v: PotentialExpr,
}

impl LagrangianDef for CyclicLinearLag {
    fn eval<S: EvalScalar>(&self, q: &[S], vel: &[S]) -> S {
        vel[0] * vel[0] + vel[0] * vel[1] - self.v.eval_or_nan(&[("x", q[0])])
    }
}

/// Plane system `L = v_x^2 + v_x v_y - V(x)` with translation symmetry
/// along `y` (coordinates `x`, `y`; trivial connection; Abelian group).
///
/// The momentum map is `p_y = v_x`, and the conserved level `v_x = mu`
/// drives the reduced dynamics `p_x = 2 v_x + v_y`, `dp_x = -V'(x)`.
/// `V` must be univariate in `x`.
pub fn make_cyclic_linear(v: PotentialExpr) -> Result<LagrangianSystem> {
    check_univariate(&v, "x")?;
    let dims = Dims::new(2, 1, 1)?;
    let sym = SymmetrySetup::new(
        dims,
        vec![1],
        zeros_mat(1, 1),
        const_mat(1, 1, &[1.0]),
        Ten3::zeros(1, 1, 1),
        None,
        MuSplit::all_isotropy(1),
    )?;
    let guard = Arc::new(PotentialGuard {
        v: v.clone(),
        coord: 0,
        var: "x",
    });
    Ok(LagrangianSystem::new(
        "cyclic-linear",
        vec!["x".into(), "y".into()],
        Arc::new(CyclicLinearLag { v }),
        sym,
        vec![],
        vec![1.5, 0.0],
        0.25,
    )?
    .with_guard(guard))
}

// ---------------------------------------------------------------------
// Central force
// ---------------------------------------------------------------------

/// `L = (mass/2)(v_r^2 + r^2 v_theta^2) - V(r)` on the punctured plane.
struct CentralForceLag {
    mass: f64,
    v: PotentialExpr,
}

impl LagrangianDef for CentralForceLag {
    fn eval<S: EvalScalar>(&self, q: &[S], vel: &[S]) -> S {
        let half_m = S::from_f64(0.5 * self.mass);
        half_m * (vel[0] * vel[0] + q[0] * q[0] * vel[1] * vel[1])
            - self.v.eval_or_nan(&[("r", q[0])])
    }
}

/// Rejects the polar-chart boundary `r <= 0` and configurations where
/// the potential is undefined.
struct RadialGuard {
    v: PotentialExpr,
}

impl StateGuard for RadialGuard {
    fn check(&self, q: &[f64]) -> Result<()> {
        if q[0] <= 0.0 {
            return Err(Error::Domain {
                what: format!("radius r = {} outside the chart r > 0", q[0]),
            });
        }
        self.v.eval(&[("r", q[0])]).map(|_| ())
    }
}

/// Central-force system `L = (mass/2)(v_r^2 + r^2 v_theta^2) - V(r)` on
/// coordinates `(r, theta)` with rotational symmetry along `theta`.
///
/// Group-regular everywhere `r > 0` (group-velocity Hessian
/// `mass * r^2`), so the group velocity can be eliminated explicitly and
/// the restricted Routhian takes the closed form
/// `(mass/2) v_r^2 - V(r) - mu^2 / (2 mass r^2)`.
pub fn make_central_force(mass: f64, v: PotentialExpr) -> Result<LagrangianSystem> {
    if !mass.is_finite() || mass <= 0.0 {
        return Err(Error::Invalid(format!(
            "mass must be positive and finite, got {mass}"
        )));
    }
    check_univariate(&v, "r")?;
    let dims = Dims::new(2, 1, 1)?;
    let sym = SymmetrySetup::new(
        dims,
        vec![1],
        zeros_mat(1, 1),
        const_mat(1, 1, &[1.0]),
        Ten3::zeros(1, 1, 1),
        None,
        MuSplit::all_isotropy(1),
    )?;
    let guard = Arc::new(RadialGuard { v: v.clone() });
    Ok(LagrangianSystem::new(
        "central-force",
        vec!["r".into(), "theta".into()],
        Arc::new(CentralForceLag { mass, v }),
        sym,
        vec![],
        vec![1.3, 0.0],
        0.3,
    )?
    .with_guard(guard))
}

// ---------------------------------------------------------------------
// Scalar-field oscillators
// ---------------------------------------------------------------------

/// `L = m2 (v_r^2 + r^2 v_theta^2) + m3 (v_rho^2 + rho^2 v_phi^2)
///    + r^2 v_theta + rho^2 v_phi - r^2 - rho^2 - x1^2 - y1^2`
/// on `(x1, y1, r, rho, theta, phi)`. The pair `(x1, y1)` carries no
/// velocity terms at all.
struct ScalarFieldLag {
    m2: f64,
    m3: f64,
}

impl LagrangianDef for ScalarFieldLag {
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
        let (x1, y1, r, rho) = (q[0], q[1], q[2], q[3]);
        let (vr, vrho, vth, vph) = (v[2], v[3], v[4], v[5]);
        S::from_f64(self.m2) * (vr * vr + r * r * vth * vth)
            + S::from_f64(self.m3) * (vrho * vrho + rho * rho * vph * vph)
            + r * r * vth
            + rho * rho * vph
            - r * r
            - rho * rho
            - x1 * x1
            - y1 * y1
    }
}

/// Phase-space constraint pinning one configuration coordinate to zero.
struct CoordinatePin {
    index: usize,
}

impl JetDef for CoordinatePin {
    fn eval<S: EvalScalar>(&self, q: &[S], _v: &[S], _p: &[S]) -> S {
        q[self.index]
    }
}

/// Torus-symmetric oscillator model on `(x1, y1, r, rho, theta, phi)`
/// with independent rotations along `theta` and `phi` (trivial
/// connection, Abelian group, `m2, m3 > 0`).
///
/// The coordinates `(x1, y1)` appear with no velocity terms, so their
/// momenta vanish identically (`p_{x1} = 0`, `p_{y1} = 0`) and momentum
/// balance forces `x1 = 0`, `y1 = 0` along any solution. Those two
/// conditions ship as declared extra constraints; clear
/// `extra_constraints` on the returned system to integrate without them.
pub fn make_scalar_fields(m2: f64, m3: f64) -> Result<LagrangianSystem> {
    if !m2.is_finite() || !m3.is_finite() || m2 <= 0.0 || m3 <= 0.0 {
        return Err(Error::Invalid(format!(
            "mass parameters must be positive and finite, got ({m2}, {m3})"
        )));
    }
    let dims = Dims::new(6, 2, 2)?;
    let sym = SymmetrySetup::new(
        dims,
        vec![4, 5],
        zeros_mat(2, 4),
        const_mat(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        Ten3::zeros(2, 2, 2),
        None,
        MuSplit::all_isotropy(2),
    )?;
    let extras = vec![
        ExtraConstraint {
            label: "x1 = 0".into(),
            f: Arc::new(CoordinatePin { index: 0 }),
        },
        ExtraConstraint {
            label: "y1 = 0".into(),
            f: Arc::new(CoordinatePin { index: 1 }),
        },
    ];
    LagrangianSystem::new(
        "scalar-fields",
        vec![
            "x1".into(),
            "y1".into(),
            "r".into(),
            "rho".into(),
            "theta".into(),
            "phi".into(),
        ],
        Arc::new(ScalarFieldLag { m2, m3 }),
        sym,
        extras,
        vec![0.0, 0.0, 1.0, 1.2, 0.0, 0.0],
        0.2,
    )
}

// ---------------------------------------------------------------------
// Point vortices
// ---------------------------------------------------------------------

/// Squared separation `|z_a - z_b|^2` in relative-angle polar
/// coordinates: the common rotation `phi_1` cancels in every difference,
/// so the angle of vortex 1 enters as zero and vortex `k >= 2` as
/// `phi_{k+1}`.
fn pair_dist2<S: Scalar>(q: &[S], n: usize, a: usize, b: usize) -> S {
    let alpha_a = if a == 0 { S::zero() } else { q[n + a] };
    let alpha_b = if b == 0 { S::zero() } else { q[n + b] };
    q[a] * q[a] + q[b] * q[b]
        - S::from_f64(2.0) * q[a] * q[b] * (alpha_a - alpha_b).cos()
}

/// First-order vortex Lagrangian
/// `L = sum_k gamma_k rho_k^2 (dalpha_k + v_phi1)
///    - sum_{a<b} gamma_a gamma_b ln |z_a - z_b|`
/// with `alpha_1 = 0` and `alpha_k = phi_k` for `k >= 2`; linear in all
/// velocities.
struct VortexLag {
    gamma: Vec<f64>,
}

impl LagrangianDef for VortexLag {
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
        let n = self.gamma.len();
        let vphi1 = v[n];
        let mut l = S::zero();
        for k in 0..n {
            let rho = q[k];
            let theta_dot = if k == 0 { vphi1 } else { v[n + k] + vphi1 };
            l = l + S::from_f64(self.gamma[k]) * rho * rho * theta_dot;
        }
        // ln |z_a - z_b| = ln(|z_a - z_b|^2) / 2.
        let half = S::from_f64(0.5);
        for a in 0..n {
            for b in (a + 1)..n {
                let d2 = pair_dist2(q, n, a, b);
                l = l - S::from_f64(self.gamma[a] * self.gamma[b]) * half * d2.ln();
            }
        }
        l
    }
}

/// Rejects coincident vortices (logarithmic singularity) and radii on
/// the polar-chart axis. Vortex indices in errors are 1-based.
struct VortexGuard {
    n: usize,
}

impl StateGuard for VortexGuard {
    fn check(&self, q: &[f64]) -> Result<()> {
        for k in 0..self.n {
            if q[k].abs() < VORTEX_COLLISION_TOL {
                return Err(Error::Domain {
                    what: format!(
                        "vortex {} radius {} on the polar-chart axis",
                        k + 1,
                        q[k]
                    ),
                });
            }
        }
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                let d = pair_dist2(q, self.n, a, b).max(0.0).sqrt();
                if d < VORTEX_COLLISION_TOL {
                    return Err(Error::CollisionSingularity {
                        i: a + 1,
                        j: b + 1,
                        dist: d,
                        time: None,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Planar point vortices with circulations `gamma` (at least two, all
/// nonzero), in coordinates `(rho_1..rho_N, phi_1..phi_N)` where `phi_1`
/// is the angle of vortex 1 and `phi_k` (`k >= 2`) the angle of vortex
/// `k` relative to vortex 1. Rotating every vortex together translates
/// `phi_1` alone, giving a circle symmetry with momentum map
/// `sum_k gamma_k rho_k^2` (the moment of circulation).
///
/// The Lagrangian is linear in all velocities (group-velocity Hessian
/// rank 0). Evaluation near a collision is rejected by the attached
/// guard with a typed error at separations below
/// [`VORTEX_COLLISION_TOL`].
pub fn make_point_vortices(gamma: &[f64]) -> Result<LagrangianSystem> {
    let n = gamma.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "need at least two vortices, got {n}"
        )));
    }
    if gamma.iter().any(|g| *g == 0.0 || !g.is_finite()) {
        return Err(Error::Invalid(
            "every circulation must be nonzero and finite".into(),
        ));
    }
    let dims = Dims::new(2 * n, 1, 1)?;
    let sym = SymmetrySetup::new(
        dims,
        vec![n],
        zeros_mat(1, 2 * n - 1),
        const_mat(1, 1, &[1.0]),
        Ten3::zeros(1, 1, 1),
        None,
        MuSplit::all_isotropy(1),
    )?;
    let mut coords = Vec::with_capacity(2 * n);
    for k in 1..=n {
        coords.push(format!("rho{k}"));
    }
    for k in 1..=n {
        coords.push(format!("phi{k}"));
    }
    // Probe: staggered radii and spread relative angles keep every pair
    // separated by more than the sampling box can close.
    let mut probe = Vec::with_capacity(2 * n);
    for k in 0..n {
        probe.push(1.0 + 0.4 * k as f64);
    }
    for k in 0..n {
        probe.push(if k == 0 {
            0.0
        } else {
            2.0 * PI * k as f64 / n as f64
        });
    }
    Ok(LagrangianSystem::new(
        "point-vortices",
        coords,
        Arc::new(VortexLag {
            gamma: gamma.to_vec(),
        }),
        sym,
        vec![],
        probe,
        0.1,
    )?
    .with_guard(Arc::new(VortexGuard { n })))
}

// ---------------------------------------------------------------------
// Rotation-algebra fixture (algebraic data)
// ---------------------------------------------------------------------

/// Rotation matrix `exp([w]x)` by the Rodrigues formula,
/// `I + sinc(t) [w]x + ((1 - cos t)/t^2) [w]x^2` with `t = |w|`, using
/// series branches near zero so the value at the origin is exactly the
/// identity.
struct RotationAd;

impl MatrixDef for RotationAd {
    fn shape(&self) -> (usize, usize) {
        (3, 3)
    }

    fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
        let w = [q[0], q[1], q[2]];
        let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
        let (s, c) = if t2.value() < 1e-6 {
            (
                S::one() - t2 * S::from_f64(1.0 / 6.0)
                    + t2 * t2 * S::from_f64(1.0 / 120.0),
                S::from_f64(0.5) - t2 * S::from_f64(1.0 / 24.0)
                    + t2 * t2 * S::from_f64(1.0 / 720.0),
            )
        } else {
            let t = t2.sqrt();
            (t.sin() / t, (S::one() - t.cos()) / t2)
        };
        // [w]x^2 = w w^T - t^2 I, so A = I + s [w]x + c (w w^T - t^2 I).
        let mut a = SMat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let mut val = w[i] * w[j] * c;
                if i == j {
                    val = val + S::one() - t2 * c;
                }
                a.set(i, j, val);
            }
        }
        a.set(0, 1, a.get(0, 1) - s * w[2]);
        a.set(0, 2, a.get(0, 2) + s * w[1]);
        a.set(1, 0, a.get(1, 0) + s * w[2]);
        a.set(1, 2, a.get(1, 2) - s * w[0]);
        a.set(2, 0, a.get(2, 0) - s * w[1]);
        a.set(2, 1, a.get(2, 1) + s * w[0]);
        a
    }
}

/// Free quadratic kinetic energy, configuration-independent.
struct FreeKineticLag;

impl LagrangianDef for FreeKineticLag {
    fn eval<S: EvalScalar>(&self, _q: &[S], v: &[S]) -> S {
        let mut l = S::zero();
        for &vi in v {
            l = l + vi * vi;
        }
        l * S::from_f64(0.5)
    }
}

/// Antisymmetric structure constants of the rotation algebra,
/// `C^c_{ab} = epsilon_{abc}`.
fn rotation_consts() -> Ten3<f64> {
    let mut c = Ten3::zeros(3, 3, 3);
    for &(cc, a, b) in &[(2usize, 0usize, 1usize), (0, 1, 2), (1, 2, 0)] {
        c.set(cc, a, b, 1.0);
        c.set(cc, b, a, -1.0);
    }
    c
}

/// Rotation-algebra fixture: three group coordinates, rotation structure
/// constants and the Rodrigues adjoint supplied as algebraic data over
/// an identity coordinate frame, with the isotropy split putting `axis`
/// (0, 1 or 2) in the isotropy block and the other two directions in the
/// complement.
///
/// Because the coordinate frame is not a group frame for these
/// constants, this fixture exercises kernel, splitting and adjoint
/// algebra only; the scale-and-shift fixture ([`make_affine_group`]) is
/// the geometric one whose frame realizes its declared brackets.
pub fn make_so3_algebraic(axis: usize) -> Result<LagrangianSystem> {
    if axis >= 3 {
        return Err(Error::Invalid(format!(
            "isotropy axis must be 0, 1 or 2, got {axis}"
        )));
    }
    let dims = Dims::new(3, 3, 1)?;
    let split = MuSplit {
        a_idx: vec![axis],
        i_idx: (0..3).filter(|&i| i != axis).collect(),
    };
    let sym = SymmetrySetup::new(
        dims,
        vec![0, 1, 2],
        zeros_mat(3, 0),
        const_mat(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        rotation_consts(),
        Some(Arc::new(RotationAd)),
        split,
    )?;
    LagrangianSystem::new(
        "so3-algebraic",
        vec!["theta1".into(), "theta2".into(), "theta3".into()],
        Arc::new(FreeKineticLag),
        sym,
        vec![],
        vec![0.2, -0.1, 0.15],
        0.1,
    )
}

// ---------------------------------------------------------------------
// Scale-and-shift group fixture (geometric frame)
// ---------------------------------------------------------------------

/// Action-generator frame on the scale-and-shift group `(a, b)` acting
/// on the line by `x -> a x + b` (with `a > 0`): columns are the
/// translation generator `(0, 1)` and the dilation generator `(a, b)`.
struct AffineK;

impl MatrixDef for AffineK {
    fn shape(&self) -> (usize, usize) {
        (2, 2)
    }

    fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
        let mut k = SMat::zeros(2, 2);
        k.set(0, 1, q[0]);
        k.set(1, 0, S::one());
        k.set(1, 1, q[1]);
        k
    }
}

/// Adjoint matrix of `(a, b)` in the (translation, dilation) basis:
/// conjugating a translation scales it by `a`; conjugating a dilation
/// picks up a translation component `-b`.
struct AffineAd;

impl MatrixDef for AffineAd {
    fn shape(&self) -> (usize, usize) {
        (2, 2)
    }

    fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
        let mut m = SMat::zeros(2, 2);
        m.set(0, 0, q[0]);
        m.set(0, 1, -q[1]);
        m.set(1, 1, S::one());
        m
    }
}

/// Kinetic energy of the left-invariant metric, `(v_a^2 + v_b^2)/(2a^2)`.
struct AffineLag;

impl LagrangianDef for AffineLag {
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S {
        (v[0] * v[0] + v[1] * v[1]) / (S::from_f64(2.0) * q[0] * q[0])
    }
}

/// Structure constants of the scale-and-shift algebra in the
/// (translation, dilation) basis: the frame brackets close on the
/// translation direction, `C^0_{01} = -1`.
fn affine_consts() -> Ten3<f64> {
    let mut c = Ten3::zeros(2, 2, 2);
    c.set(0, 0, 1, -1.0);
    c.set(0, 1, 0, 1.0);
    c
}

/// Scale-and-shift group fixture on coordinates `(a, b)`, `a > 0`: a
/// two-dimensional non-Abelian group whose action-generator frame
/// genuinely realizes the declared structure constants, with the
/// adjoint matrix `[[a, -b], [0, 1]]` satisfying the frame-derivative
/// invariance identity. Exercises the geometric body-frame path end to
/// end (bracket realization, adjoint inverses, frame-derivative check).
pub fn make_affine_group() -> Result<LagrangianSystem> {
    let dims = Dims::new(2, 2, 2)?;
    let sym = SymmetrySetup::new(
        dims,
        vec![0, 1],
        zeros_mat(2, 0),
        Arc::new(AffineK),
        affine_consts(),
        Some(Arc::new(AffineAd)),
        MuSplit::all_isotropy(2),
    )?;
    LagrangianSystem::new(
        "affine-group",
        vec!["a".into(), "b".into()],
        Arc::new(AffineLag),
        sym,
        vec![],
        vec![1.4, 0.3],
        0.25,
    )
}
