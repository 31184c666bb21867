//! Anholonomic frames on configuration space and the induced
//! quasi-velocity / quasi-momentum transforms on the Pontryagin bundle.
//!
//! A frame is a field of bases `Z_alpha = Z^beta_alpha d/dq^beta` with
//! inverse `W = Z^{-1}`. Velocities and momenta transform as
//! `vq = W v`, `pq = Z^T p`, which preserves the pairing `<p, v>`.
//! The anholonomity coefficients `R^alpha_{beta gamma}` express the frame
//! brackets, `[Z_beta, Z_gamma] = R^alpha_{beta gamma} Z_alpha`; they are
//! computed from derivatives of `Z` and cross-checked against the equivalent
//! expression in derivatives of `W`.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::eval::{
    lag_gradients, mat_directional, mat_partial, EvalScalar, LagrangianFn, Lift, MatrixDef,
    MatrixFn,
};
use crate::smat::{SMat, Ten3};

/// Dimension bookkeeping for a configuration space `Q` with a symmetry
/// group `G` acting on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// dim Q.
    pub n: usize,
    /// dim G (group directions).
    pub k: usize,
    /// dim Q - dim G (shape directions).
    pub m: usize,
    /// dim G_mu (isotropy subgroup of the momentum value).
    pub k_mu: usize,
}

impl Dims {
    pub fn new(n: usize, k: usize, k_mu: usize) -> Result<Self> {
        if k > n {
            return Err(Error::Invalid(format!("group dim {k} exceeds n = {n}")));
        }
        if k_mu > k {
            return Err(Error::Invalid(format!(
                "isotropy dim {k_mu} exceeds group dim {k}"
            )));
        }
        Ok(Dims {
            n,
            k,
            m: n - k,
            k_mu,
        })
    }
}

/// A point of the Pontryagin bundle in natural coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PontryaginPoint {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub p: DVector<f64>,
}

impl PontryaginPoint {
    pub fn new(q: Vec<f64>, v: Vec<f64>, p: Vec<f64>) -> Self {
        assert!(q.len() == v.len() && v.len() == p.len(), "mixed dimensions");
        PontryaginPoint {
            q: DVector::from_vec(q),
            v: DVector::from_vec(v),
            p: DVector::from_vec(p),
        }
    }
}

/// A point of the Pontryagin bundle in frame (quasi) coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct QuasiPoint {
    pub q: DVector<f64>,
    pub vq: DVector<f64>,
    pub pq: DVector<f64>,
}

/// The frame and inverse-frame matrices evaluated at a configuration.
#[derive(Clone, Debug)]
pub struct FrameAt<S> {
    pub z: SMat<S>,
    pub w: SMat<S>,
}

/// Tolerance for `Z W = I` verification in [`Frame::eval`].
pub const FRAME_INVERSE_TOL: f64 = 1e-10;
/// `|det Z|` below this is a singular frame.
pub const FRAME_DET_TOL: f64 = 1e-12;
/// Default tolerance for agreement of the two anholonomity formulas.
pub const ANHOLONOMITY_TOL: f64 = 1e-6;

/// An anholonomic frame: `Z` holds the frame fields as columns, `W` its
/// inverse. An optional closed-form anholonomity tensor is cross-checked
/// whenever the coefficients are computed.
#[derive(Clone)]
pub struct Frame {
    pub n: usize,
    pub z: Arc<dyn MatrixFn>,
    pub w: Arc<dyn MatrixFn>,
    pub analytic_r: Option<Arc<dyn Fn(&[f64]) -> Ten3<f64> + Send + Sync>>,
}

struct IdentityMat(usize);

impl MatrixDef for IdentityMat {
    fn shape(&self) -> (usize, usize) {
        (self.0, self.0)
    }
    fn eval<S: EvalScalar>(&self, _q: &[S]) -> SMat<S> {
        SMat::identity(self.0)
    }
}

impl Frame {
    pub fn new(n: usize, z: Arc<dyn MatrixFn>, w: Arc<dyn MatrixFn>) -> Self {
        assert_eq!(z.shape(), (n, n), "Z must be n x n");
        assert_eq!(w.shape(), (n, n), "W must be n x n");
        Frame {
            n,
            z,
            w,
            analytic_r: None,
        }
    }

    /// The coordinate frame `Z = W = I` (identically zero anholonomity).
    pub fn coordinate(n: usize) -> Self {
        Frame::new(n, Arc::new(IdentityMat(n)), Arc::new(IdentityMat(n)))
    }

    pub fn with_analytic_r(
        mut self,
        r: Arc<dyn Fn(&[f64]) -> Ten3<f64> + Send + Sync>,
    ) -> Self {
        self.analytic_r = Some(r);
        self
    }

    /// Evaluate both matrices, verifying invertibility and that the stored
    /// `W` really is the inverse of `Z`.
    pub fn eval(&self, q: &[f64]) -> Result<FrameAt<f64>> {
        let at = self.eval_unchecked::<f64>(q);
        let det = at.z.det();
        if det.abs() < FRAME_DET_TOL {
            return Err(Error::SingularFrame {
                detail: format!("|det Z| = {:.3e} at q = {q:?}", det.abs()),
            });
        }
        let prod = at.z.matmul(&at.w);
        let dev = prod.sub(&SMat::identity(self.n)).max_abs();
        if dev > FRAME_INVERSE_TOL {
            return Err(Error::SingularFrame {
                detail: format!("Z W deviates from identity by {dev:.3e} at q = {q:?}"),
            });
        }
        Ok(at)
    }

    /// Evaluate both matrices at any scalar type, without verification.
    pub fn eval_unchecked<S: EvalScalar>(&self, q: &[S]) -> FrameAt<S> {
        FrameAt {
            z: S::mat(self.z.as_ref(), q),
            w: S::mat(self.w.as_ref(), q),
        }
    }

    /// Natural coordinates -> frame coordinates: `vq = W v`, `pq = Z^T p`.
    pub fn to_quasi(&self, pt: &PontryaginPoint) -> Result<QuasiPoint> {
        let at = self.eval(pt.q.as_slice())?;
        let vq = at.w.matvec(pt.v.as_slice());
        let pq = at.z.transpose().matvec(pt.p.as_slice());
        Ok(QuasiPoint {
            q: pt.q.clone(),
            vq: DVector::from_vec(vq),
            pq: DVector::from_vec(pq),
        })
    }

    /// Frame coordinates -> natural coordinates: `v = Z vq`, `p = W^T pq`.
    pub fn from_quasi(&self, qpt: &QuasiPoint) -> Result<PontryaginPoint> {
        let at = self.eval(qpt.q.as_slice())?;
        let v = at.z.matvec(qpt.vq.as_slice());
        let p = at.w.transpose().matvec(qpt.pq.as_slice());
        Ok(PontryaginPoint {
            q: qpt.q.clone(),
            v: DVector::from_vec(v),
            p: DVector::from_vec(p),
        })
    }

    /// Anholonomity coefficients `R^alpha_{beta gamma}` from derivatives of
    /// `Z`, cross-checked against the expression in derivatives of `W` (and
    /// against `analytic_r` when present) to `tol`.
    pub fn anholonomity(&self, q: &[f64], tol: f64) -> Result<Ten3<f64>> {
        let r = self.anholonomity_unchecked::<f64>(q);
        let r_w = self.anholonomity_from_w(q);
        check_tensor_agreement(&r, &r_w, tol, "W-derivative")?;
        if let Some(analytic) = &self.analytic_r {
            let ra = analytic(q);
            for a in 0..self.n {
                for b in 0..self.n {
                    for g in 0..self.n {
                        let anti = ra.get(a, b, g) + ra.get(a, g, b);
                        if anti != 0.0 {
                            return Err(Error::Invalid(format!(
                                "analytic anholonomity is not antisymmetric at ({a},{b},{g}): {anti:e}"
                            )));
                        }
                    }
                }
            }
            check_tensor_agreement(&r, &ra, tol, "analytic")?;
        }
        Ok(r)
    }

    /// Anholonomity from the primary formula
    /// `R^a_{bg} = Z^t_b W^a_d dZ^d_g/dq^t - Z^t_g W^a_d dZ^d_b/dq^t`,
    /// at any liftable scalar, with no cross-validation.
    pub fn anholonomity_unchecked<S: Lift>(&self, q: &[S]) -> Ten3<S> {
        let n = self.n;
        let at = self.eval_unchecked::<S>(q);
        let mut r: Ten3<S> = Ten3::zeros(n, n, n);
        for tau in 0..n {
            let dz = mat_partial::<S>(self.z.as_ref(), q, tau);
            let p = at.w.matmul(&dz); // P^a_g = W^a_d dZ^d_g/dq^tau
            for alpha in 0..n {
                for beta in 0..n {
                    for gamma in (beta + 1)..n {
                        let term = at.z.get(tau, beta) * p.get(alpha, gamma)
                            - at.z.get(tau, gamma) * p.get(alpha, beta);
                        let cur = r.get(alpha, beta, gamma);
                        r.set(alpha, beta, gamma, cur + term);
                    }
                }
            }
        }
        // Antisymmetry in the lower indices holds by construction.
        for alpha in 0..n {
            for beta in 0..n {
                for gamma in (beta + 1)..n {
                    r.set(alpha, gamma, beta, -r.get(alpha, beta, gamma));
                }
            }
        }
        r
    }

    /// The same coefficients from derivatives of `W`:
    /// `R^a_{bg} = -(Z^t_b dW^a_d/dq^t Z^d_g - Z^t_g dW^a_d/dq^t Z^d_b)`.
    fn anholonomity_from_w(&self, q: &[f64]) -> Ten3<f64> {
        let n = self.n;
        let at = self.eval_unchecked::<f64>(q);
        let mut r: Ten3<f64> = Ten3::zeros(n, n, n);
        for tau in 0..n {
            let dw = mat_partial::<f64>(self.w.as_ref(), q, tau);
            let p = dw.matmul(&at.z); // P^a_g = dW^a_d/dq^tau Z^d_g
            for alpha in 0..n {
                for beta in 0..n {
                    for gamma in (beta + 1)..n {
                        let term = at.z.get(tau, beta) * p.get(alpha, gamma)
                            - at.z.get(tau, gamma) * p.get(alpha, beta);
                        let cur = r.get(alpha, beta, gamma);
                        r.set(alpha, beta, gamma, cur - term);
                    }
                }
            }
        }
        for alpha in 0..n {
            for beta in 0..n {
                for gamma in (beta + 1)..n {
                    r.set(alpha, gamma, beta, -r.get(alpha, beta, gamma));
                }
            }
        }
        r
    }

    /// Complete and vertical lifts of every frame field applied to a
    /// tangent-bundle function: returns `(Z^C_alpha(f), Z^V_alpha(f))`.
    ///
    /// `Z^V_alpha(f) = Z^beta_alpha df/dv^beta` and
    /// `Z^C_alpha(f) = Z^beta_alpha df/dq^beta
    ///                 + (dZ^beta_alpha/dq^gamma v^gamma) df/dv^beta`.
    pub fn lift_derivatives<S: Lift>(
        &self,
        f: &dyn LagrangianFn,
        q: &[S],
        v: &[S],
    ) -> (Vec<S>, Vec<S>) {
        let n = self.n;
        let at = self.eval_unchecked::<S>(q);
        let (dq, dv) = lag_gradients::<S>(f, q, v);
        let dz_v = mat_directional::<S>(self.z.as_ref(), q, v);
        let mut zc = Vec::with_capacity(n);
        let mut zv = Vec::with_capacity(n);
        for alpha in 0..n {
            let mut c = S::zero();
            let mut vert = S::zero();
            for beta in 0..n {
                c = c + at.z.get(beta, alpha) * dq[beta] + dz_v.get(beta, alpha) * dv[beta];
                vert = vert + at.z.get(beta, alpha) * dv[beta];
            }
            zc.push(c);
            zv.push(vert);
        }
        (zc, zv)
    }
}

fn check_tensor_agreement(
    r: &Ten3<f64>,
    other: &Ten3<f64>,
    tol: f64,
    _label: &str,
) -> Result<()> {
    let (d0, d1, d2) = r.dims();
    let mut max_dev = 0.0;
    let mut worst = (0, 0, 0);
    for a in 0..d0 {
        for b in 0..d1 {
            for g in 0..d2 {
                let dev = (r.get(a, b, g) - other.get(a, b, g)).abs();
                if dev > max_dev {
                    max_dev = dev;
                    worst = (a, b, g);
                }
            }
        }
    }
    if max_dev > tol {
        return Err(Error::DerivativeMismatch {
            max_dev,
            tol,
            alpha: worst.0,
            beta: worst.1,
            gamma: worst.2,
        });
    }
    Ok(())
}
