//! Symmetry data for a Lagrangian system: the invariant moving frame, its
//! curvature, the momentum map, and the Lie-algebra splitting adapted to a
//! momentum value.
//!
//! Group directions are a designated subset of the configuration
//! coordinates. The moving frame combines horizontal fields
//! `X_i = d/dx^i - Lambda^b_i d/dtheta^b` with invariant group fields
//! `E_a = K^b_a d/dtheta^b`; its bracket table is
//! `[X_i, X_j] = B^a_{ij} E_a`, `[X_i, E_a] = 0`,
//! `[E_a, E_b] = -C^c_{ab} E_c`, which [`SymmetrySetup::curvature`]
//! extracts and verifies from the frame's anholonomity coefficients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eval::{lag_grad_v, mat_partial, EvalScalar, LagrangianFn, Lift, MatrixDef, MatrixFn};
use crate::frames::{Dims, Frame};
use crate::smat::{SMat, Ten3};

/// Mixed frame brackets and algebra realization must vanish to this.
pub const INVARIANCE_TOL: f64 = 1e-8;
/// Splitting identities must hold to this.
pub const SPLIT_TOL: f64 = 1e-12;

/// Index split of the group directions relative to a momentum value:
/// `a_idx` spans the isotropy subalgebra (directions fixing mu under the
/// coadjoint action), `i_idx` an invariant complement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MuSplit {
    pub a_idx: Vec<usize>,
    pub i_idx: Vec<usize>,
}

impl MuSplit {
    /// The Abelian case: every direction is isotropy.
    pub fn all_isotropy(k: usize) -> Self {
        MuSplit {
            a_idx: (0..k).collect(),
            i_idx: Vec::new(),
        }
    }
}

/// Symmetry structure over a configuration space.
#[derive(Clone)]
pub struct SymmetrySetup {
    pub dims: Dims,
    /// Coordinate indices of the group directions (increasing).
    pub group_idx: Vec<usize>,
    /// Coordinate indices of the shape directions (complement, increasing).
    pub shape_idx: Vec<usize>,
    /// Connection coefficients `Lambda^b_i` (k x m): row = group coordinate
    /// slot, column = shape slot.
    pub lambda: Arc<dyn MatrixFn>,
    /// Invariant group frame `K^b_a` (k x k): row = group coordinate slot,
    /// column = algebra index.
    pub kmat: Arc<dyn MatrixFn>,
    /// Structure constants `C^c_{ab}`, indexed `(c, a, b)`.
    pub struct_consts: Ten3<f64>,
    /// Change to the body frame, `A(q)` with `E-hat_a = A^b_a E_b`
    /// (the adjoint of the group element at `q`); identity when absent.
    pub ad: Option<Arc<dyn MatrixFn>>,
    pub split: MuSplit,
}

impl SymmetrySetup {
    pub fn new(
        dims: Dims,
        group_idx: Vec<usize>,
        lambda: Arc<dyn MatrixFn>,
        kmat: Arc<dyn MatrixFn>,
        struct_consts: Ten3<f64>,
        ad: Option<Arc<dyn MatrixFn>>,
        split: MuSplit,
    ) -> Result<Self> {
        let (n, k, m) = (dims.n, dims.k, dims.m);
        if group_idx.len() != k {
            return Err(Error::Invalid(format!(
                "expected {k} group coordinate indices, got {}",
                group_idx.len()
            )));
        }
        if group_idx.iter().any(|&g| g >= n) {
            return Err(Error::Invalid("group index out of range".into()));
        }
        if group_idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("group indices must be increasing".into()));
        }
        if lambda.shape() != (k, m) {
            return Err(Error::Invalid(format!(
                "Lambda must be {k} x {m}, got {:?}",
                lambda.shape()
            )));
        }
        if kmat.shape() != (k, k) {
            return Err(Error::Invalid(format!(
                "K must be {k} x {k}, got {:?}",
                kmat.shape()
            )));
        }
        if struct_consts.dims() != (k, k, k) {
            return Err(Error::Invalid("structure constants must be k x k x k".into()));
        }
        for c in 0..k {
            for a in 0..k {
                for b in 0..k {
                    if struct_consts.get(c, a, b) != -struct_consts.get(c, b, a) {
                        return Err(Error::Invalid(format!(
                            "structure constants not antisymmetric at ({c},{a},{b})"
                        )));
                    }
                }
            }
        }
        if let Some(ad) = &ad {
            if ad.shape() != (k, k) {
                return Err(Error::Invalid(format!(
                    "Ad must be {k} x {k}, got {:?}",
                    ad.shape()
                )));
            }
        }
        let mut seen = vec![false; k];
        for &a in split.a_idx.iter().chain(&split.i_idx) {
            if a >= k || seen[a] {
                return Err(Error::Invalid(
                    "mu-split must partition the algebra indices".into(),
                ));
            }
            seen[a] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Invalid(
                "mu-split must cover every algebra index".into(),
            ));
        }
        if split.a_idx.len() != dims.k_mu {
            return Err(Error::Invalid(format!(
                "isotropy block has {} indices but k_mu = {}",
                split.a_idx.len(),
                dims.k_mu
            )));
        }
        let shape_idx: Vec<usize> = (0..n).filter(|i| !group_idx.contains(i)).collect();
        Ok(SymmetrySetup {
            dims,
            group_idx,
            shape_idx,
            lambda,
            kmat,
            struct_consts,
            ad,
            split,
        })
    }

    /// The combined frame `(X_1..X_m, E_1..E_k)` as a [`Frame`] on `Q`.
    /// Frame indices are always ordered shape-then-group, whatever the
    /// coordinate layout.
    pub fn moving_frame(&self) -> Frame {
        let z = Arc::new(MovingZ {
            setup: self.clone(),
        });
        let w = Arc::new(MovingW {
            setup: self.clone(),
        });
        Frame::new(self.dims.n, z, w)
    }

    /// Curvature `B^a_{ij}` of the connection and its body-frame version
    /// `Bhat = A^{-1} B`, extracted from the moving frame's anholonomity
    /// after verifying the bracket table.
    pub fn curvature(&self, q: &[f64]) -> Result<Curvature> {
        let frame = self.moving_frame();
        let (m, k) = (self.dims.m, self.dims.k);
        let r = frame.anholonomity(q, crate::frames::ANHOLONOMITY_TOL)?;
        // Mixed brackets [X_i, E_a] must vanish entirely.
        for alpha in 0..self.dims.n {
            for i in 0..m {
                for a in 0..k {
                    let val = r.get(alpha, i, m + a);
                    if val.abs() > INVARIANCE_TOL {
                        return Err(Error::InvarianceViolation {
                            what: format!("[X_{i}, E_{a}] component {alpha}"),
                            value: val,
                            tol: INVARIANCE_TOL,
                        });
                    }
                }
            }
        }
        // Shape-shape brackets stay in the group span; group-group brackets
        // realize the declared structure constants with a minus sign.
        for i in 0..m {
            for j in 0..m {
                for jp in 0..m {
                    let val = r.get(jp, i, j);
                    if val.abs() > INVARIANCE_TOL {
                        return Err(Error::InvarianceViolation {
                            what: format!("[X_{i}, X_{j}] shape component {jp}"),
                            value: val,
                            tol: INVARIANCE_TOL,
                        });
                    }
                }
            }
        }
        for a in 0..k {
            for b in 0..k {
                for j in 0..m {
                    let val = r.get(j, m + a, m + b);
                    if val.abs() > INVARIANCE_TOL {
                        return Err(Error::InvarianceViolation {
                            what: format!("[E_{a}, E_{b}] shape component {j}"),
                            value: val,
                            tol: INVARIANCE_TOL,
                        });
                    }
                }
                for c in 0..k {
                    let val = r.get(m + c, m + a, m + b) + self.struct_consts.get(c, a, b);
                    if val.abs() > INVARIANCE_TOL {
                        return Err(Error::InvarianceViolation {
                            what: format!("[E_{a}, E_{b}] vs -C^{c}_{{{a}{b}}}"),
                            value: val,
                            tol: INVARIANCE_TOL,
                        });
                    }
                }
            }
        }
        let b = self.curvature_unchecked::<f64>(q);
        let a_inv = self
            .body_frame(q)
            .inverse()
            .map_err(|_| Error::SingularFrame {
                detail: "body-frame change A is singular".into(),
            })?;
        let mut b_hat: Ten3<f64> = Ten3::zeros(k, m, m);
        for a in 0..k {
            for i in 0..m {
                for j in 0..m {
                    let mut s = 0.0;
                    for bb in 0..k {
                        s += a_inv.get(a, bb) * b.get(bb, i, j);
                    }
                    b_hat.set(a, i, j, s);
                }
            }
        }
        Ok(Curvature { b, b_hat })
    }

    /// `B^a_{ij}` at any liftable scalar, no verification.
    pub fn curvature_unchecked<S: Lift>(&self, q: &[S]) -> Ten3<S> {
        let frame = self.moving_frame();
        let (m, k) = (self.dims.m, self.dims.k);
        let r = frame.anholonomity_unchecked::<S>(q);
        let mut b: Ten3<S> = Ten3::zeros(k, m, m);
        for a in 0..k {
            for i in 0..m {
                for j in 0..m {
                    b.set(a, i, j, r.get(m + a, i, j));
                }
            }
        }
        b
    }

    /// The body-frame change `A(q)` (identity when no adjoint was declared).
    pub fn body_frame(&self, q: &[f64]) -> SMat<f64> {
        self.body_frame_at::<f64>(q)
    }

    pub fn body_frame_at<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
        match &self.ad {
            Some(ad) => S::mat(ad.as_ref(), q),
            None => SMat::identity(self.dims.k),
        }
    }

    /// Body-frame change with the invariance condition
    /// `E_a(A^c_b) = C^c_{ad} A^d_b` verified at `q`.
    pub fn body_frame_checked(&self, q: &[f64]) -> Result<SMat<f64>> {
        let a = self.body_frame(q);
        let Some(ad) = &self.ad else {
            return Ok(a);
        };
        let k = self.dims.k;
        let km = f64::mat(self.kmat.as_ref(), q);
        // dA/dtheta^e for each group coordinate slot.
        let das: Vec<SMat<f64>> = (0..k)
            .map(|e| mat_partial::<f64>(ad.as_ref(), q, self.group_idx[e]))
            .collect();
        for ai in 0..k {
            for c in 0..k {
                for b in 0..k {
                    let mut lhs = 0.0;
                    for e in 0..k {
                        lhs += km.get(e, ai) * das[e].get(c, b);
                    }
                    let mut rhs = 0.0;
                    for d in 0..k {
                        rhs += self.struct_consts.get(c, ai, d) * a.get(d, b);
                    }
                    let dev = (lhs - rhs).abs();
                    if dev > INVARIANCE_TOL {
                        return Err(Error::InvarianceViolation {
                            what: format!("E_{ai}(A^{c}_{b}) - C^{c}_{{{ai}d}} A^d_{b}"),
                            value: dev,
                            tol: INVARIANCE_TOL,
                        });
                    }
                }
            }
        }
        Ok(a)
    }

    /// Body group frame `L = K A` (columns are the body fields' theta
    /// components).
    pub fn body_group_frame<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
        let km = S::mat(self.kmat.as_ref(), q);
        km.matmul(&self.body_frame_at::<S>(q))
    }

    /// Momentum map components `p~_a = K^b_a dL/dv^{theta^b}` (the vertical
    /// group-frame derivatives of `L`).
    pub fn momentum_map<S: Lift>(&self, l: &dyn LagrangianFn, q: &[S], v: &[S]) -> Vec<S> {
        let dv = lag_grad_v::<S>(l, q, v);
        let km = S::mat(self.kmat.as_ref(), q);
        let k = self.dims.k;
        (0..k)
            .map(|a| {
                let mut s = S::zero();
                for b in 0..k {
                    s = s + km.get(b, a) * dv[self.group_idx[b]];
                }
                s
            })
            .collect()
    }

    /// Group components of the quasi-momentum of a state momentum `p`:
    /// `p~_a = K^b_a p_{theta^b}`.
    pub fn quasi_momentum<S: EvalScalar>(&self, q: &[S], p: &[S]) -> Vec<S> {
        let km = S::mat(self.kmat.as_ref(), q);
        let k = self.dims.k;
        (0..k)
            .map(|a| {
                let mut s = S::zero();
                for b in 0..k {
                    s = s + km.get(b, a) * p[self.group_idx[b]];
                }
                s
            })
            .collect()
    }

    /// Natural velocity from shape/group quasi-velocities: shape slots
    /// carry `v`, group slots carry `K vtilde - Lambda v`.
    pub fn natural_velocity<S: EvalScalar>(&self, q: &[S], v: &[S], vtilde: &[S]) -> Vec<S> {
        let km = S::mat(self.kmat.as_ref(), q);
        let lam = S::mat(self.lambda.as_ref(), q);
        let mut vn = vec![S::zero(); self.dims.n];
        for (i, &xi) in self.shape_idx.iter().enumerate() {
            vn[xi] = v[i];
        }
        for (b, &tb) in self.group_idx.iter().enumerate() {
            let mut s = S::zero();
            for a in 0..self.dims.k {
                s = s + km.get(b, a) * vtilde[a];
            }
            for (i, _) in self.shape_idx.iter().enumerate() {
                s = s - lam.get(b, i) * v[i];
            }
            vn[tb] = s;
        }
        vn
    }

    /// Group quasi-velocity components of a full velocity (or rate) vector:
    /// `u^a = (K^{-1})^a_b (v^{theta_b} + Lambda^b_i v^{x_i})`.
    ///
    /// If `K` is singular at `q` the result is NaN-filled, which downstream
    /// solvers reject; callers needing a diagnosis should evaluate the
    /// moving frame first.
    pub fn group_quasi_velocity<S: EvalScalar>(&self, q: &[S], v: &[S]) -> Vec<S> {
        let km = S::mat(self.kmat.as_ref(), q);
        let lam = S::mat(self.lambda.as_ref(), q);
        let k = self.dims.k;
        let rhs: Vec<S> = (0..k)
            .map(|b| {
                let mut s = v[self.group_idx[b]];
                for (i, &xi) in self.shape_idx.iter().enumerate() {
                    s = s + lam.get(b, i) * v[xi];
                }
                s
            })
            .collect();
        match km.solve(&rhs) {
            Ok(u) => u,
            Err(_) => vec![S::from_f64(f64::NAN); k],
        }
    }

    /// Verify the three identities the mu-split must satisfy:
    /// the isotropy block is a subalgebra, it annihilates `mu` under the
    /// coadjoint action, and the complement is invariant under it.
    pub fn validate_splitting(&self, mu: &[f64]) -> Result<SplitReport> {
        if mu.len() != self.dims.k {
            return Err(Error::Invalid(format!(
                "mu has {} components, expected {}",
                mu.len(),
                self.dims.k
            )));
        }
        let c = &self.struct_consts;
        let mut report = SplitReport::default();
        // Identity 1: C^J_{AB} = 0 (isotropy closes on itself).
        for &a in &self.split.a_idx {
            for &b in &self.split.a_idx {
                for &j in &self.split.i_idx {
                    let v = c.get(j, a, b).abs();
                    report.subalgebra = report.subalgebra.max(v);
                    if v > SPLIT_TOL {
                        return Err(Error::InvalidSplit {
                            identity: "C^J_AB = 0 (isotropy subalgebra)".into(),
                            indices: vec![j, a, b],
                            value: v,
                        });
                    }
                }
            }
        }
        // Identity 2: mu_c C^c_{Ab} = 0 (isotropy annihilates mu).
        for &a in &self.split.a_idx {
            for b in 0..self.dims.k {
                let mut s = 0.0;
                for cc in 0..self.dims.k {
                    s += mu[cc] * c.get(cc, a, b);
                }
                let v = s.abs();
                report.annihilates_mu = report.annihilates_mu.max(v);
                if v > SPLIT_TOL {
                    return Err(Error::InvalidSplit {
                        identity: "mu_c C^c_Ab = 0 (isotropy of mu)".into(),
                        indices: vec![a, b],
                        value: v,
                    });
                }
            }
        }
        // Identity 3: C^B_{AI} = 0 (complement invariant under isotropy).
        for &a in &self.split.a_idx {
            for &i in &self.split.i_idx {
                for &b in &self.split.a_idx {
                    let v = c.get(b, a, i).abs();
                    report.invariant_complement = report.invariant_complement.max(v);
                    if v > SPLIT_TOL {
                        return Err(Error::InvalidSplit {
                            identity: "C^B_AI = 0 (invariant complement)".into(),
                            indices: vec![b, a, i],
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(report)
    }

    /// Isotropy rows of the connection (used to reconstruct the fiber
    /// coordinates after reduction).
    pub fn connection_mu(&self, q: &[f64]) -> SMat<f64> {
        let lam = f64::mat(self.lambda.as_ref(), q);
        SMat::from_fn(self.split.a_idx.len(), self.dims.m, |r, i| {
            lam.get(self.split.a_idx[r], i)
        })
    }
}

/// Curvature of the connection in the invariant and body frames.
#[derive(Clone, Debug)]
pub struct Curvature {
    pub b: Ten3<f64>,
    pub b_hat: Ten3<f64>,
}

/// Largest violation seen per splitting identity (all within tolerance).
#[derive(Clone, Copy, Debug, Default)]
pub struct SplitReport {
    pub subalgebra: f64,
    pub annihilates_mu: f64,
    pub invariant_complement: f64,
}

struct MovingZ {
    setup: SymmetrySetup,
}

impl MatrixDef for MovingZ {
    fn shape(&self) -> (usize, usize) {
        (self.setup.dims.n, self.setup.dims.n)
    }
    fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
        let s = &self.setup;
        let (n, m, k) = (s.dims.n, s.dims.m, s.dims.k);
        let lam = S::mat(s.lambda.as_ref(), q);
        let km = S::mat(s.kmat.as_ref(), q);
        let mut z = SMat::zeros(n, n);
        for (i, &xi) in s.shape_idx.iter().enumerate() {
            z.set(xi, i, S::one());
            for (b, &tb) in s.group_idx.iter().enumerate() {
                z.set(tb, i, -lam.get(b, i));
            }
        }
        for a in 0..k {
            for (b, &tb) in s.group_idx.iter().enumerate() {
                z.set(tb, m + a, km.get(b, a));
            }
        }
        z
    }
}

struct MovingW {
    setup: SymmetrySetup,
}

impl MatrixDef for MovingW {
    fn shape(&self) -> (usize, usize) {
        (self.setup.dims.n, self.setup.dims.n)
    }
    fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S> {
        let s = &self.setup;
        let (n, m, k) = (s.dims.n, s.dims.m, s.dims.k);
        let lam = S::mat(s.lambda.as_ref(), q);
        let km = S::mat(s.kmat.as_ref(), q);
        // A singular K surfaces as NaNs so outer solvers reject the point
        // instead of panicking.
        let kinv = km
            .inverse()
            .unwrap_or_else(|_| SMat::from_fn(k, k, |_, _| S::from_f64(f64::NAN)));
        let kl = kinv.matmul(&lam);
        let mut w = SMat::zeros(n, n);
        for (i, &xi) in s.shape_idx.iter().enumerate() {
            w.set(i, xi, S::one());
        }
        for a in 0..k {
            for (i, &xi) in s.shape_idx.iter().enumerate() {
                w.set(m + a, xi, kl.get(a, i));
            }
            for (b, &tb) in s.group_idx.iter().enumerate() {
                w.set(m + a, tb, kinv.get(a, b));
            }
        }
        w
    }
}
