//! Object-safe wrappers around generically-scalar model functions.
//!
//! Model code implements one of the `*Def` traits with a single method
//! generic over [`EvalScalar`]; blanket impls expose it behind an object-safe
//! `*Fn` trait with monomorphic entry points for `f64`, [`D1`] and [`D2`].
//! [`Lift`] ties a scalar to the next dual level so derivative helpers can be
//! written once and used both at `f64` (producing plain derivatives) and at
//! `D1` (producing derivatives that are themselves being differentiated by an
//! outer Newton Jacobian pass).

use crate::scalar::{Dual, Scalar, D1, D2};
use crate::smat::SMat;

/// Scalar types a model function can be evaluated at.
pub trait EvalScalar: Scalar {
    fn lag(f: &dyn LagrangianFn, q: &[Self], v: &[Self]) -> Self;
    fn jet(f: &dyn JetFn, q: &[Self], v: &[Self], p: &[Self]) -> Self;
    fn mat(f: &dyn MatrixFn, q: &[Self]) -> SMat<Self>;
}

impl EvalScalar for f64 {
    fn lag(f: &dyn LagrangianFn, q: &[Self], v: &[Self]) -> Self {
        f.at(q, v)
    }
    fn jet(f: &dyn JetFn, q: &[Self], v: &[Self], p: &[Self]) -> Self {
        f.at(q, v, p)
    }
    fn mat(f: &dyn MatrixFn, q: &[Self]) -> SMat<Self> {
        f.at(q)
    }
}

impl EvalScalar for D1 {
    fn lag(f: &dyn LagrangianFn, q: &[Self], v: &[Self]) -> Self {
        f.at_d1(q, v)
    }
    fn jet(f: &dyn JetFn, q: &[Self], v: &[Self], p: &[Self]) -> Self {
        f.at_d1(q, v, p)
    }
    fn mat(f: &dyn MatrixFn, q: &[Self]) -> SMat<Self> {
        f.at_d1(q)
    }
}

impl EvalScalar for D2 {
    fn lag(f: &dyn LagrangianFn, q: &[Self], v: &[Self]) -> Self {
        f.at_d2(q, v)
    }
    fn jet(f: &dyn JetFn, q: &[Self], v: &[Self], p: &[Self]) -> Self {
        f.at_d2(q, v, p)
    }
    fn mat(f: &dyn MatrixFn, q: &[Self]) -> SMat<Self> {
        f.at_d2(q)
    }
}

/// Connects a scalar to the dual level above it.
///
/// `f64 -> D1 -> D2`; two levels suffice for every computation in the
/// library (first derivatives of quantities that are themselves first
/// derivatives).
pub trait Lift: EvalScalar {
    type Up: EvalScalar;
    /// Number of derivative layers carried by `Self` (0 for plain values).
    const DEPTH: usize;
    /// Embed with zero derivative part.
    fn up(x: Self) -> Self::Up;
    /// Embed seeded with unit derivative part.
    fn seed(x: Self) -> Self::Up;
    /// Embed with an explicit derivative part.
    fn with_deriv(x: Self, d: Self) -> Self::Up;
    /// Split into (value, derivative-along-seed).
    fn parts(u: Self::Up) -> (Self, Self);
}

impl Lift for f64 {
    type Up = D1;
    const DEPTH: usize = 0;
    fn up(x: Self) -> D1 {
        Dual::constant(x)
    }
    fn seed(x: Self) -> D1 {
        Dual::seeded(x)
    }
    fn with_deriv(x: Self, d: Self) -> D1 {
        Dual::new(x, d)
    }
    fn parts(u: D1) -> (Self, Self) {
        (u.re, u.du)
    }
}

impl Lift for D1 {
    type Up = D2;
    const DEPTH: usize = 1;
    fn up(x: Self) -> D2 {
        Dual::constant(x)
    }
    fn seed(x: Self) -> D2 {
        Dual::new(x, D1::constant(1.0))
    }
    fn with_deriv(x: Self, d: Self) -> D2 {
        Dual::new(x, d)
    }
    fn parts(u: D2) -> (Self, Self) {
        (u.re, u.du)
    }
}

/// A function of a tangent point, `(q, v) -> scalar`.
pub trait LagrangianFn: Send + Sync {
    fn at(&self, q: &[f64], v: &[f64]) -> f64;
    fn at_d1(&self, q: &[D1], v: &[D1]) -> D1;
    fn at_d2(&self, q: &[D2], v: &[D2]) -> D2;
}

/// Generic definition of a tangent-point function; implement this.
pub trait LagrangianDef: Send + Sync {
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S]) -> S;
}

impl<T: LagrangianDef> LagrangianFn for T {
    fn at(&self, q: &[f64], v: &[f64]) -> f64 {
        self.eval(q, v)
    }
    fn at_d1(&self, q: &[D1], v: &[D1]) -> D1 {
        self.eval(q, v)
    }
    fn at_d2(&self, q: &[D2], v: &[D2]) -> D2 {
        self.eval(q, v)
    }
}

/// A function of a Pontryagin point, `(q, v, p) -> scalar`.
pub trait JetFn: Send + Sync {
    fn at(&self, q: &[f64], v: &[f64], p: &[f64]) -> f64;
    fn at_d1(&self, q: &[D1], v: &[D1], p: &[D1]) -> D1;
    fn at_d2(&self, q: &[D2], v: &[D2], p: &[D2]) -> D2;
}

/// Generic definition of a Pontryagin-point function; implement this.
pub trait JetDef: Send + Sync {
    fn eval<S: EvalScalar>(&self, q: &[S], v: &[S], p: &[S]) -> S;
}

impl<T: JetDef> JetFn for T {
    fn at(&self, q: &[f64], v: &[f64], p: &[f64]) -> f64 {
        self.eval(q, v, p)
    }
    fn at_d1(&self, q: &[D1], v: &[D1], p: &[D1]) -> D1 {
        self.eval(q, v, p)
    }
    fn at_d2(&self, q: &[D2], v: &[D2], p: &[D2]) -> D2 {
        self.eval(q, v, p)
    }
}

/// A matrix-valued function of configuration, `q -> matrix`.
pub trait MatrixFn: Send + Sync {
    fn shape(&self) -> (usize, usize);
    fn at(&self, q: &[f64]) -> SMat<f64>;
    fn at_d1(&self, q: &[D1]) -> SMat<D1>;
    fn at_d2(&self, q: &[D2]) -> SMat<D2>;
}

/// Generic definition of a configuration-dependent matrix; implement this.
pub trait MatrixDef: Send + Sync {
    fn shape(&self) -> (usize, usize);
    fn eval<S: EvalScalar>(&self, q: &[S]) -> SMat<S>;
}

impl<T: MatrixDef> MatrixFn for T {
    fn shape(&self) -> (usize, usize) {
        MatrixDef::shape(self)
    }
    fn at(&self, q: &[f64]) -> SMat<f64> {
        self.eval(q)
    }
    fn at_d1(&self, q: &[D1]) -> SMat<D1> {
        self.eval(q)
    }
    fn at_d2(&self, q: &[D2]) -> SMat<D2> {
        self.eval(q)
    }
}

/// Lift a slice one dual level with zero derivative parts.
pub fn up_slice<S: Lift>(x: &[S]) -> Vec<S::Up> {
    x.iter().map(|&v| S::up(v)).collect()
}

/// Gradients of a tangent-point function in `q` and `v`: one lifted
/// evaluation per coordinate.
pub fn lag_gradients<S: Lift>(f: &dyn LagrangianFn, q: &[S], v: &[S]) -> (Vec<S>, Vec<S>) {
    let (n, m) = (q.len(), v.len());
    let mut qu = up_slice(q);
    let mut vu = up_slice(v);
    let mut dq = Vec::with_capacity(n);
    for i in 0..n {
        qu[i] = S::seed(q[i]);
        dq.push(S::parts(<S::Up as EvalScalar>::lag(f, &qu, &vu)).1);
        qu[i] = S::up(q[i]);
    }
    let mut dv = Vec::with_capacity(m);
    for i in 0..m {
        vu[i] = S::seed(v[i]);
        dv.push(S::parts(<S::Up as EvalScalar>::lag(f, &qu, &vu)).1);
        vu[i] = S::up(v[i]);
    }
    (dq, dv)
}

/// Gradient of a tangent-point function in `v` only.
pub fn lag_grad_v<S: Lift>(f: &dyn LagrangianFn, q: &[S], v: &[S]) -> Vec<S> {
    let qu = up_slice(q);
    let mut vu = up_slice(v);
    let mut dv = Vec::with_capacity(v.len());
    for i in 0..v.len() {
        vu[i] = S::seed(v[i]);
        dv.push(S::parts(<S::Up as EvalScalar>::lag(f, &qu, &vu)).1);
        vu[i] = S::up(v[i]);
    }
    dv
}

/// Partial derivative of a matrix function along coordinate `gamma`.
pub fn mat_partial<S: Lift>(f: &dyn MatrixFn, q: &[S], gamma: usize) -> SMat<S> {
    let mut qu = up_slice(q);
    qu[gamma] = S::seed(q[gamma]);
    let m = <S::Up as EvalScalar>::mat(f, &qu);
    m.map(|x| S::parts(x).1)
}

/// Directional derivative of a matrix function along `dir`
/// (`sum_gamma dM/dq^gamma dir^gamma`, in a single lifted evaluation).
pub fn mat_directional<S: Lift>(f: &dyn MatrixFn, q: &[S], dir: &[S]) -> SMat<S> {
    let qu: Vec<S::Up> = q
        .iter()
        .zip(dir)
        .map(|(&qi, &di)| S::with_deriv(qi, di))
        .collect();
    let m = <S::Up as EvalScalar>::mat(f, &qu);
    m.map(|x| S::parts(x).1)
}
