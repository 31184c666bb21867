//! Scalar abstraction and forward-mode dual numbers.
//!
//! All model functions (Lagrangians, frame matrices, constraints) are written
//! once, generically over [`Scalar`]. Evaluating them on [`D1`] or [`D2`]
//! yields exact first or second derivatives; evaluating on `f64` costs
//! nothing extra. Central finite differences are provided only as an
//! independent cross-check for tests.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic plus the elementary functions the models need.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    /// The underlying primal value (all derivative parts stripped).
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn abs(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn powf(self, e: Self) -> Self {
        (e * self.ln()).exp()
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
}

/// A dual number `re + ε·du` with `ε² = 0`.
///
/// Nesting gives higher-order derivatives: `Dual<Dual<f64>>` carries exact
/// second derivatives along one pair of seed directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T: Scalar> {
    pub re: T,
    pub du: T,
}

/// First-order dual scalar.
pub type D1 = Dual<f64>;
/// Second-order (nested) dual scalar.
pub type D2 = Dual<Dual<f64>>;

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, du: T) -> Self {
        Dual { re, du }
    }

    /// Embed a value with zero derivative part.
    pub fn constant(re: T) -> Self {
        Dual {
            re,
            du: T::zero(),
        }
    }

    /// A value seeded as the differentiation variable (`du = 1`).
    pub fn seeded(re: T) -> Self {
        Dual { re, du: T::one() }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Dual::new(q, (self.du - q * o.du) / o.re)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.du)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(x: f64) -> Self {
        Dual::constant(T::from_f64(x))
    }
    fn value(self) -> f64 {
        self.re.value()
    }
    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.du * self.re.cos())
    }
    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -(self.du * self.re.sin()))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (s + s))
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        Dual::new(
            self.re.powi(n),
            self.du * T::from_f64(n as f64) * self.re.powi(n - 1),
        )
    }
    fn abs(self) -> Self {
        if self.re.value() < 0.0 {
            -self
        } else {
            self
        }
    }
}

/// Gradient of a scalar function of one slice, one forward pass per entry.
pub fn grad1<F>(f: F, x: &[f64]) -> Vec<f64>
where
    F: Fn(&[D1]) -> D1,
{
    let mut out = vec![0.0; x.len()];
    let mut xs: Vec<D1> = x.iter().map(|&v| D1::constant(v)).collect();
    for i in 0..x.len() {
        xs[i].du = 1.0;
        out[i] = f(&xs).du;
        xs[i].du = 0.0;
    }
    out
}

/// Central-difference gradient with the standard cube-root step,
/// `h_i = cbrt(eps) * max(1, |x_i|)`. Cross-check oracle only.
pub fn central_diff<F>(f: F, x: &[f64]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let base = f64::EPSILON.cbrt();
    let mut out = vec![0.0; x.len()];
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let h = base * x[i].abs().max(1.0);
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample<S: Scalar>(x: &[S]) -> S {
        // Mixes every elementary function the trait exposes.
        let a = x[0];
        let b = x[1];
        a.sin() * b.exp() + (a * a + b * b + S::one()).ln() * (a * b + S::from_f64(2.0)).sqrt()
            + a.powi(3) / (S::one() + b.abs())
            - (a - b).cos()
    }

    fn sample_grad_exact(x: &[f64]) -> Vec<f64> {
        // Hand-derived gradient of `sample`, kept independent of the dual code.
        let (a, b) = (x[0], x[1]);
        let n = a * a + b * b + 1.0;
        let s = (a * b + 2.0).sqrt();
        let da = a.cos() * b.exp()
            + (2.0 * a / n) * s
            + n.ln() * b / (2.0 * s)
            + 3.0 * a * a / (1.0 + b.abs())
            + (a - b).sin();
        let db = a.sin() * b.exp()
            + (2.0 * b / n) * s
            + n.ln() * a / (2.0 * s)
            - a.powi(3) * b.signum() / (1.0 + b.abs()).powi(2)
            - (a - b).sin();
        vec![da, db]
    }

    #[test]
    fn dual_gradient_matches_hand_derivative() {
        let x = [0.7, -0.3];
        let g = grad1(|xs| sample(xs), &x);
        let e = sample_grad_exact(&x);
        assert_relative_eq!(g[0], e[0], max_relative = 1e-14);
        assert_relative_eq!(g[1], e[1], max_relative = 1e-14);
    }

    #[test]
    fn dual_gradient_matches_central_difference() {
        // Agreement tolerance for first derivatives: 1e-6 relative.
        for x in [[0.7, -0.3], [1.9, 0.4], [-0.2, 1.1]] {
            let g = grad1(|xs| sample(xs), &x);
            let fd = central_diff(|xs| sample(xs), &x);
            for i in 0..2 {
                assert_relative_eq!(g[i], fd[i], max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn nested_duals_give_second_derivatives() {
        // f(t) = sin(t) * exp(2t): f'' = exp(2t)(4 cos t + 3 sin t)... derive:
        // f' = cos*e + 2 sin*e; f'' = -sin*e + 2cos*e + 2cos*e + 4 sin*e
        //    = e*(3 sin + 4 cos).
        let t = 0.37;
        let td: D2 = Dual::new(D1::seeded(t), D1::constant(1.0));
        let f = td.sin() * (td + td).exp();
        let e = (2.0 * t).exp();
        assert_relative_eq!(f.re.re, t.sin() * e, max_relative = 1e-14);
        assert_relative_eq!(f.re.du, t.cos() * e + 2.0 * t.sin() * e, max_relative = 1e-14);
        assert_relative_eq!(f.du.re, t.cos() * e + 2.0 * t.sin() * e, max_relative = 1e-14);
        assert_relative_eq!(f.du.du, e * (3.0 * t.sin() + 4.0 * t.cos()), max_relative = 1e-13);
    }

    #[test]
    fn mixed_second_derivative_is_symmetric() {
        // d2/dxdy of sample via nesting: seed outer along x, inner along y.
        // Inner seed along y, outer seed along x gives d/dx (df/dy).
        let (a, b) = (0.9, 0.4);
        let fxy = {
            let x: D2 = Dual::new(D1::constant(a), D1::constant(1.0));
            let y: D2 = Dual::new(D1::seeded(b), D1::constant(0.0));
            sample(&[x, y]).du.du
        };
        let fyx = {
            let x: D2 = Dual::new(D1::seeded(a), D1::constant(0.0));
            let y: D2 = Dual::new(D1::constant(b), D1::constant(1.0));
            sample(&[x, y]).du.du
        };
        assert_relative_eq!(fxy, fyx, max_relative = 1e-13);
        // Cross-check against a central difference of the dual gradient.
        let fd = central_diff(
            |xs| grad1(|xd| sample(xd), xs)[1],
            &[a, b],
        )[0];
        assert_relative_eq!(fxy, fd, max_relative = 1e-6);
    }

    #[test]
    fn division_and_powi_handle_edge_cases() {
        let x = D1::seeded(2.0);
        let y = x.powi(0);
        assert_eq!(y.re, 1.0);
        assert_eq!(y.du, 0.0);
        let z = x.powi(-2); // d/dx x^-2 = -2 x^-3
        assert_relative_eq!(z.re, 0.25);
        assert_relative_eq!(z.du, -2.0 / 8.0);
        let q = D1::constant(1.0) / x; // d/dx 1/x = -1/x^2
        assert_relative_eq!(q.du, -0.25);
    }

    #[test]
    fn powf_via_exp_ln() {
        let x = D1::seeded(1.7);
        let p = x.powf(D1::constant(2.5));
        assert_relative_eq!(p.re, 1.7f64.powf(2.5), max_relative = 1e-14);
        assert_relative_eq!(p.du, 2.5 * 1.7f64.powf(1.5), max_relative = 1e-14);
    }
}
