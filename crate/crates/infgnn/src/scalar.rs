//! Generic scalar abstraction over plain f64 and forward-mode dual numbers.
//!
//! The model's forward and backward passes are written against [`Real`], so
//! the same code path yields plain gradients (f64) and exact Hessian-vector
//! products (dual numbers carrying a tangent along a chosen parameter
//! direction). Dual arithmetic has no truncation error, which keeps the
//! exact influence mode independent of the finite-difference oracles used to
//! test it.

use std::ops::{Add, Div, Mul, Neg, Sub};

use num_traits::{One, Zero};

pub trait Real:
    'static
    + Copy
    + std::fmt::Debug
    + PartialEq
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + ndarray::ScalarOperand
{
    fn from_f64(v: f64) -> Self;
    /// The primal (value) part; for f64 this is the identity.
    fn primal(self) -> f64;
    fn relu(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn primal(self) -> f64 {
        self
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// First-order dual number: value plus tangent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }

    pub fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.re * rhs.du + self.du * rhs.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        Dual::new(
            self.re / rhs.re,
            (self.du * rhs.re - self.re * rhs.du) / (rhs.re * rhs.re),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Zero for Dual {
    fn zero() -> Self {
        Dual::new(0.0, 0.0)
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.du == 0.0
    }
}

impl One for Dual {
    fn one() -> Self {
        Dual::new(1.0, 0.0)
    }
}

impl ndarray::ScalarOperand for Dual {}

impl Real for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn primal(self) -> f64 {
        self.re
    }
    fn relu(self) -> Self {
        if self.re > 0.0 {
            self
        } else {
            Dual::zero()
        }
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (2.0 * s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn dual_arithmetic_matches_derivative_rules() {
        // f(x) = x^2 at x = 3, tangent 1.
        let x = Dual::new(3.0, 1.0);
        let y = x * x;
        close(y.re, 9.0);
        close(y.du, 6.0);

        // f(x) = 1 / x at x = 2.
        let inv = Dual::one() / Dual::new(2.0, 1.0);
        close(inv.re, 0.5);
        close(inv.du, -0.25);

        // ln, exp, sqrt chain: f = ln(exp(sqrt(x))) = sqrt(x).
        let x = Dual::new(4.0, 1.0);
        let y = x.sqrt().exp().ln();
        close(y.re, 2.0);
        close(y.du, 0.25);
    }

    #[test]
    fn dual_relu_gates_on_primal() {
        let pos = Dual::new(0.5, 3.0).relu();
        close(pos.re, 0.5);
        close(pos.du, 3.0);
        let neg = Dual::new(-0.5, 3.0).relu();
        close(neg.re, 0.0);
        close(neg.du, 0.0);
    }

    /// Dual-number directional derivative equals the analytic derivative of
    /// a nontrivial composite, to machine precision.
    #[test]
    fn directional_derivative_is_exact() {
        let f = |x: Dual, y: Dual| (x * y + y.sqrt()).ln() * x.exp();
        let (x0, y0) = (0.7, 1.9);
        let (dx, dy) = (0.3, -0.8);
        let out = f(Dual::new(x0, dx), Dual::new(y0, dy));
        // Analytic gradient of f.
        let inner = x0 * y0 + y0.sqrt();
        let dinner_dx = y0;
        let dinner_dy = x0 + 0.5 / y0.sqrt();
        let df_dx = x0.exp() * (inner.ln() + dinner_dx / inner);
        let df_dy = x0.exp() * dinner_dy / inner;
        close(out.du, df_dx * dx + df_dy * dy);
    }
}
