//! Forward-mode automatic differentiation on fixed-width dual numbers.
//!
//! Every optical kernel is generic over [`Scalar`]; instantiated at `f64` it
//! computes plain values, instantiated at [`Dual`] it carries a fixed block of
//! partial derivatives through the identical code path. Branch decisions
//! (comparisons, `abs`, clamps) act on the value component only, so both
//! instantiations follow the same control flow and the derivatives are those
//! of the smooth piece the evaluation point lies on. Ties sit on the `>=`
//! side of each branch.
//!
//! Width 3 covers one emitter (x, y, q) or one triangle (three heights);
//! width 8 covers a grid vertex plus its one-ring. Wider widths exist only
//! for cross-checks in tests.

use crate::error::{Error, Result};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Scalar abstraction over plain reals and dual numbers.
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;

    /// Value component; the identity on `f64`.
    fn value(self) -> f64;

    /// Multiplication by a constant (no derivative of its own).
    fn scale(self, c: f64) -> Self;

    fn sqrt(self) -> Self;

    /// `|x|` with subgradient 0 at exactly 0.
    fn abs(self) -> Self;

    /// Two-argument arctangent of `self / x`, correct in all quadrants.
    fn atan2(self, x: Self) -> Self;

    /// Clamp by value; the clamped-off sides are constants.
    fn clamp_value(self, lo: f64, hi: f64) -> Self;

    /// Lifts an already-located real root of the polynomial
    /// `sum_i coeffs[i] * k^i` into `Self`, attaching partials by implicit
    /// differentiation: `dk = -(dF/dp) / (dF/dk)`.
    ///
    /// Fails when `|dF/dk|` is not bounded away from zero relative to the
    /// coefficient scale.
    fn lift_root(root: f64, coeffs: &[Self]) -> Result<Self>;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }

    #[inline]
    fn sqrt(self) -> Self {
        debug_assert!(self >= 0.0, "sqrt of negative value {self}");
        f64::sqrt(self)
    }

    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }

    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }

    #[inline]
    fn clamp_value(self, lo: f64, hi: f64) -> Self {
        if self > hi {
            hi
        } else if self < lo {
            lo
        } else {
            self
        }
    }

    #[inline]
    fn lift_root(root: f64, _coeffs: &[Self]) -> Result<Self> {
        Ok(root)
    }
}

/// Dual number with value `re` and `K` partial derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const K: usize> {
    pub re: f64,
    pub d: [f64; K],
}

pub type Dual3 = Dual<3>;
pub type Dual8 = Dual<8>;

impl<const K: usize> Dual<K> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Self { re: v, d: [0.0; K] }
    }

    /// Variable seeded with derivative 1 in `slot`.
    #[inline]
    pub fn seeded(v: f64, slot: usize) -> Self {
        let mut d = [0.0; K];
        d[slot] = 1.0;
        Self { re: v, d }
    }

    #[inline]
    pub fn new(re: f64, d: [f64; K]) -> Self {
        Self { re, d }
    }
}

/// Comparisons act on the value component only; two duals with equal values
/// but different partials compare equal.
impl<const K: usize> PartialEq for Dual<K> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<const K: usize> PartialOrd for Dual<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<const K: usize> Add for Dual<K> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d) {
            *a += b;
        }
        Self { re: self.re + rhs.re, d }
    }
}

impl<const K: usize> AddAssign for Dual<K> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        self.re += rhs.re;
        for (a, b) in self.d.iter_mut().zip(rhs.d) {
            *a += b;
        }
    }
}

impl<const K: usize> Sub for Dual<K> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d) {
            *a -= b;
        }
        Self { re: self.re - rhs.re, d }
    }
}

impl<const K: usize> SubAssign for Dual<K> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        self.re -= rhs.re;
        for (a, b) in self.d.iter_mut().zip(rhs.d) {
            *a -= b;
        }
    }
}

impl<const K: usize> Mul for Dual<K> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = self.d[i] * rhs.re + self.re * rhs.d[i];
        }
        Self { re: self.re * rhs.re, d }
    }
}

impl<const K: usize> Div for Dual<K> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        debug_assert!(rhs.re != 0.0, "division by zero-valued dual");
        let q = self.re / rhs.re;
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = (self.d[i] - q * rhs.d[i]) / rhs.re;
        }
        Self { re: q, d }
    }
}

impl<const K: usize> Neg for Dual<K> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -*a;
        }
        Self { re: -self.re, d }
    }
}

impl<const K: usize> Scalar for Dual<K> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }

    #[inline]
    fn value(self) -> f64 {
        self.re
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= c;
        }
        Self { re: self.re * c, d }
    }

    #[inline]
    fn sqrt(self) -> Self {
        debug_assert!(self.re >= 0.0, "sqrt of negative dual value {}", self.re);
        let r = f64::sqrt(self.re);
        let inv = 0.5 / r;
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= inv;
        }
        Self { re: r, d }
    }

    #[inline]
    fn abs(self) -> Self {
        let s = if self.re > 0.0 {
            1.0
        } else if self.re < 0.0 {
            -1.0
        } else {
            0.0
        };
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= s;
        }
        Self { re: self.re.abs(), d }
    }

    #[inline]
    fn atan2(self, x: Self) -> Self {
        let y = self;
        let r2 = x.re * x.re + y.re * y.re;
        debug_assert!(r2 > 0.0, "atan2 at the origin");
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = (x.re * y.d[i] - y.re * x.d[i]) / r2;
        }
        Self { re: f64::atan2(y.re, x.re), d }
    }

    #[inline]
    fn clamp_value(self, lo: f64, hi: f64) -> Self {
        if self.re > hi {
            Self::constant(hi)
        } else if self.re < lo {
            Self::constant(lo)
        } else {
            self
        }
    }

    fn lift_root(root: f64, coeffs: &[Self]) -> Result<Self> {
        // Horner at constant k: the partials of the evaluation are dF/dp.
        let mut f = Dual::<K>::constant(0.0);
        for &c in coeffs.iter().rev() {
            f = f.scale(root) + c;
        }
        // dF/dk from the value parts.
        let mut dfdk = 0.0;
        for (i, c) in coeffs.iter().enumerate().skip(1) {
            dfdk += (i as f64) * c.re * root.powi(i as i32 - 1);
        }
        let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.re.abs()));
        if dfdk.abs() <= 1e-12 * scale {
            return Err(Error::IllConditionedRoot(format!(
                "|dF/dk| = {:.3e} at k = {root} (coefficient scale {:.3e})",
                dfdk.abs(),
                scale
            )));
        }
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = -f.d[i] / dfdk;
        }
        Ok(Self { re: root, d })
    }
}

/// Adds `weight * partials` of a width-`K` dual into gradient slots.
#[inline]
pub fn scatter_add<const K: usize>(grad: &mut [f64], slots: &[usize; K], weight: f64, v: &Dual<K>) {
    for i in 0..K {
        grad[slots[i]] += weight * v.d[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        // Central difference with one Richardson step.
        let h = 1e-5 * x.abs().max(1.0);
        let d1 = (f(x + h) - f(x - h)) / (2.0 * h);
        let d2 = (f(x + h / 2.0) - f(x - h / 2.0)) / h;
        (4.0 * d2 - d1) / 3.0
    }

    fn check_unary(f_dual: impl Fn(Dual<1>) -> Dual<1>, f_val: impl Fn(f64) -> f64, x: f64) {
        let d = f_dual(Dual::seeded(x, 0));
        let fd = central_fd(&f_val, x);
        assert!(
            (d.d[0] - fd).abs() <= 1e-9 * fd.abs().max(1.0),
            "at {x}: dual {} vs fd {fd}",
            d.d[0]
        );
        assert_eq!(d.re, f_val(x));
    }

    #[test]
    fn elementary_partials_match_finite_differences() {
        for &x in &[0.3, 1.7, 9.25] {
            check_unary(|v| v.sqrt(), |v| v.sqrt(), x);
        }
        for &x in &[-2.0, -0.4, 0.6, 3.0] {
            check_unary(|v| v.abs(), |v| v.abs(), x);
            check_unary(|v| v * v * v, |v| v * v * v, x);
            check_unary(
                |v| (v + Dual::constant(4.0)) / (v * v + Dual::constant(1.0)),
                |v| (v + 4.0) / (v * v + 1.0),
                x,
            );
        }
    }

    #[test]
    fn atan2_partials_in_all_quadrants() {
        for &(y, x) in &[(1.0, 2.0), (1.0, -2.0), (-1.5, -0.5), (-1.5, 0.5)] {
            let dy = Dual::<2>::seeded(y, 0);
            let dx = Dual::<2>::seeded(x, 1);
            let a = dy.atan2(dx);
            let fy = central_fd(|t| f64::atan2(t, x), y);
            let fx = central_fd(|t| f64::atan2(y, t), x);
            assert!((a.d[0] - fy).abs() < 1e-9, "dy at ({y},{x})");
            assert!((a.d[1] - fx).abs() < 1e-9, "dx at ({y},{x})");
            assert_eq!(a.re, f64::atan2(y, x));
        }
    }

    #[test]
    fn abs_at_zero_takes_zero_subgradient() {
        let v = Dual::<1>::seeded(0.0, 0);
        assert_eq!(v.abs().d[0], 0.0);
        assert_eq!(v.abs().re, 0.0);
    }

    #[test]
    fn clamp_is_constant_outside_and_identity_inside() {
        let lo = -1.0;
        let hi = 1.0;
        assert_eq!(Dual::<1>::seeded(2.0, 0).clamp_value(lo, hi).d[0], 0.0);
        assert_eq!(Dual::<1>::seeded(-2.0, 0).clamp_value(lo, hi).d[0], 0.0);
        assert_eq!(Dual::<1>::seeded(0.5, 0).clamp_value(lo, hi).d[0], 1.0);
        // Ties land on the >= side: exactly hi stays a variable.
        assert_eq!(Dual::<1>::seeded(1.0, 0).clamp_value(lo, hi).d[0], 1.0);
    }

    #[test]
    fn comparisons_ignore_partials() {
        let a = Dual::<2>::new(1.0, [5.0, 0.0]);
        let b = Dual::<2>::new(1.0, [0.0, 7.0]);
        assert!(a == b);
        assert!(!(a < b));
    }

    #[test]
    fn lift_root_matches_analytic_implicit_derivative() {
        // F(k) = k^2 - c has root sqrt(c) with dk/dc = 1/(2 sqrt(c)).
        let c = 5.0;
        let coeffs = [
            -Dual::<1>::seeded(c, 0),
            Dual::constant(0.0),
            Dual::constant(1.0),
        ];
        let k = Dual::<1>::lift_root(c.sqrt(), &coeffs).unwrap();
        assert_eq!(k.re, c.sqrt());
        assert!((k.d[0] - 0.5 / c.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lift_root_rejects_vanishing_polynomial_slope() {
        // Double root at k = 0: F = k^2, F'(0) = 0.
        let coeffs = [
            Dual::<1>::constant(0.0),
            Dual::constant(0.0),
            Dual::constant(1.0),
        ];
        assert!(Dual::<1>::lift_root(0.0, &coeffs).is_err());
    }

    #[test]
    fn width_does_not_change_partials() {
        let f3 = {
            let x = Dual::<3>::seeded(0.8, 0);
            (x * x + x.sqrt()).abs()
        };
        let f1 = {
            let x = Dual::<1>::seeded(0.8, 0);
            (x * x + x.sqrt()).abs()
        };
        assert_eq!(f3.d[0], f1.d[0]);
        assert_eq!(f3.re, f1.re);
    }

    #[test]
    fn scatter_add_routes_partials_to_slots() {
        let mut grad = vec![0.0; 5];
        let v = Dual::<3>::new(1.0, [1.0, 2.0, 3.0]);
        scatter_add(&mut grad, &[4, 0, 2], 2.0, &v);
        assert_eq!(grad, vec![4.0, 0.0, 6.0, 0.0, 2.0]);
    }
}
