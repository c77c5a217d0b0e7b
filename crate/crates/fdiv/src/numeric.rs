//! Double-double (~106-bit) arithmetic for the few places where plain f64
//! cannot reach the promised tolerances: weight-solver residuals, constraint
//! Gram factorizations, and order-robust summation of estimator terms.

/// A number represented as an unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    // requires |a| >= |b|
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

#[inline]
fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd {
        hi: p,
        lo: f64::mul_add(a, b, -p),
    }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    #[inline]
    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn add(self, other: Dd) -> Dd {
        let s = two_sum(self.hi, other.hi);
        let e = s.lo + self.lo + other.lo;
        quick_two_sum(s.hi, e)
    }

    #[inline]
    pub fn add_f64(self, x: f64) -> Dd {
        let s = two_sum(self.hi, x);
        let e = s.lo + self.lo;
        quick_two_sum(s.hi, e)
    }

    #[inline]
    pub fn sub(self, other: Dd) -> Dd {
        self.add(other.neg())
    }

    #[inline]
    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    #[inline]
    pub fn mul(self, other: Dd) -> Dd {
        let p = two_prod(self.hi, other.hi);
        let e = p.lo + self.hi * other.lo + self.lo * other.hi;
        quick_two_sum(p.hi, e)
    }

    #[inline]
    pub fn mul_f64(self, x: f64) -> Dd {
        let p = two_prod(self.hi, x);
        let e = p.lo + self.lo * x;
        quick_two_sum(p.hi, e)
    }

    #[inline]
    pub fn div(self, other: Dd) -> Dd {
        let q1 = self.hi / other.hi;
        let r = self.sub(other.mul_f64(q1));
        let q2 = r.hi / other.hi;
        let r2 = r.sub(other.mul_f64(q2));
        let q3 = r2.hi / other.hi;
        quick_two_sum(q1, q2).add_f64(q3)
    }

    #[inline]
    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        // one Newton step on top of the f64 square root
        let y = self.hi.sqrt();
        let y_sq = two_prod(y, y);
        let err = self.sub(y_sq).to_f64() / (2.0 * y);
        quick_two_sum(y, err)
    }

    #[cfg(test)]
    pub fn abs(self) -> Dd {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            self.neg()
        } else {
            self
        }
    }
}

/// Accumulates f64 terms into a double-double running sum. The result is
/// accurate to ~1e-31 relative, which makes it independent of summation order
/// for every realistic input.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct DdSum {
    acc: Dd,
}

impl DdSum {
    pub fn new() -> Self {
        Self { acc: Dd::ZERO }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        self.acc = self.acc.add_f64(x);
    }

    /// Adds the exact product `a * b`.
    #[inline]
    pub fn add_prod(&mut self, a: f64, b: f64) {
        self.acc = self.acc.add(two_prod(a, b));
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.acc.to_f64()
    }

    #[inline]
    pub fn value_dd(&self) -> Dd {
        self.acc
    }
}

/// Dot product accumulated in double-double precision.
pub(crate) fn dd_dot(a: &[f64], b: &[f64]) -> Dd {
    debug_assert_eq!(a.len(), b.len());
    let mut s = DdSum::new();
    for (&x, &y) in a.iter().zip(b) {
        s.add_prod(x, y);
    }
    s.value_dd()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_keeps_cancelled_low_bits() {
        let big = Dd::from_f64(1e16);
        let s = big.add_f64(1.0).add_f64(-1e16);
        assert_eq!(s.to_f64(), 1.0);
    }

    #[test]
    fn mul_and_div_roundtrip() {
        let third = Dd::ONE.div(Dd::from_f64(3.0));
        let one = third.mul_f64(3.0);
        assert!((one.to_f64() - 1.0).abs() < 1e-30);
        assert!(one.sub(Dd::ONE).abs().to_f64() < 1e-31);
    }

    #[test]
    fn sqrt_squares_back() {
        let two = Dd::from_f64(2.0);
        let r = two.sqrt();
        let back = r.mul(r).sub(two);
        assert!(back.abs().to_f64() < 1e-30);
    }

    #[test]
    fn sum_is_order_insensitive() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 2654435761u64 as usize) as f64).sin() * 1e8).collect();
        let mut fwd = DdSum::new();
        for &x in &xs {
            fwd.add(x);
        }
        let mut rev = DdSum::new();
        for &x in xs.iter().rev() {
            rev.add(x);
        }
        assert_eq!(fwd.value(), rev.value());
    }

    #[test]
    fn dot_matches_exact_small_case() {
        let a = [0.1, 0.2, 0.3];
        let b = [3.0, 2.0, 1.0];
        // 0.3 + 0.4 + 0.3 = 1.0 up to representation of the decimals
        let d = dd_dot(&a, &b).to_f64();
        assert!((d - 1.0).abs() < 1e-16);
    }
}
