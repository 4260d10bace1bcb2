//! Extended-precision helpers for test oracles.

use twofloat::TwoFloat;

/// Double-double `exp` by Taylor series on `x / 2^10` followed by repeated squaring.
/// twofloat's own `exp` is only accurate to about 1e-12 relative.
pub fn exp_dd(x: TwoFloat) -> TwoFloat {
    const HALVINGS: i32 = 10;
    let r = x / TwoFloat::from(f64::powi(2.0, HALVINGS));
    let mut term = TwoFloat::from(1.0);
    let mut sum = TwoFloat::from(1.0);
    for k in 1..40 {
        term = term * r / TwoFloat::from(k as f64);
        sum += term;
    }
    for _ in 0..HALVINGS {
        sum = sum * sum;
    }
    sum
}

pub fn dd(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

pub fn to_f64(x: TwoFloat) -> f64 {
    x.into()
}
