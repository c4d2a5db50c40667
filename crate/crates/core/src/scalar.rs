//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the models and losses are generic over.
///
/// Implemented for `f32` (the production precision, matching the on-disk
/// binary32 format) and `f64` (used for gradient checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// Lossy conversion from `f64`; constants are written as `f64` literals.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn widen(v: f32) -> Self {
        Self::c(v as f64)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::c(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Numerically stable softmax of `logits / temperature`, written into `out`.
pub fn softmax_into<T: Scalar>(logits: &[T], temperature: T, out: &mut [T]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits
        .iter()
        .fold(T::neg_infinity(), |m, &x| m.max(x / temperature));
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x / temperature - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, temperature, &mut out);
    out
}

/// `log(sum(exp(x / temperature)))` with max subtraction.
pub fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone, temperature: T) -> T {
    let max = xs
        .clone()
        .fold(T::neg_infinity(), |m, x| m.max(x / temperature));
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = xs.map(|x| (x / temperature - max).exp()).sum();
    max + total.ln()
}

/// Backward through `p = softmax(x / temperature)`: given dL/dp, returns dL/dx.
pub fn softmax_backward<T: Scalar>(probs: &[T], grad_probs: &[T], temperature: T) -> Vec<T> {
    let dot: T = probs.iter().zip(grad_probs).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - dot) / temperature)
        .collect()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = softmax(&[1e30_f32, -1e30, 0.0], 0.01);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let xs = [0.3_f64, -1.2, 2.0];
        let naive = xs.iter().map(|x| (x / 0.5).exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs.iter().copied(), 0.5) - naive).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let x = [0.1_f64, -0.4, 0.7];
        let g = [0.3_f64, 1.0, -2.0];
        let t = 0.7;
        let analytic = softmax_backward(&softmax(&x, t), &g, t);
        for i in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let f = |v: &[f64]| dot(&softmax(v, t), &g);
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }
}
