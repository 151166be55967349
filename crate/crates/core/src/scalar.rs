//! Numeric abstraction shared by every numerical module.
//!
//! Model math is written once against [`Scalar`] and instantiated for `f32`
//! and `f64`. Files on disk are always 32-bit; training and gradient checks
//! default to 64-bit.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real field used by embeddings, heads, losses and optimizers.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    /// Floor applied to every logarithm argument.
    fn log_floor() -> Self {
        Self::lit(1e-12)
    }

    /// `ln(max(x, 1e-12))`.
    fn clamped_ln(self) -> Self {
        self.max(Self::log_floor()).ln()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log(sum(exp(x)))` over an iterator of values.
pub fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// In-place softmax of a slice. Returns the log-partition.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Sum in index order. Used wherever bit-stable reductions matter.
pub fn ordered_sum<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive_for_small_values() {
        let xs = [0.1f64, -0.3, 2.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs.iter().copied()) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_values() {
        let xs = [1000.0f64, 1000.0];
        let got = log_sum_exp(xs.iter().copied());
        assert!((got - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.2f32, 0.3, 0.3]), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one_in_both_precisions() {
        let mut a = [1.0f32, 2.0, 3.0];
        softmax_in_place(&mut a);
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let mut b = [1.0f64, 2.0, 3.0];
        softmax_in_place(&mut b);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
