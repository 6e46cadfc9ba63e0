//! Scalar abstraction and deterministic reductions.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar accepted by the numeric core.
///
/// Implemented for `f32` and `f64`. Anything that is a `num_traits::Float`
/// with lossless-enough conversions qualifies.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a literal; panics only if the literal is not representable,
    /// which cannot happen for the finite constants used in this crate.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

/// Neumaier-compensated running sum. Terms are consumed in iteration order,
/// so results are reproducible for a fixed input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Real> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            carry: T::zero(),
        }
    }

    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry = self.carry + ((self.sum - t) + x);
        } else {
            self.carry = self.carry + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.carry
    }
}

impl<T: Real> FromIterator<T> for CompensatedSum<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of an iterator, in iteration order.
pub fn stable_sum<T: Real, I: IntoIterator<Item = T>>(terms: I) -> T {
    terms.into_iter().collect::<CompensatedSum<T>>().value()
}

/// Euclidean norm with a compensated sum of squares.
pub fn l2_norm<T: Real, I: IntoIterator<Item = T>>(terms: I) -> T {
    stable_sum(terms.into_iter().map(|x| x * x)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut terms = vec![1.0e16_f64];
        terms.extend(std::iter::repeat(1.0).take(1000));
        terms.push(-1.0e16);
        assert_eq!(stable_sum(terms.iter().copied()), 1000.0);
        // naive summation loses every unit term
        assert_eq!(terms.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn works_for_f32() {
        let n: f32 = l2_norm([3.0_f32, 4.0]);
        assert_eq!(n, 5.0);
    }
}
