//! Scalar abstraction: f32 or f64.
//!
//! Storage types are generic over [`Float`]; every reduction (dot products,
//! norms, means, variances) runs in f64 regardless of the storage scalar, so
//! f32-backed data goes through the same accumulation path as f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{FromPrimitive, NumAssign, ToPrimitive};

pub trait Float:
    num_traits::Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Send
    + Sync
    + Display
    + Debug
    + 'static
{
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    fn of_f64(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to scalar")
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Kahan-free fixed-order sum in f64. Callers rely on the left-to-right
/// order for run-to-run determinism.
pub fn sum64<T: Float>(values: &[T]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v.as_f64())
}

pub fn dot64<T: Float>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + x.as_f64() * y.as_f64())
}

pub fn norm64<T: Float>(a: &[T]) -> f64 {
    a.iter()
        .fold(0.0, |acc, x| {
            let v = x.as_f64();
            acc + v * v
        })
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_accumulate_in_f64() {
        // 1 + eps_f32/2 repeated: an f32 accumulator would stay at 1.0 per add,
        // the f64 path keeps the residue.
        let half_eps = f32::EPSILON / 2.0;
        let xs = vec![1.0f32, half_eps, half_eps];
        let s = sum64(&xs);
        assert!(s > 1.0);
        assert_eq!(s, 1.0 + f32::EPSILON as f64);
    }

    #[test]
    fn dot_matches_hand_value() {
        assert_eq!(dot64(&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]), 32.0);
        assert_eq!(norm64(&[3.0f32, 4.0]), 5.0);
    }
}
