//! Multiset statistics generic over the scalar type.
//!
//! The same formulas serve the float aggregation paths and the exact
//! rational arithmetic in [`crate::analyze`]. Variance is the
//! population form `mean(x^2) - mean(x)^2`; ties in `max`/`min` keep
//! the first occurrence.

use num_traits::{FromPrimitive, Num};

use crate::Scalar;

pub fn sum<T: Num + Copy>(vals: &[T]) -> T {
    vals.iter().fold(T::zero(), |acc, &v| acc + v)
}

pub fn mean<T: Num + Copy + FromPrimitive>(vals: &[T]) -> T {
    assert!(!vals.is_empty(), "mean of empty multiset");
    sum(vals) / T::from_usize(vals.len()).expect("count representable")
}

/// First maximum under `PartialOrd`.
pub fn max<T: PartialOrd + Copy>(vals: &[T]) -> T {
    assert!(!vals.is_empty(), "max of empty multiset");
    let mut best = vals[0];
    for &v in &vals[1..] {
        if v > best {
            best = v;
        }
    }
    best
}

/// First minimum under `PartialOrd`.
pub fn min<T: PartialOrd + Copy>(vals: &[T]) -> T {
    assert!(!vals.is_empty(), "min of empty multiset");
    let mut best = vals[0];
    for &v in &vals[1..] {
        if v < best {
            best = v;
        }
    }
    best
}

/// Population variance `mean(x^2) - mean(x)^2`.
pub fn var<T: Num + Copy + FromPrimitive>(vals: &[T]) -> T {
    let m = mean(vals);
    let sq: Vec<T> = vals.iter().map(|&v| v * v).collect();
    mean(&sq) - m * m
}

/// Population standard deviation; float rounding can push the variance
/// a hair below zero, which is clamped.
pub fn std_dev<F: Scalar>(vals: &[F]) -> F {
    var(vals).max(F::zero()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn rational_var_is_exact() {
        let vals: Vec<Ratio<i64>> = [3, 1].iter().map(|&v| Ratio::from_integer(v)).collect();
        assert_eq!(var(&vals), Ratio::from_integer(1));
        let vals: Vec<Ratio<i64>> =
            [3, 3, 1, 1].iter().map(|&v| Ratio::from_integer(v)).collect();
        assert_eq!(var(&vals), Ratio::from_integer(1));
    }

    #[test]
    fn float_stats_match_hand_values() {
        let vals = [2.0_f64, 4.0];
        assert_eq!(mean(&vals), 3.0);
        assert_eq!(max(&vals), 4.0);
        assert_eq!(min(&vals), 2.0);
        assert_eq!(sum(&vals), 6.0);
        assert_eq!(var(&vals), 1.0);
        assert!((std_dev(&vals) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_tie_wins() {
        // Equal values: max/min just return the value, but the loop keeps
        // the first occurrence, which gradient routing relies on.
        let vals = [1.0_f64, 1.0, 1.0];
        assert_eq!(max(&vals), 1.0);
    }
}
