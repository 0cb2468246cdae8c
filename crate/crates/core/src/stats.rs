//! Small order-statistics helpers.

use alloc::vec::Vec;

/// Median of a sample; an even-sized sample yields the mean of the two
/// central values. Returns `None` for an empty sample.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    Some(median_in_place(&mut v))
}

/// Median that reorders `values`. Panics on empty input.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    assert!(n > 0, "median of empty sample");
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[2.0, 4.0]), Some(3.0));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn matches_full_sort(mut v in prop::collection::vec(-1e3..1e3f64, 1..60)) {
            let m = median(&v).unwrap();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let expect = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            prop_assert_eq!(m, expect);
        }
    }

    #[test]
    fn single() {
        assert_eq!(median(&[5.0]), Some(5.0));
    }
}
