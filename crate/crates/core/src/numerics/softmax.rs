use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Softmax of one row in place. Entries with `masked(j)` become exactly
/// zero; the rest are normalized with max-subtraction and an f64 sum.
///
/// Returns `false` (leaving the row untouched) when every entry is masked.
pub(crate) fn softmax_row_masked<R: Real>(row: &mut [R], masked: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if !masked(j) {
            max = max.max(v.as_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if masked(j) {
            *v = R::zero();
        } else {
            let e = (v.as_f64() - max).exp();
            sum += e;
            *v = R::lit(e);
        }
    }
    let inv = 1.0 / sum;
    for (j, v) in row.iter_mut().enumerate() {
        if !masked(j) {
            *v = R::lit(v.as_f64() * inv);
        }
    }
    true
}

/// Row-wise softmax where `masked[i*c + j]` marks entry (i, j) as −∞.
///
/// −∞ is never materialized: masked entries are written as exact zeros, so
/// no `(−∞) − (−∞)` can appear during max-subtraction.
pub fn masked_row_softmax<R: Real>(s: &Tensor<R>, masked: &[bool]) -> Result<Tensor<R>> {
    let (r, c) = s.dims2()?;
    if masked.len() != r * c {
        return Err(Error::dim(format!(
            "mask has {} entries, logits are {r}×{c}",
            masked.len()
        )));
    }
    let mut out = s.data().to_vec();
    for i in 0..r {
        let row_mask = &masked[i * c..(i + 1) * c];
        if !softmax_row_masked(&mut out[i * c..(i + 1) * c], |j| row_mask[j]) {
            return Err(Error::DegenerateMask(format!("softmax row {i} is fully masked")));
        }
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

/// Row-wise softmax with the same column mask broadcast to every row.
pub fn column_masked_softmax<R: Real>(s: &Tensor<R>, masked_cols: &[bool]) -> Result<Tensor<R>> {
    let (r, c) = s.dims2()?;
    if masked_cols.len() != c {
        return Err(Error::dim(format!(
            "column mask has {} entries, logits have {c} columns",
            masked_cols.len()
        )));
    }
    if c > 0 && masked_cols.iter().all(|&m| m) {
        return Err(Error::DegenerateMask("every column is masked".into()));
    }
    let mut out = s.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        softmax_row_masked(row, |j| masked_cols[j]);
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

pub fn row_softmax<R: Real>(s: &Tensor<R>) -> Result<Tensor<R>> {
    let (_, c) = s.dims2()?;
    column_masked_softmax(s, &vec![false; c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn unmasked_zero_row_is_uniform() {
        let a = masked_row_softmax(&t(&[vec![0.0, 0.0]]), &[false, false]).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_surviving_column_takes_all_mass() {
        for (a, b) in [(0.0, 0.0), (100.0, -100.0), (-3.0, 7.5)] {
            let out = masked_row_softmax(&t(&[vec![a, b]]), &[true, false]).unwrap();
            assert_eq!(out.data(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn masked_middle_column_matches_scalar_softmax() {
        let out = masked_row_softmax(&t(&[vec![1.0, 2.0, 3.0]]), &[false, true, false]).unwrap();
        // softmax over {1, 3}: e^1/(e^1+e^3), e^3/(e^1+e^3)
        let e1 = 1.0f64.exp();
        let e3 = 3.0f64.exp();
        assert!((out.data()[0] - e1 / (e1 + e3)).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - e3 / (e1 + e3)).abs() < 1e-15);
        assert!((out.data()[0] - 0.119_202_922_022_117_57).abs() < 1e-12);
        assert!((out.data()[2] - 0.880_797_077_977_882_4).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let err = masked_row_softmax(&t(&[vec![1.0, 2.0], vec![0.0, 0.0]]), &[false, false, true, true]);
        assert!(matches!(err, Err(Error::DegenerateMask(_))));
        let err = column_masked_softmax(&t(&[vec![1.0, 2.0]]), &[true, true]);
        assert!(matches!(err, Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let out = row_softmax(&t(&[vec![1e300, -1e300, 0.0]])).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
    }

    fn logits_and_mask() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<bool>)> {
        (1usize..6, 1usize..9).prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                prop::collection::vec(-30.0f64..30.0, r * c),
                prop::collection::vec(any::<bool>(), r * c),
            )
        })
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_masked_are_zero((r, c, logits, mut mask) in logits_and_mask()) {
            for i in 0..r {
                mask[i * c] = false;
            }
            let s = Tensor::new(vec![r, c], logits).unwrap();
            let a = masked_row_softmax(&s, &mask).unwrap();
            for i in 0..r {
                let row = a.row(i);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                for j in 0..c {
                    if mask[i * c + j] {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }

        #[test]
        fn invariant_under_row_shift((r, c, logits, mut mask) in logits_and_mask(), shift in -50.0f64..50.0) {
            for i in 0..r {
                mask[i * c] = false;
            }
            let s = Tensor::new(vec![r, c], logits.clone()).unwrap();
            let shifted = Tensor::new(vec![r, c], logits.iter().map(|v| v + shift).collect()).unwrap();
            let a = masked_row_softmax(&s, &mask).unwrap();
            let b = masked_row_softmax(&shifted, &mask).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }
}
