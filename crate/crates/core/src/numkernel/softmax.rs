use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn stabilizer<T: Scalar>(scores: &[T]) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    let mut max = T::neg_infinity();
    for &s in scores {
        if s.is_nan() || s == T::infinity() {
            return Err(Error::NonFinite("softmax scores"));
        }
        if s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::FullyMasked);
    }
    Ok(max)
}

/// Max-subtracted softmax. Entries equal to negative infinity are treated as masked and
/// come out as exactly zero.
pub fn softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    let max = stabilizer(scores)?;
    let mut out: Vec<T> = scores
        .iter()
        .map(|&s| {
            if s == T::neg_infinity() {
                T::zero()
            } else {
                (s - max).exp()
            }
        })
        .collect();
    let total: T = out.iter().copied().sum();
    for w in &mut out {
        *w = *w / total;
    }
    Ok(out)
}

/// Softmax with `mask[i] == true` positions forced to the negative-infinity sentinel.
pub fn masked_softmax<T: Scalar>(scores: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if mask.len() != scores.len() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} scores",
            mask.len(),
            scores.len()
        )));
    }
    let masked: Vec<T> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { T::neg_infinity() } else { s })
        .collect();
    softmax(&masked)
}

/// Numerically stable `log(softmax(x))`.
pub fn log_softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    let max = stabilizer(scores)?;
    let total: T = scores.iter().map(|&s| (s - max).exp()).sum();
    let log_total = total.ln() + max;
    Ok(scores.iter().map(|&s| s - log_total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::SeededRng;
    use proptest::prelude::*;
    use crate::testutil::{dd, exp_dd, to_f64};
    use twofloat::TwoFloat;

    #[test]
    fn symmetric_pair() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn single_element_is_one() {
        for x in [-1e300, -3.0, 0.0, 7.5, 1e300] {
            assert_eq!(softmax(&[x]).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn matches_double_double_reference() {
        let scores = [1.0f64, 2.0, 3.0];
        let got = softmax(&scores).unwrap();
        let exps: Vec<TwoFloat> = scores
            .iter()
            .map(|&x| exp_dd(dd(x) - dd(3.0)))
            .collect();
        let total = exps.iter().fold(dd(0.0), |a: TwoFloat, &b| a + b);
        for (g, e) in got.iter().zip(&exps) {
            let want = to_f64(*e / total);
            assert!((g - want).abs() <= 2e-16, "{g} vs {want}");
        }
    }

    #[test]
    fn masked_entries_are_exact_zero() {
        let w = masked_softmax(&[1.0f64, 5.0, -2.0], &[false, true, false]).unwrap();
        assert_eq!(w[1], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_is_an_error() {
        let err = softmax(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap_err();
        assert_eq!(err.to_string(), "fully masked distribution");
        assert!(masked_softmax(&[1.0f64], &[true]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let mut rng = SeededRng::new(5);
        let s: Vec<f64> = (0..20).map(|_| rng.uniform(-30.0, 30.0)).collect();
        let p = softmax(&s).unwrap();
        let lp = log_softmax(&s).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-9 || *a < 1e-300);
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(s in prop::collection::vec(-50.0f64..50.0, 1..24), c in -100.0f64..100.0) {
            let a = softmax(&s).unwrap();
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn masked_equals_subvector_softmax(
            s in prop::collection::vec(-20.0f64..20.0, 2..24),
            mask_bits in prop::collection::vec(any::<bool>(), 24),
        ) {
            let mut mask: Vec<bool> = mask_bits[..s.len()].to_vec();
            mask[0] = false;
            let full = masked_softmax(&s, &mask).unwrap();
            let kept: Vec<f64> = s.iter().zip(&mask).filter(|(_, &m)| !m).map(|(&x, _)| x).collect();
            let sub = softmax(&kept).unwrap();
            let mut it = sub.iter();
            for (w, &m) in full.iter().zip(&mask) {
                if m {
                    prop_assert_eq!(*w, 0.0);
                } else {
                    prop_assert!((w - it.next().unwrap()).abs() <= 1e-12);
                }
            }
        }
    }
}
