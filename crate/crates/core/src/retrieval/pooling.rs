use super::RetrievalError;

/// Default GeM power.
pub const DEFAULT_GEM_P: f64 = 3.0;

/// Generalized-mean pooling over the rows of an `n × d` feature matrix.
///
/// Returns, per column, `(mean(max(x, 0)^p))^(1/p)`. Negative activations
/// are clamped to zero before exponentiation.
pub fn gem_pool<R: AsRef<[f64]>>(features: &[R], p: f64) -> Result<Vec<f64>, RetrievalError> {
    if !p.is_finite() || p <= 0.0 {
        return Err(RetrievalError::NonPositiveP(p));
    }
    let first = features.first().ok_or(RetrievalError::EmptyInput)?;
    let d = first.as_ref().len();
    if d == 0 {
        return Err(RetrievalError::EmptyInput);
    }
    let mut acc = vec![0.0f64; d];
    for (i, row) in features.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != d {
            return Err(RetrievalError::DimMismatch {
                id: format!("row {i}"),
                got: row.len(),
                want: d,
            });
        }
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x.max(0.0).powf(p);
        }
    }
    let n = features.len() as f64;
    Ok(acc.into_iter().map(|s| (s / n).powf(1.0 / p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_rows_pool_to_themselves() {
        let c = vec![0.25, 2.0, 7.5];
        let rows = vec![c.clone(); 6];
        for p in [0.5, 1.0, 3.0, 10.0] {
            let out = gem_pool(&rows, p).unwrap();
            for (o, e) in out.iter().zip(&c) {
                assert!((o - e).abs() < 1e-12, "p={p}: {o} vs {e}");
            }
        }
    }

    #[test]
    fn cubic_mean_of_one_and_two() {
        let out = gem_pool(&[vec![1.0], vec![2.0]], 3.0).unwrap();
        assert!((out[0] - 1.650964).abs() < 1e-6);
    }

    #[test]
    fn negatives_are_clamped() {
        let out = gem_pool(&[vec![-4.0], vec![2.0]], 1.0).unwrap();
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(gem_pool(&empty, 3.0), Err(RetrievalError::EmptyInput)));
        assert!(matches!(gem_pool(&[vec![1.0]], 0.0), Err(RetrievalError::NonPositiveP(_))));
        assert!(matches!(gem_pool(&[vec![1.0]], -2.0), Err(RetrievalError::NonPositiveP(_))));
        assert!(matches!(gem_pool(&[vec![1.0]], f64::NAN), Err(RetrievalError::NonPositiveP(_))));
        assert!(matches!(
            gem_pool(&[vec![1.0, 2.0], vec![1.0]], 3.0),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6).prop_flat_map(|d| {
            prop::collection::vec(prop::collection::vec(0.0f64..50.0, d), 1..20)
        })
    }

    proptest! {
        #[test]
        fn p1_is_arithmetic_mean(rows in matrix()) {
            let out = gem_pool(&rows, 1.0).unwrap();
            for (j, o) in out.iter().enumerate() {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                prop_assert!((o - mean).abs() <= 1e-12 * mean.max(1.0));
            }
        }

        #[test]
        fn bounded_by_column_extremes(rows in matrix(), p in 0.1f64..12.0) {
            let out = gem_pool(&rows, p).unwrap();
            for (j, o) in out.iter().enumerate() {
                let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-9 * hi.max(1.0);
                prop_assert!(*o >= lo - slack && *o <= hi + slack, "{lo} <= {o} <= {hi}");
            }
        }
    }
}
