//! Error metrics. MSE is reported in normalized (standardized) field units
//! unless a caller explicitly denormalizes first.

use super::DataError;

/// Mean of squared differences over all entries.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, DataError> {
    if pred.len() != truth.len() {
        return Err(DataError::Invalid(format!(
            "mse length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(DataError::Invalid("mse of empty vectors".into()));
    }
    let s: f64 = pred.iter().zip(truth).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Mean of per-sample MSEs.
pub fn dataset_mse(per_sample: &[f64]) -> Result<f64, DataError> {
    if per_sample.is_empty() {
        return Err(DataError::Invalid("dataset mse over zero samples".into()));
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Population variance of a slice.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m: f64 = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_fields_have_zero_mse() {
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(mse(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn unit_offset_has_unit_mse() {
        let truth = vec![0.3, 1.7, -4.0, 2.2];
        let pred: Vec<f64> = truth.iter().map(|v| v + 1.0).collect();
        assert!((mse(&pred, &truth).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..100).map(|i| (i as f64 * 0.91).cos()).collect();
        let got = mse(&a, &b).unwrap();
        let mut acc = 0.0;
        for i in 0..100 {
            let d = a[i] - b[i];
            acc += d * d;
        }
        let expected = acc / 100.0;
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }
}
