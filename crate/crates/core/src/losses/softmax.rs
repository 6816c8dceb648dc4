use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Mean softmax cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxXent<T> {
    pub value: T,
    pub dlogits: Matrix<T>,
}

/// Batch-averaged `-log softmax(logits_i)[label_i]`, stabilized by
/// subtracting each row's maximum. `dlogits = (softmax - onehot) / M`.
pub fn softmax_xent<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<SoftmaxXent<T>> {
    let (m, n) = logits.shape();
    if m == 0 || n == 0 {
        return Err(Error::invalid("softmax cross-entropy on an empty logit matrix"));
    }
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("label {bad} out of range for {n} classes")));
    }

    let inv_m = T::from_usize_lossy(m).recip();
    let mut dlogits = Matrix::zeros(m, n);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        total += log_sum - (row[label] - max);

        let out = dlogits.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            out[j] = (z - max).exp() / sum * inv_m;
        }
        out[label] -= inv_m;
    }
    Ok(SoftmaxXent {
        value: total * inv_m,
        dlogits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{compare_gradients, finite_difference_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_n() {
        let logits = Matrix::from_vec(2, 4, vec![0.3; 8]).unwrap();
        let r = softmax_xent(&logits, &[0, 3]).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_prediction() {
        let mut logits = Matrix::<f64>::zeros(1, 5);
        logits.set(0, 2, 50.0);
        let r = softmax_xent(&logits, &[2]).unwrap();
        assert!(r.value < 1e-6);
    }

    #[test]
    fn huge_logits_are_stable() {
        let logits = Matrix::from_vec(1, 3, vec![1000.0f64, 999.0, -1000.0]).unwrap();
        let r = softmax_xent(&logits, &[1]).unwrap();
        assert!(r.value.is_finite());
        let expect = 1.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((r.value - expect).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Matrix::<f64>::zeros(1, 3);
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let data: Vec<f64> = (0..80).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = Matrix::from_vec(8, 10, data).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| (i * 3) % 10).collect();
        let r = softmax_xent(&logits, &labels).unwrap();
        for row in r.dlogits.iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        let num = finite_difference_grad(|z| softmax_xent(z, &labels).unwrap().value, &logits, 1e-5);
        let rep = compare_gradients(r.dlogits.as_slice(), num.as_slice());
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }
}
