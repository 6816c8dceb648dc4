//! Central finite differences, used as the oracle for analytic gradients.

use crate::error::Result;
use crate::geometry::EmbeddingBatch;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst entry of an analytic-vs-numeric comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare_gradients<T: Scalar>(analytic: &[T], numeric: &[T]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut rep = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let (a, n) = (a.as_f64(), n.as_f64());
        let e = relative_error(a, n);
        // NaN must not hide behind the comparison
        if e > rep.max_rel_error || e.is_nan() {
            rep = GradCheckReport {
                max_rel_error: if e.is_nan() { f64::INFINITY } else { e },
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    rep
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_difference_grad<T, F>(loss_fn: F, x: &Matrix<T>, step: f64) -> Matrix<T>
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> T,
{
    let h = T::lit(step);
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = loss_fn(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = loss_fn(&probe);
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (up - down) / (h + h);
    }
    out
}

/// Finite-difference gradient of a batch loss with respect to its embeddings.
pub fn finite_difference_batch_grad<T, F>(loss_fn: F, batch: &EmbeddingBatch<T>, step: f64) -> Result<Matrix<T>>
where
    T: Scalar,
    F: Fn(&EmbeddingBatch<T>) -> T,
{
    let labels = batch.labels().to_vec();
    // validates once; perturbed copies share the same shape and labels
    EmbeddingBatch::new(batch.embeddings().clone(), labels.clone())?;
    Ok(finite_difference_grad(
        |x| {
            let b = EmbeddingBatch::new(x.clone(), labels.clone()).expect("shape preserved");
            loss_fn(&b)
        },
        batch.embeddings(),
        step,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let g = finite_difference_grad(|_| 4.2, &x, 1e-5);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squared_norm_gradient() {
        let x = Matrix::from_vec(1, 3, vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = finite_difference_grad(|m| m.as_slice().iter().map(|v| v * v).sum(), &x, 1e-4);
        for (gi, xi) in g.as_slice().iter().zip(x.as_slice()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn nan_is_reported() {
        let r = compare_gradients(&[1.0, f64::NAN], &[1.0, 1.0]);
        assert_eq!(r.max_rel_error, f64::INFINITY);
        assert_eq!(r.worst_index, 1);
    }
}
