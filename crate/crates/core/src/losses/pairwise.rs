//! Pair and triplet baselines over indices into an embedding matrix.

use super::LossResult;
use crate::error::{Error, Result};
use crate::geometry::sq_distance;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

fn check_index<T: Scalar>(emb: &Matrix<T>, i: usize) -> Result<()> {
    if i >= emb.rows() {
        return Err(Error::invalid(format!("sample index {i} out of range for {} embeddings", emb.rows())));
    }
    Ok(())
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("margin must be > 0, got {margin}")))
    }
}

/// Summed contrastive loss over `(i, j, same)` pairs.
///
/// Positive pairs add `|x_i - x_j|^2`; negative pairs add
/// `max(margin - |x_i - x_j|, 0)^2` using the unsquared distance. Coincident
/// negative pairs get a zero gradient since the direction is undefined.
pub fn contrastive_loss<T: Scalar>(
    embeddings: &Matrix<T>,
    pairs: &[(usize, usize, bool)],
    margin: f64,
) -> Result<LossResult<T>> {
    check_margin(margin)?;
    let m = T::lit(margin);
    let two = T::lit(2.0);
    let mut out = LossResult::zero(embeddings.rows(), embeddings.cols());
    for &(i, j, same) in pairs {
        check_index(embeddings, i)?;
        check_index(embeddings, j)?;
        let (xi, xj) = (embeddings.row(i), embeddings.row(j));
        let d2 = sq_distance(xi, xj);
        let coef = if same {
            out.value += d2;
            two
        } else {
            let d = d2.sqrt();
            if d >= m {
                continue;
            }
            let gap = m - d;
            out.value += gap * gap;
            if d > T::zero() {
                -two * gap / d
            } else {
                T::zero()
            }
        };
        for c in 0..embeddings.cols() {
            let g = coef * (embeddings.get(i, c) - embeddings.get(j, c));
            out.grads.row_mut(i)[c] += g;
            out.grads.row_mut(j)[c] -= g;
        }
    }
    Ok(out)
}

/// Summed `max(|a - p|^2 - |a - n|^2 + margin, 0)` over `(anchor, positive,
/// negative)` index triplets.
pub fn triplet_loss<T: Scalar>(
    embeddings: &Matrix<T>,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<LossResult<T>> {
    check_margin(margin)?;
    let m = T::lit(margin);
    let two = T::lit(2.0);
    let mut out = LossResult::zero(embeddings.rows(), embeddings.cols());
    for &(a, p, n) in triplets {
        for idx in [a, p, n] {
            check_index(embeddings, idx)?;
        }
        let h = sq_distance(embeddings.row(a), embeddings.row(p)) - sq_distance(embeddings.row(a), embeddings.row(n)) + m;
        if h <= T::zero() {
            continue;
        }
        out.value += h;
        for c in 0..embeddings.cols() {
            let (xa, xp, xn) = (embeddings.get(a, c), embeddings.get(p, c), embeddings.get(n, c));
            out.grads.row_mut(a)[c] += two * (xn - xp);
            out.grads.row_mut(p)[c] -= two * (xa - xp);
            out.grads.row_mut(n)[c] += two * (xa - xn);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{compare_gradients, finite_difference_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, n: usize, d: usize) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn contrastive_trivial_cases() {
        let e = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![1.0, 2.0], vec![4.0, 6.0]]).unwrap();
        let r = contrastive_loss(&e, &[(0, 1, true)], 1.0).unwrap();
        assert_eq!(r.value, 0.0);
        // distance 5 >= margin 2
        let r = contrastive_loss(&e, &[(0, 2, false)], 2.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grads.as_slice().iter().all(|&g| g == 0.0));
        // distance 5 < margin 6 -> (6-5)^2
        let r = contrastive_loss(&e, &[(0, 2, false)], 6.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        assert!(contrastive_loss(&e, &[(0, 3, true)], 1.0).is_err());
        assert!(contrastive_loss(&e, &[], 0.0).is_err());
    }

    #[test]
    fn contrastive_matches_fd() {
        let e = random(29, 6, 4);
        let pairs = [(0, 1, true), (2, 3, true), (0, 4, false), (1, 5, false), (2, 5, false)];
        let r = contrastive_loss(&e, &pairs, 2.0).unwrap();
        let num = finite_difference_grad(|x| contrastive_loss(x, &pairs, 2.0).unwrap().value, &e, 1e-5);
        let rep = compare_gradients(r.grads.as_slice(), num.as_slice());
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn triplet_trivial_cases() {
        let e = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![3.0]]).unwrap();
        assert_eq!(triplet_loss(&e, &[(0, 1, 2)], 1.0).unwrap().value, 0.0);
        let collapsed = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let r = triplet_loss(&collapsed, &[(0, 1, 2), (0, 1, 2)], 0.5).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn triplet_matches_fd() {
        let e = random(31, 6, 3);
        let trips = [(0, 1, 2), (3, 4, 5), (1, 0, 5), (2, 3, 0)];
        let r = triplet_loss(&e, &trips, 1.5).unwrap();
        assert!(r.value > 0.0);
        let num = finite_difference_grad(|x| triplet_loss(x, &trips, 1.5).unwrap().value, &e, 1e-5);
        let rep = compare_gradients(r.grads.as_slice(), num.as_slice());
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }
}
