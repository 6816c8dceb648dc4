//! Loss terms with analytic gradients with respect to the embeddings.

mod gradcheck;
mod pairwise;
mod range;
mod softmax;

pub use gradcheck::{
    compare_gradients, finite_difference_batch_grad, finite_difference_grad, relative_error, GradCheckReport,
    REL_ERROR_FLOOR,
};
pub use pairwise::{contrastive_loss, triplet_loss};
pub use range::{inter_range_loss, intra_range_loss, range_loss, RangeLossConfig, RangeLossParts};
pub use softmax::{softmax_xent, SoftmaxXent};

use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Non-fatal conditions noticed while evaluating a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWarning {
    /// Fewer than two identities in the batch; the inter-class term is zero.
    SingleIdentity,
}

/// Scalar loss value plus one gradient row per batch sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub grads: Matrix<T>,
    pub warning: Option<LossWarning>,
}

impl<T: Scalar> LossResult<T> {
    pub fn zero(rows: usize, dim: usize) -> Self {
        Self {
            value: T::zero(),
            grads: Matrix::zeros(rows, dim),
            warning: None,
        }
    }

    /// Sum of all gradient rows.
    pub fn grad_sum(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.grads.cols()];
        for row in self.grads.iter_rows() {
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
        acc
    }
}
