//! Range loss: harmonic mean of each identity's largest intra-class ranges
//! plus a hinge on the closest pair of class centers.

use serde::{Deserialize, Serialize};

use super::{LossResult, LossWarning};
use crate::error::{Error, Result};
use crate::geometry::{min_center_pair, EmbeddingBatch};
use crate::scalar::Scalar;

/// Hyperparameters of the range loss.
///
/// `w_intra` and `w_inter` are the effective coefficients applied to the two
/// parts, i.e. the per-part weight already multiplied by the joint-loss scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeLossConfig {
    pub k: usize,
    pub margin: f64,
    pub w_intra: f64,
    pub w_inter: f64,
    pub eps: f64,
}

impl Default for RangeLossConfig {
    fn default() -> Self {
        Self {
            k: 2,
            margin: 2.0e4,
            w_intra: 1.0e-5,
            w_inter: 1.0e-4,
            eps: 1.0e-12,
        }
    }
}

impl RangeLossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k == 0 {
            bad.push("k must be >= 1");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            bad.push("margin must be > 0");
        }
        if !(self.w_intra >= 0.0 && self.w_intra.is_finite()) {
            bad.push("w_intra must be >= 0");
        }
        if !(self.w_inter >= 0.0 && self.w_inter.is_finite()) {
            bad.push("w_inter must be >= 0");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            bad.push("eps must be > 0");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("range loss config: {}", bad.join(", "))))
        }
    }
}

/// Intra-class part: for every identity with at least two samples, the
/// harmonic mean `k' / sum_j 1/max(D_j, eps)` of its `k' <= k` largest
/// squared ranges.
pub fn intra_range_loss<T: Scalar>(batch: &EmbeddingBatch<T>, k: usize, eps: f64) -> Result<LossResult<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("intra range loss on an empty batch"));
    }
    let eps = T::lit(eps);
    let two = T::lit(2.0);
    let emb = batch.embeddings();
    let mut out = LossResult::zero(batch.len(), batch.dim());

    for (_, stat) in batch.identity_ranges(k)? {
        let kk = T::from_usize_lossy(stat.ranges.len());
        let s: T = stat.ranges.iter().map(|&d| (d.max(eps)).recip()).sum();
        out.value += kk / s;

        for (&d, &(a, b)) in stat.ranges.iter().zip(&stat.pairs) {
            // floored ranges are constant in the forward pass
            if d < eps {
                continue;
            }
            let ds = d * s;
            let coef = two * kk / (ds * ds);
            for c in 0..batch.dim() {
                let diff = emb.get(a, c) - emb.get(b, c);
                let g = coef * diff;
                out.grads.row_mut(a)[c] += g;
                out.grads.row_mut(b)[c] -= g;
            }
        }
    }
    Ok(out)
}

/// Inter-class part: `max(m - D_center, 0)` on the closest pair of centers.
///
/// A batch with a single identity yields zero loss with
/// [`LossWarning::SingleIdentity`] instead of an error.
pub fn inter_range_loss<T: Scalar>(batch: &EmbeddingBatch<T>, margin: f64) -> Result<LossResult<T>> {
    let mut out = LossResult::zero(batch.len(), batch.dim());
    if batch.num_identities() < 2 {
        out.warning = Some(LossWarning::SingleIdentity);
        return Ok(out);
    }
    let pair = min_center_pair(batch)?;
    let gap = T::lit(margin) - pair.sq_distance;
    if gap <= T::zero() {
        return Ok(out);
    }
    out.value = gap;

    let two = T::lit(2.0);
    let groups = batch.groups();
    for (members, own, other) in [
        (&groups[&pair.identity_a], &pair.center_a, &pair.center_b),
        (&groups[&pair.identity_b], &pair.center_b, &pair.center_a),
    ] {
        let scale = two / T::from_usize_lossy(members.len());
        for &i in members {
            let row = out.grads.row_mut(i);
            for c in 0..row.len() {
                row[c] = scale * (other[c] - own[c]);
            }
        }
    }
    Ok(out)
}

/// Both unweighted parts together with their weighted combination.
#[derive(Debug, Clone)]
pub struct RangeLossParts<T> {
    pub intra: LossResult<T>,
    pub inter: LossResult<T>,
    pub combined: LossResult<T>,
}

/// `w_intra * intra + w_inter * inter`, gradients combined linearly.
pub fn range_loss<T: Scalar>(batch: &EmbeddingBatch<T>, config: &RangeLossConfig) -> Result<RangeLossParts<T>> {
    config.validate()?;
    let intra = intra_range_loss(batch, config.k, config.eps)?;
    let inter = inter_range_loss(batch, config.margin)?;
    let (wa, we) = (T::lit(config.w_intra), T::lit(config.w_inter));
    let mut grads = intra.grads.clone();
    grads.as_mut_slice().iter_mut().for_each(|g| *g *= wa);
    grads.add_scaled(&inter.grads, we)?;
    let combined = LossResult {
        value: wa * intra.value + we * inter.value,
        grads,
        warning: inter.warning,
    };
    Ok(RangeLossParts { intra, inter, combined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::IdentityId;
    use crate::losses::{compare_gradients, finite_difference_batch_grad};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[Vec<f64>], labels: &[u32]) -> EmbeddingBatch<f64> {
        EmbeddingBatch::from_rows(rows, labels.iter().copied().map(IdentityId).collect()).unwrap()
    }

    fn random_batch(seed: u64, ids: usize, per: usize, d: usize) -> EmbeddingBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for id in 0..ids {
            for _ in 0..per {
                rows.push((0..d).map(|_| rng.random_range(-1.0..1.0) + id as f64).collect::<Vec<_>>());
                labels.push(id as u32);
            }
        }
        batch(&rows, &labels)
    }

    #[test]
    fn intra_single_range_is_the_range() {
        let b = batch(&[vec![0.0, 0.0], vec![0.0, 2.0]], &[1, 1]);
        let r = intra_range_loss(&b, 2, 1e-12).unwrap();
        assert_eq!(r.value, 4.0);
    }

    #[test]
    fn intra_harmonic_mean_two_ranges() {
        // points 0, a, b on a line: ranges chosen so top-2 are {6, 2}
        // x0=0, x1=sqrt(2), x2 = sqrt(6) -> d02=6, d01=2, d12=(sqrt6-sqrt2)^2 ~ 1.07
        let b = batch(&[vec![0.0], vec![2f64.sqrt()], vec![6f64.sqrt()]], &[0, 0, 0]);
        let r = intra_range_loss(&b, 2, 1e-12).unwrap();
        assert!((r.value - 3.0).abs() < 1e-12, "{}", r.value);
    }

    #[test]
    fn intra_singletons_contribute_nothing() {
        let b = batch(&[vec![0.0], vec![5.0]], &[0, 1]);
        let r = intra_range_loss(&b, 2, 1e-12).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grads.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn intra_coincident_points_stay_finite() {
        let b = batch(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]], &[0, 0, 0]);
        let r = intra_range_loss(&b, 2, 1e-12).unwrap();
        assert!(r.value.is_finite());
        assert!(r.value <= 1e-12);
        assert!(r.grads.is_finite());
    }

    #[test]
    fn intra_gradient_matches_finite_differences() {
        let b = random_batch(13, 3, 4, 5);
        let r = intra_range_loss(&b, 2, 1e-12).unwrap();
        let num = finite_difference_batch_grad(|x| intra_range_loss(x, 2, 1e-12).unwrap().value, &b, 1e-5).unwrap();
        let rep = compare_gradients(r.grads.as_slice(), num.as_slice());
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn inter_hinge_value() {
        let b = batch(&[vec![0.0], vec![0.5]], &[0, 1]);
        let r = inter_range_loss(&b, 1.0).unwrap();
        assert_eq!(r.value, 0.75);
        // d/dx_Q = (2/n_Q)(c_R - c_Q)
        assert_eq!(r.grads.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn inter_inactive_and_single_identity() {
        let b = batch(&[vec![0.0], vec![3.0]], &[0, 1]);
        let r = inter_range_loss(&b, 1.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grads.as_slice().iter().all(|&g| g == 0.0));

        let b = batch(&[vec![0.0], vec![3.0]], &[0, 0]);
        let r = inter_range_loss(&b, 1.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.warning, Some(LossWarning::SingleIdentity));
    }

    #[test]
    fn inter_gradient_matches_finite_differences() {
        let b = random_batch(17, 4, 3, 4);
        let d = min_center_pair(&b).unwrap().sq_distance;
        let m = d + 2.0;
        let r = inter_range_loss(&b, m).unwrap();
        assert!(r.value > 0.0);
        let num = finite_difference_batch_grad(|x| inter_range_loss(x, m).unwrap().value, &b, 1e-5).unwrap();
        let rep = compare_gradients(r.grads.as_slice(), num.as_slice());
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn range_loss_weights() {
        let b = random_batch(21, 3, 4, 3);
        let zero = RangeLossConfig { w_intra: 0.0, w_inter: 0.0, margin: 50.0, ..Default::default() };
        let r = range_loss(&b, &zero).unwrap().combined;
        assert_eq!(r.value, 0.0);
        assert!(r.grads.as_slice().iter().all(|&g| g == 0.0));

        let only_intra = RangeLossConfig { w_intra: 1.0, w_inter: 0.0, margin: 50.0, ..Default::default() };
        let r = range_loss(&b, &only_intra).unwrap().combined;
        let intra = intra_range_loss(&b, 2, 1e-12).unwrap();
        assert_eq!(r.value, intra.value);
        assert_eq!(r.grads, intra.grads);

        let defaults = RangeLossConfig { margin: 50.0, ..Default::default() };
        let parts = range_loss(&b, &defaults).unwrap();
        let inter = inter_range_loss(&b, 50.0).unwrap();
        let expect = 1e-5 * intra.value + 1e-4 * inter.value;
        assert!((parts.combined.value - expect).abs() < 1e-12);
        for i in 0..parts.combined.grads.as_slice().len() {
            let e = 1e-5 * intra.grads.as_slice()[i] + 1e-4 * inter.grads.as_slice()[i];
            assert!((parts.combined.grads.as_slice()[i] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RangeLossConfig::default().validate().is_ok());
        assert!(RangeLossConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(RangeLossConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(RangeLossConfig { w_inter: -1.0, ..Default::default() }.validate().is_err());
    }

    fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<u32>)> {
        (2usize..5, 2usize..5, 1usize..4).prop_flat_map(|(ids, per, d)| {
            let labels: Vec<u32> = (0..ids * per).map(|i| (i / per) as u32).collect();
            (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), ids * per), Just(labels))
        })
    }

    proptest! {
        #[test]
        fn translation_invariance((rows, labels) in batch_strategy(), shift in -4.0f64..4.0) {
            let b = batch(&rows, &labels);
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
            let bm = batch(&moved, &labels);
            let a = intra_range_loss(&b, 2, 1e-12).unwrap();
            let am = intra_range_loss(&bm, 2, 1e-12).unwrap();
            prop_assert!((a.value - am.value).abs() <= 1e-8 * (1.0 + a.value));
            let e = inter_range_loss(&b, 4.0).unwrap();
            let em = inter_range_loss(&bm, 4.0).unwrap();
            prop_assert!((e.value - em.value).abs() <= 1e-8);
            for (g, gm) in a.grads.as_slice().iter().zip(am.grads.as_slice()) {
                prop_assert!((g - gm).abs() <= 1e-6 * (1.0 + g.abs()));
            }
        }

        #[test]
        fn gradients_sum_to_zero((rows, labels) in batch_strategy()) {
            let b = batch(&rows, &labels);
            for r in [intra_range_loss(&b, 2, 1e-12).unwrap(), inter_range_loss(&b, 5.0).unwrap()] {
                for s in r.grad_sum() {
                    prop_assert!(s.abs() < 1e-9);
                }
            }
        }

        #[test]
        fn intra_invariant_under_relabel_and_permutation((rows, labels) in batch_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let b = batch(&rows, &labels);
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let plab: Vec<u32> = perm.iter().map(|&i| labels[i] * 7 + 100).collect();
            let bp = batch(&prow, &plab);
            let a = intra_range_loss(&b, 2, 1e-12).unwrap().value;
            let c = intra_range_loss(&bp, 2, 1e-12).unwrap().value;
            prop_assert!((a - c).abs() <= 1e-10 * (1.0 + a));
        }

        #[test]
        fn inter_positive_iff_inside_margin((rows, labels) in batch_strategy(), m in 0.1f64..20.0) {
            let b = batch(&rows, &labels);
            let d = min_center_pair(&b).unwrap().sq_distance;
            let v = inter_range_loss(&b, m).unwrap().value;
            prop_assert_eq!(v > 0.0, d < m);
        }
    }
}
