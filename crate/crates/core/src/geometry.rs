//! Distance kernels over embedding batches.
//!
//! All distances are squared Euclidean. Ties are broken lexicographically on
//! index pairs (for ranges) or identity pairs (for centers) so outputs are
//! deterministic.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Identity (class) label of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityId(pub u32);

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A mini-batch of embeddings with their identity labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<T> {
    embeddings: Matrix<T>,
    labels: Vec<IdentityId>,
    groups: BTreeMap<IdentityId, Vec<usize>>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(embeddings: Matrix<T>, labels: Vec<IdentityId>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.rows(),
                found: labels.len(),
            });
        }
        if embeddings.rows() > 0 && embeddings.cols() == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        let mut groups: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        Ok(Self {
            embeddings,
            labels,
            groups,
        })
    }

    pub fn from_rows<V: AsRef<[T]>>(rows: &[V], labels: Vec<IdentityId>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, labels)
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[IdentityId] {
        &self.labels
    }

    pub fn groups(&self) -> &BTreeMap<IdentityId, Vec<usize>> {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    pub fn group_vectors(&self, id: IdentityId) -> Vec<&[T]> {
        self.groups
            .get(&id)
            .map(|idx| idx.iter().map(|&i| self.embeddings.row(i)).collect())
            .unwrap_or_default()
    }

    /// Class centers in ascending identity order.
    pub fn centers(&self) -> Vec<(IdentityId, Vec<T>)> {
        self.groups
            .iter()
            .map(|(&id, idx)| {
                let rows: Vec<&[T]> = idx.iter().map(|&i| self.embeddings.row(i)).collect();
                (id, mean_of(&rows, self.dim()))
            })
            .collect()
    }

    /// Top-k ranges of every identity with at least two samples. Pair indices
    /// refer to rows of the batch, not positions within the group.
    pub fn identity_ranges(&self, k: usize) -> Result<Vec<(IdentityId, RangeStat<T>)>> {
        let mut out = Vec::new();
        for (&id, idx) in &self.groups {
            if idx.len() < 2 {
                continue;
            }
            let rows: Vec<&[T]> = idx.iter().map(|&i| self.embeddings.row(i)).collect();
            let mut stat = top_k_ranges(&rows, k)?;
            for p in &mut stat.pairs {
                *p = (idx[p.0], idx[p.1]);
            }
            out.push((id, stat));
        }
        Ok(out)
    }
}

/// The `k` largest pairwise squared distances of one group, descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStat<T> {
    pub ranges: Vec<T>,
    pub pairs: Vec<(usize, usize)>,
}

/// Closest pair of class centers in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterPair<T> {
    pub identity_a: IdentityId,
    pub identity_b: IdentityId,
    pub sq_distance: T,
    pub center_a: Vec<T>,
    pub center_b: Vec<T>,
}

#[inline]
pub fn sq_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn check_uniform<T, V: AsRef<[T]>>(vectors: &[V]) -> Result<usize> {
    let d = vectors.first().map_or(0, |v| v.as_ref().len());
    for v in vectors {
        if v.as_ref().len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.as_ref().len(),
            });
        }
    }
    Ok(d)
}

fn mean_of<T: Scalar, V: AsRef<[T]>>(vectors: &[V], dim: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); dim];
    for v in vectors {
        for (a, &x) in acc.iter_mut().zip(v.as_ref()) {
            *a += x;
        }
    }
    let n = T::from_usize_lossy(vectors.len());
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Symmetric matrix of squared Euclidean distances with a zero diagonal.
pub fn pairwise_sq_distances<T: Scalar, V: AsRef<[T]>>(vectors: &[V]) -> Result<Matrix<T>> {
    if vectors.is_empty() {
        return Err(Error::invalid("pairwise distances need at least one vector"));
    }
    check_uniform(vectors)?;
    let n = vectors.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_distance(vectors[i].as_ref(), vectors[j].as_ref());
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

/// Component-wise arithmetic mean.
pub fn class_center<T: Scalar, V: AsRef<[T]>>(vectors: &[V]) -> Result<Vec<T>> {
    if vectors.is_empty() {
        return Err(Error::invalid("class center of an empty group"));
    }
    let d = check_uniform(vectors)?;
    Ok(mean_of(vectors, d))
}

// Descending by distance, then ascending by index pair.
fn range_order<T: Scalar>(a: &(T, (usize, usize)), b: &(T, (usize, usize))) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(&b.1))
}

/// The `min(k, n(n-1)/2)` largest pairwise squared distances of a group.
///
/// Returns [`Error::DegenerateGroup`] for groups with fewer than two members;
/// callers decide whether that is fatal.
pub fn top_k_ranges<T: Scalar, V: AsRef<[T]>>(group: &[V], k: usize) -> Result<RangeStat<T>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if group.len() < 2 {
        return Err(Error::DegenerateGroup { size: group.len() });
    }
    check_uniform(group)?;
    // bounded insertion; k is small in practice
    let mut best: Vec<(T, (usize, usize))> = Vec::with_capacity(k + 1);
    for i in 0..group.len() {
        for j in (i + 1)..group.len() {
            let cand = (sq_distance(group[i].as_ref(), group[j].as_ref()), (i, j));
            if best.len() == k && range_order(&cand, &best[k - 1]) != Ordering::Less {
                continue;
            }
            let pos = best.partition_point(|e| range_order(e, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        }
    }
    let (ranges, pairs) = best.into_iter().unzip();
    Ok(RangeStat { ranges, pairs })
}

/// Identity pair whose centers are closest.
pub fn min_center_pair<T: Scalar>(batch: &EmbeddingBatch<T>) -> Result<CenterPair<T>> {
    if batch.num_identities() < 2 {
        return Err(Error::invalid(format!(
            "closest center pair needs at least 2 identities, batch has {}",
            batch.num_identities()
        )));
    }
    let centers = batch.centers();
    let mut best: Option<(usize, usize, T)> = None;
    for a in 0..centers.len() {
        for b in (a + 1)..centers.len() {
            let d = sq_distance(&centers[a].1, &centers[b].1);
            // strict comparison keeps the lexicographically first pair on ties
            if best.is_none_or(|(_, _, bd)| d < bd) {
                best = Some((a, b, d));
            }
        }
    }
    let (a, b, d) = best.expect("at least one pair");
    Ok(CenterPair {
        identity_a: centers[a].0,
        identity_b: centers[b].0,
        sq_distance: d,
        center_a: centers[a].1.clone(),
        center_b: centers[b].1.clone(),
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vectors(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    fn ids(v: &[u32]) -> Vec<IdentityId> {
        v.iter().copied().map(IdentityId).collect()
    }

    #[test]
    fn pairwise_right_triangle() {
        let m = pairwise_sq_distances(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.as_slice(), &[0.0, 25.0, 25.0, 0.0]);
    }

    #[test]
    fn pairwise_identical_points() {
        let v = vec![1.5, -2.0, 0.25];
        let m = pairwise_sq_distances(&[v.clone(), v]).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let vs = random_vectors(7, 6, 3);
        let m = pairwise_sq_distances(&vs).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += (vs[i][c] - vs[j][c]).powi(2);
                }
                assert_eq!(m.get(i, j), acc);
            }
        }
    }

    #[test]
    fn pairwise_rejects_ragged() {
        let err = pairwise_sq_distances(&[vec![0.0, 1.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(pairwise_sq_distances(&empty).is_err());
    }

    #[test]
    fn center_cases() {
        assert_eq!(class_center(&[vec![1.0, 1.0]]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(
            class_center(&[vec![0.0, 0.0], vec![2.0, 4.0]]).unwrap(),
            vec![1.0, 2.0]
        );
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(class_center(&empty).is_err());

        let vs = random_vectors(3, 8, 4);
        let c = class_center(&vs).unwrap();
        for dim in 0..4 {
            let mut sum = 0.0;
            let mut count = 0.0;
            for v in &vs {
                sum += v[dim];
                count += 1.0;
            }
            assert!((c[dim] - sum / count).abs() < 1e-15);
        }
    }

    #[test]
    fn top_k_small_groups() {
        let r = top_k_ranges(&[vec![0.0, 0.0], vec![0.0, 3.0]], 2).unwrap();
        assert_eq!(r.ranges, vec![9.0]);
        assert_eq!(r.pairs, vec![(0, 1)]);

        let same = vec![vec![1.0, 2.0]; 4];
        let r = top_k_ranges(&same, 2).unwrap();
        assert_eq!(r.ranges, vec![0.0, 0.0]);
        // lexicographic tie-break
        assert_eq!(r.pairs, vec![(0, 1), (0, 2)]);

        assert!(matches!(
            top_k_ranges(&[vec![1.0]], 2),
            Err(Error::DegenerateGroup { size: 1 })
        ));
    }

    #[test]
    fn top_k_matches_enumeration() {
        let vs = random_vectors(11, 5, 2);
        let r = top_k_ranges(&vs, 2).unwrap();
        let mut all = Vec::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                all.push(sq_distance(&vs[i], &vs[j]));
            }
        }
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(r.ranges, all[..2].to_vec());
        for (d, &(a, b)) in r.ranges.iter().zip(&r.pairs) {
            assert_eq!(*d, sq_distance(&vs[a], &vs[b]));
        }
    }

    #[test]
    fn min_center_cases() {
        let b = EmbeddingBatch::from_rows(
            &[vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 0.0]],
            ids(&[1, 2, 3]),
        )
        .unwrap();
        let p = min_center_pair(&b).unwrap();
        assert_eq!((p.identity_a, p.identity_b), (IdentityId(1), IdentityId(2)));
        assert_eq!(p.sq_distance, 1.0);

        let b = EmbeddingBatch::from_rows(&[vec![0.0], vec![2.0]], ids(&[4, 9])).unwrap();
        let p = min_center_pair(&b).unwrap();
        assert_eq!((p.identity_a, p.identity_b, p.sq_distance), (IdentityId(4), IdentityId(9), 4.0));

        let b = EmbeddingBatch::from_rows(&[vec![0.0], vec![2.0]], ids(&[4, 4])).unwrap();
        assert!(min_center_pair(&b).is_err());
    }

    #[test]
    fn min_center_matches_enumeration() {
        let vs = random_vectors(5, 18, 3);
        let labels: Vec<u32> = (0..18).map(|i| (i % 6) as u32).collect();
        let b = EmbeddingBatch::from_rows(&vs, ids(&labels)).unwrap();
        let p = min_center_pair(&b).unwrap();
        let mut best = f64::INFINITY;
        for a in 0..6u32 {
            for c in (a + 1)..6u32 {
                let ca = class_center(&b.group_vectors(IdentityId(a))).unwrap();
                let cb = class_center(&b.group_vectors(IdentityId(c))).unwrap();
                best = best.min(sq_distance(&ca, &cb));
            }
        }
        assert_eq!(p.sq_distance, best);
        assert_eq!(p.sq_distance, sq_distance(&p.center_a, &p.center_b));
    }

    #[test]
    fn batch_groups_partition_samples() {
        let b = EmbeddingBatch::from_rows(&random_vectors(1, 7, 2), ids(&[3, 1, 3, 2, 1, 1, 3])).unwrap();
        let total: usize = b.groups().values().map(Vec::len).sum();
        assert_eq!(total, 7);
        let mut seen: Vec<usize> = b.groups().values().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert!(EmbeddingBatch::from_rows(&random_vectors(1, 2, 2), ids(&[1])).is_err());
    }

    #[test]
    fn f32_kernels_work() {
        let m = pairwise_sq_distances(&[vec![0.0f32, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.get(0, 1), 25.0f32);
    }

    fn vecs_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..7, 1usize..4).prop_flat_map(|(n, d)| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n)
        })
    }

    proptest! {
        #[test]
        fn pairwise_permutation_equivariant(vs in vecs_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..vs.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| vs[i].clone()).collect();
            let m = pairwise_sq_distances(&vs).unwrap();
            let mp = pairwise_sq_distances(&permuted).unwrap();
            for i in 0..vs.len() {
                for j in 0..vs.len() {
                    prop_assert_eq!(mp.get(i, j), m.get(perm[i], perm[j]));
                }
            }
        }

        #[test]
        fn top_range_is_matrix_max(vs in vecs_strategy()) {
            let m = pairwise_sq_distances(&vs).unwrap();
            let max = m.as_slice().iter().copied().fold(0.0, f64::max);
            let r = top_k_ranges(&vs, 3).unwrap();
            prop_assert_eq!(r.ranges[0], max);
            prop_assert!(r.ranges.windows(2).all(|w| w[0] >= w[1]));
            let pairs = vs.len() * (vs.len() - 1) / 2;
            prop_assert_eq!(r.ranges.len(), pairs.min(3));
        }

        #[test]
        fn top_k_permutation_invariant(vs in vecs_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..vs.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| vs[i].clone()).collect();
            let a = top_k_ranges(&vs, 2).unwrap();
            let b = top_k_ranges(&permuted, 2).unwrap();
            prop_assert_eq!(&a.ranges, &b.ranges);
            for (d, &(i, j)) in b.ranges.iter().zip(&b.pairs) {
                prop_assert_eq!(*d, sq_distance(&vs[perm[i]], &vs[perm[j]]));
            }
        }

        #[test]
        fn translation_and_scaling(vs in vecs_strategy(), shift in -5.0f64..5.0, s in 0.5f64..3.0) {
            let labels: Vec<IdentityId> = (0..vs.len()).map(|i| IdentityId((i % 2) as u32)).collect();
            let moved: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
            let scaled: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
            let m = pairwise_sq_distances(&vs).unwrap();
            let mm = pairwise_sq_distances(&moved).unwrap();
            let ms = pairwise_sq_distances(&scaled).unwrap();
            for (i, &x) in m.as_slice().iter().enumerate() {
                prop_assert!((mm.as_slice()[i] - x).abs() <= 1e-9 * (1.0 + x));
                prop_assert!((ms.as_slice()[i] - s * s * x).abs() <= 1e-9 * (1.0 + s * s * x));
            }
            let c = min_center_pair(&EmbeddingBatch::from_rows(&vs, labels.clone()).unwrap()).unwrap();
            let cm = min_center_pair(&EmbeddingBatch::from_rows(&moved, labels).unwrap()).unwrap();
            prop_assert!((c.sq_distance - cm.sq_distance).abs() <= 1e-9 * (1.0 + c.sq_distance));
        }
    }
}
