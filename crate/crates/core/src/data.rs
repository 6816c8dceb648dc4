//! Synthetic long-tailed identity data, tail truncation, identity-balanced
//! batch sampling and verification pairs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::IdentityId;
use crate::matrix::Matrix;

/// Identities with fewer samples than this are poor (tail) classes.
pub const DEFAULT_POOR_THRESHOLD: usize = 20;

/// Parameters of the synthetic head/tail dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_identities: usize,
    /// Fraction of identities that are rich (head).
    pub head_fraction: f64,
    /// Samples per rich identity.
    pub head_count: usize,
    /// Poor identity counts are uniform on `[2, tail_count_max]`.
    pub tail_count_max: usize,
    pub noise_sigma: f64,
    pub d_in: usize,
    pub poor_threshold: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_identities: 50,
            head_fraction: 0.1,
            head_count: 200,
            tail_count_max: 15,
            noise_sigma: 0.5,
            d_in: 32,
            poor_threshold: DEFAULT_POOR_THRESHOLD,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_identities == 0 {
            bad.push("n_identities must be >= 1".to_string());
        }
        if !(self.head_fraction > 0.0 && self.head_fraction < 1.0) {
            bad.push(format!("head_fraction must be in (0, 1), got {}", self.head_fraction));
        }
        if self.tail_count_max < 2 {
            bad.push("tail_count_max must be >= 2".into());
        }
        if !(self.tail_count_max < self.poor_threshold && self.poor_threshold <= self.head_count) {
            bad.push(format!(
                "need tail_count_max < poor_threshold <= head_count, got {} / {} / {}",
                self.tail_count_max, self.poor_threshold, self.head_count
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bad.push("noise_sigma must be >= 0".into());
        }
        if self.d_in == 0 {
            bad.push("d_in must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("dataset spec: {}", bad.join("; "))))
        }
    }

    pub fn n_rich(&self) -> usize {
        ((self.head_fraction * self.n_identities as f64).round() as usize).min(self.n_identities)
    }
}

/// Labelled input vectors with ground-truth class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    inputs: Matrix<f64>,
    labels: Vec<IdentityId>,
    prototypes: BTreeMap<IdentityId, Vec<f64>>,
    counts: BTreeMap<IdentityId, usize>,
    poor_threshold: usize,
}

impl LongTailDataset {
    /// Builds a dataset, checking that every label has a prototype.
    pub fn new(
        inputs: Matrix<f64>,
        labels: Vec<IdentityId>,
        prototypes: BTreeMap<IdentityId, Vec<f64>>,
        poor_threshold: usize,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        let mut counts = BTreeMap::new();
        for l in &labels {
            let Some(p) = prototypes.get(l) else {
                return Err(Error::invalid(format!("identity {l} has no prototype")));
            };
            if p.len() != inputs.cols() {
                return Err(Error::DimensionMismatch {
                    expected: inputs.cols(),
                    found: p.len(),
                });
            }
            *counts.entry(*l).or_insert(0) += 1;
        }
        Ok(Self {
            inputs,
            labels,
            prototypes,
            counts,
            poor_threshold,
        })
    }

    pub fn inputs(&self) -> &Matrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[IdentityId] {
        &self.labels
    }

    pub fn prototypes(&self) -> &BTreeMap<IdentityId, Vec<f64>> {
        &self.prototypes
    }

    pub fn counts(&self) -> &BTreeMap<IdentityId, usize> {
        &self.counts
    }

    pub fn poor_threshold(&self) -> usize {
        self.poor_threshold
    }

    pub fn d_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Identities that have at least one sample, ascending.
    pub fn identities(&self) -> Vec<IdentityId> {
        self.counts.keys().copied().collect()
    }

    pub fn is_poor(&self, id: IdentityId) -> bool {
        self.counts.get(&id).is_some_and(|&c| c < self.poor_threshold)
    }

    pub fn poor_identities(&self) -> Vec<IdentityId> {
        self.counts.keys().copied().filter(|&id| self.is_poor(id)).collect()
    }

    pub fn rich_identities(&self) -> Vec<IdentityId> {
        self.counts.keys().copied().filter(|&id| !self.is_poor(id)).collect()
    }

    /// Sample indices per identity, ascending by identity.
    pub fn indices_by_identity(&self) -> BTreeMap<IdentityId, Vec<usize>> {
        let mut out: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    /// Keeps only the listed sample rows, in order.
    fn select(&self, keep: &[usize]) -> Self {
        let mut data = Vec::with_capacity(keep.len() * self.d_in());
        let mut labels = Vec::with_capacity(keep.len());
        for &i in keep {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let kept: HashSet<IdentityId> = labels.iter().copied().collect();
        let prototypes = self
            .prototypes
            .iter()
            .filter(|(id, _)| kept.contains(id))
            .map(|(&id, p)| (id, p.clone()))
            .collect();
        Self::new(
            Matrix::from_vec(labels.len(), self.d_in(), data).expect("consistent rows"),
            labels,
            prototypes,
            self.poor_threshold,
        )
        .expect("subset of a valid dataset")
    }

    /// Fresh noisy samples around every prototype, `per_identity` each.
    /// Used as a held-out evaluation split.
    pub fn resample(&self, per_identity: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        if per_identity == 0 {
            return Err(Error::invalid("resample needs at least one sample per identity"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.d_in();
        let mut data = Vec::with_capacity(self.prototypes.len() * per_identity * d);
        let mut labels = Vec::new();
        for (&id, proto) in &self.prototypes {
            for _ in 0..per_identity {
                for &p in proto {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(p + noise_sigma * z);
                }
                labels.push(id);
            }
        }
        Self::new(
            Matrix::from_vec(labels.len(), d, data)?,
            labels,
            self.prototypes.clone(),
            self.poor_threshold,
        )
    }
}

/// Prototypes `~ N(0, I)`, samples `= prototype + N(0, noise_sigma^2 I)`.
/// The first `n_rich` identities get `head_count` samples; the rest draw a
/// count uniformly from `[2, tail_count_max]`.
pub fn generate(spec: &DatasetSpec) -> Result<LongTailDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_rich = spec.n_rich();
    let mut prototypes = BTreeMap::new();
    for id in 0..spec.n_identities {
        let p: Vec<f64> = (0..spec.d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
        prototypes.insert(IdentityId(id as u32), p);
    }
    let counts: Vec<usize> = (0..spec.n_identities)
        .map(|id| {
            if id < n_rich {
                spec.head_count
            } else {
                rng.random_range(2..=spec.tail_count_max)
            }
        })
        .collect();

    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * spec.d_in);
    let mut labels = Vec::with_capacity(total);
    for (id, &count) in counts.iter().enumerate() {
        let id = IdentityId(id as u32);
        let proto = &prototypes[&id];
        for _ in 0..count {
            for &p in proto {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(p + spec.noise_sigma * z);
            }
            labels.push(id);
        }
    }
    LongTailDataset::new(
        Matrix::from_vec(total, spec.d_in, data)?,
        labels,
        prototypes,
        spec.poor_threshold,
    )
}

/// Removes `round(cut_ratio * #poor)` poor identities chosen uniformly at
/// random, with all of their samples. Rich identities are never touched.
pub fn truncate_tail(dataset: &LongTailDataset, cut_ratio: f64, seed: u64) -> Result<LongTailDataset> {
    if !(0.0..=1.0).contains(&cut_ratio) {
        return Err(Error::invalid(format!("cut ratio must be in [0, 1], got {cut_ratio}")));
    }
    let poor = dataset.poor_identities();
    let n_remove = (cut_ratio * poor.len() as f64).round() as usize;
    if n_remove == 0 {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed: HashSet<IdentityId> = index::sample(&mut rng, poor.len(), n_remove)
        .into_iter()
        .map(|i| poor[i])
        .collect();
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| !removed.contains(&dataset.labels[i]))
        .collect();
    Ok(dataset.select(&keep))
}

/// `P` identities with `K` samples each per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p: 4, k: 8, seed: 0 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid(format!(
                "batch needs P >= 2 and K >= 2, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// One identity-balanced mini-batch; rows are grouped by identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PkBatch {
    pub inputs: Matrix<f64>,
    pub labels: Vec<IdentityId>,
    /// Dataset row of each batch row.
    pub indices: Vec<usize>,
}

/// Endless stream of P x K batches.
///
/// Identities are drawn uniformly without replacement within a batch. An
/// identity with at least `K` samples contributes `K` distinct samples;
/// smaller identities contribute all of their samples and fill the rest by
/// drawing with replacement.
#[derive(Debug, Clone)]
pub struct PkSampler<'a> {
    dataset: &'a LongTailDataset,
    spec: BatchSpec,
    by_identity: Vec<(IdentityId, Vec<usize>)>,
    rng: ChaCha8Rng,
}

impl<'a> PkSampler<'a> {
    pub fn new(dataset: &'a LongTailDataset, spec: BatchSpec) -> Result<Self> {
        spec.validate()?;
        let by_identity: Vec<_> = dataset.indices_by_identity().into_iter().collect();
        if by_identity.len() < spec.p {
            return Err(Error::invalid(format!(
                "dataset has {} identities, batch needs P={}",
                by_identity.len(),
                spec.p
            )));
        }
        Ok(Self {
            dataset,
            spec,
            by_identity,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    pub fn next_batch(&mut self) -> PkBatch {
        let (p, k) = (self.spec.p, self.spec.k);
        let mut indices = Vec::with_capacity(p * k);
        let mut labels = Vec::with_capacity(p * k);
        for slot in index::sample(&mut self.rng, self.by_identity.len(), p) {
            let (id, members) = &self.by_identity[slot];
            if members.len() >= k {
                indices.extend(members.choose_multiple(&mut self.rng, k).copied());
            } else {
                let mut all = members.clone();
                all.shuffle(&mut self.rng);
                indices.extend_from_slice(&all);
                for _ in members.len()..k {
                    indices.push(members[self.rng.random_range(0..members.len())]);
                }
            }
            labels.extend(std::iter::repeat_n(*id, k));
        }
        let d = self.dataset.d_in();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            data.extend_from_slice(self.dataset.inputs.row(i));
        }
        PkBatch {
            inputs: Matrix::from_vec(indices.len(), d, data).expect("consistent rows"),
            labels,
            indices,
        }
    }
}

impl Iterator for PkSampler<'_> {
    type Item = PkBatch;

    fn next(&mut self) -> Option<PkBatch> {
        Some(self.next_batch())
    }
}

pub fn pk_batches(dataset: &LongTailDataset, spec: BatchSpec, n_batches: usize) -> Result<Vec<PkBatch>> {
    Ok(PkSampler::new(dataset, spec)?.take(n_batches).collect())
}

/// Two dataset rows and whether they share an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerificationPair {
    pub left: usize,
    pub right: usize,
    pub same: bool,
}

/// `n_pos` same-identity and `n_neg` different-identity pairs, no pair
/// repeated (unordered), in a seeded random order.
pub fn verification_pairs(
    dataset: &LongTailDataset,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    let groups: Vec<Vec<usize>> = dataset.indices_by_identity().into_values().collect();
    let pos_total: usize = groups.iter().map(|g| g.len() * (g.len() - 1) / 2).sum();
    let n = dataset.len();
    let neg_total = n * n.saturating_sub(1) / 2 - pos_total;
    if n_pos > pos_total || n_neg > neg_total {
        return Err(Error::invalid(format!(
            "requested {n_pos} positive / {n_neg} negative pairs, only {pos_total} / {neg_total} exist"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = dataset.labels();
    let mut out = Vec::with_capacity(n_pos + n_neg);

    let positives = if 2 * n_pos > pos_total {
        let mut all: Vec<(usize, usize)> = groups
            .iter()
            .flat_map(|g| (0..g.len()).flat_map(move |a| ((a + 1)..g.len()).map(move |b| (g[a], g[b]))))
            .collect();
        all.shuffle(&mut rng);
        all.truncate(n_pos);
        all
    } else {
        // identity weighted by its pair count gives uniform pairs
        let weights: Vec<usize> = groups.iter().map(|g| g.len() * (g.len() - 1) / 2).collect();
        let mut seen = HashSet::new();
        let mut picked = Vec::with_capacity(n_pos);
        while picked.len() < n_pos {
            let mut r = rng.random_range(0..pos_total);
            let g = weights
                .iter()
                .position(|&w| {
                    if r < w {
                        true
                    } else {
                        r -= w;
                        false
                    }
                })
                .expect("r < total");
            let pick = index::sample(&mut rng, groups[g].len(), 2);
            let (a, b) = (groups[g][pick.index(0)], groups[g][pick.index(1)]);
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                picked.push(key);
            }
        }
        picked
    };
    out.extend(positives.into_iter().map(|(left, right)| VerificationPair {
        left,
        right,
        same: true,
    }));

    let negatives = if 2 * n_neg > neg_total {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
            .filter(|&(a, b)| labels[a] != labels[b])
            .collect();
        all.shuffle(&mut rng);
        all.truncate(n_neg);
        all
    } else {
        let mut seen = HashSet::new();
        let mut picked = Vec::with_capacity(n_neg);
        while picked.len() < n_neg {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if labels[a] == labels[b] {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                picked.push(key);
            }
        }
        picked
    };
    out.extend(negatives.into_iter().map(|(left, right)| VerificationPair {
        left,
        right,
        same: false,
    }));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Writes the line-delimited text format: a `<d_in> <count>` header, then
/// one `<identity> <x_1> ... <x_d>` line per sample. Floats use the shortest
/// representation that parses back to the same `f64`.
pub fn write_dataset<W: Write>(dataset: &LongTailDataset, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{} {}", dataset.d_in(), dataset.len())?;
    let mut line = String::new();
    for (row, id) in dataset.inputs.iter_rows().zip(&dataset.labels) {
        line.clear();
        write!(line, "{id}").expect("string write");
        for v in row {
            write!(line, " {v:?}").expect("string write");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &LongTailDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(dataset, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads the text format back. The file carries no prototypes, so each
/// identity's prototype is set to the mean of its samples.
pub fn read_dataset<R: BufRead>(r: R, source_name: &str, poor_threshold: usize) -> Result<LongTailDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut lines = r.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header = header.map_err(|e| parse_err(1, e.to_string()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [d_in, count] = fields[..] else {
        return Err(parse_err(1, format!("header must be '<d_in> <count>', got '{header}'")));
    };
    let d_in: usize = d_in.parse().map_err(|e| parse_err(1, format!("d_in: {e}")))?;
    let count: usize = count.parse().map_err(|e| parse_err(1, format!("count: {e}")))?;
    if d_in == 0 {
        return Err(parse_err(1, "d_in must be >= 1".into()));
    }

    let mut data = Vec::with_capacity(d_in * count);
    let mut labels = Vec::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if labels.len() == count {
            return Err(parse_err(lineno, format!("more than the {count} declared samples")));
        }
        let mut it = line.split_whitespace();
        let id: u32 = it
            .next()
            .expect("non-empty line")
            .parse()
            .map_err(|e| parse_err(lineno, format!("identity: {e}")))?;
        let start = data.len();
        for tok in it {
            data.push(tok.parse::<f64>().map_err(|e| parse_err(lineno, format!("value '{tok}': {e}")))?);
        }
        if data.len() - start != d_in {
            return Err(parse_err(lineno, format!("expected {d_in} values, found {}", data.len() - start)));
        }
        labels.push(IdentityId(id));
    }
    if labels.len() != count {
        return Err(parse_err(
            labels.len() + 2,
            format!("header declares {count} samples, found {}", labels.len()),
        ));
    }

    let inputs = Matrix::from_vec(count, d_in, data)?;
    let mut sums: BTreeMap<IdentityId, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &id) in inputs.iter_rows().zip(&labels) {
        let e = sums.entry(id).or_insert_with(|| (vec![0.0; d_in], 0));
        e.0.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
        e.1 += 1;
    }
    let prototypes = sums
        .into_iter()
        .map(|(id, (s, n))| (id, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    LongTailDataset::new(inputs, labels, prototypes, poor_threshold)
}

pub fn load_dataset(path: &Path, poor_threshold: usize) -> Result<LongTailDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), &path.display().to_string(), poor_threshold)
}
