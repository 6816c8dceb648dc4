//! Self-check suite: brute-force geometry oracles, finite-difference
//! gradient checks, closed-form values and sampler conformance.
//!
//! Every randomized case is materialized as a [`CheckCase`] holding its full
//! inputs, so a failing case can be written out and replayed verbatim.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{generate, pk_batches, BatchSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::geometry::{min_center_pair, sq_distance, top_k_ranges, EmbeddingBatch, IdentityId};
use crate::losses::{
    compare_gradients, contrastive_loss, finite_difference_grad, inter_range_loss, intra_range_loss, range_loss,
    softmax_xent, triplet_loss, RangeLossConfig,
};
use crate::matrix::Matrix;
use crate::network::{backward, forward, init_params_with_sigma, MlpParams, NetworkShape};
use crate::seed::derive_seed;

/// Distance kept from hinge kinks, zero ranges and selection ties.
pub const KINK_CLEARANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
pub const LOSS_GRAD_TOL: f64 = 1e-5;
pub const NETWORK_GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub seed: u64,
    /// Test hook: the analytic intra gradient is scaled by `1 + perturb_intra`.
    pub perturb_intra: f64,
    pub loss_cases: usize,
    pub oracle_cases: usize,
    pub network_cases: usize,
    pub sampler_batches: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            perturb_intra: 0.0,
            loss_cases: 20,
            oracle_cases: 200,
            network_cases: 5,
            sampler_batches: 1000,
        }
    }
}

/// Inputs of one check, complete enough to re-run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckCase {
    ClosedForms,
    TopK { group: Vec<Vec<f64>>, k: usize },
    MinCenter { embeddings: Vec<Vec<f64>>, labels: Vec<u32> },
    Intra { embeddings: Vec<Vec<f64>>, labels: Vec<u32>, k: usize, eps: f64 },
    Inter { embeddings: Vec<Vec<f64>>, labels: Vec<u32>, margin: f64 },
    Softmax { logits: Vec<Vec<f64>>, labels: Vec<usize> },
    Contrastive { embeddings: Vec<Vec<f64>>, pairs: Vec<(usize, usize, bool)>, margin: f64 },
    Triplet { embeddings: Vec<Vec<f64>>, triplets: Vec<(usize, usize, usize)>, margin: f64 },
    Network { shape: NetworkShape, init_seed: u64, inputs: Vec<Vec<f64>>, labels: Vec<u32>, range: RangeLossConfig },
    Sampler { dataset: DatasetSpec, batch: BatchSpec, n_batches: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub passed: bool,
    /// Worst relative error for gradient checks, 0 otherwise.
    pub error: f64,
    pub detail: String,
}

/// Result of one named property over all of its cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub cases: usize,
    pub passed: bool,
    /// Worst-case summary, or the first failure.
    pub detail: String,
    pub failing_case: Option<CheckCase>,
}

/// A failing case as written to disk for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayFile {
    pub property: String,
    pub perturb_intra: f64,
    pub case: CheckCase,
    pub outcome: CaseOutcome,
}

fn batch_of(rows: &[Vec<f64>], labels: &[u32]) -> Result<EmbeddingBatch<f64>> {
    EmbeddingBatch::from_rows(rows, labels.iter().map(|&l| IdentityId(l)).collect())
}

fn matrix_of(rows: &[Vec<f64>]) -> Result<Matrix<f64>> {
    Matrix::from_rows(rows)
}

fn grad_outcome(analytic: &Matrix<f64>, numeric: &Matrix<f64>, tol: f64) -> CaseOutcome {
    let rep = compare_gradients(analytic.as_slice(), numeric.as_slice());
    CaseOutcome {
        passed: rep.max_rel_error < tol,
        error: rep.max_rel_error,
        detail: format!(
            "max rel. error {:.3e} at entry {} (analytic {:.12e}, numeric {:.12e}), tolerance {tol:e}",
            rep.max_rel_error, rep.worst_index, rep.analytic, rep.numeric
        ),
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64, fails: &mut Vec<String>) {
    if !((got - want).abs() <= tol) {
        fails.push(format!("{name}: got {got:.15e}, want {want:.15e}"));
    }
}

/// Exhaustive top-k: all pairs sorted descending by distance, ties broken by
/// index pair.
fn brute_top_k(group: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut all = Vec::new();
    for i in 0..group.len() {
        for j in (i + 1)..group.len() {
            let d: f64 = group[i].iter().zip(&group[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            all.push(d);
        }
    }
    all.sort_by(|a, b| b.total_cmp(a));
    all.truncate(k);
    all
}

/// Evaluates one case.
pub fn evaluate_case(case: &CheckCase, perturb_intra: f64) -> Result<CaseOutcome> {
    match case {
        CheckCase::ClosedForms => {
            let mut fails = Vec::new();
            // 0, sqrt2, sqrt6 on a line: two largest squared ranges are 6 and 2
            let b = batch_of(&[vec![0.0], vec![2f64.sqrt()], vec![6f64.sqrt()]], &[0, 0, 0])?;
            close("harmonic mean of {2,6}", intra_range_loss(&b, 2, 1e-12)?.value, 3.0, 1e-12, &mut fails);
            let rows = [vec![0.0, 0.0], vec![0.0, 0.0], vec![0.5, 0.0], vec![0.5, 0.0]];
            let b = batch_of(&rows, &[0, 0, 1, 1])?;
            close("hinge m=1, d=0.25", inter_range_loss(&b, 1.0)?.value, 0.75, 1e-12, &mut fails);
            let logits = Matrix::from_vec(1, 4, vec![0.3; 4])?;
            close("uniform softmax over 4", softmax_xent(&logits, &[2])?.value, 4f64.ln(), 1e-12, &mut fails);
            Ok(CaseOutcome {
                passed: fails.is_empty(),
                error: 0.0,
                detail: if fails.is_empty() { "all closed forms hold".into() } else { fails.join("; ") },
            })
        }
        CheckCase::TopK { group, k } => {
            let got = top_k_ranges(group, *k)?.ranges;
            let want = brute_top_k(group, *k);
            Ok(CaseOutcome {
                passed: got == want,
                error: 0.0,
                detail: format!("top-{k}: got {got:?}, brute force {want:?}"),
            })
        }
        CheckCase::MinCenter { embeddings, labels } => {
            let b = batch_of(embeddings, labels)?;
            let got = min_center_pair(&b)?;
            let centers = b.centers();
            let mut best = f64::INFINITY;
            for i in 0..centers.len() {
                for j in (i + 1)..centers.len() {
                    best = best.min(sq_distance(&centers[i].1, &centers[j].1));
                }
            }
            Ok(CaseOutcome {
                passed: got.sq_distance == best,
                error: 0.0,
                detail: format!("min center sq distance: got {:e}, brute force {best:e}", got.sq_distance),
            })
        }
        CheckCase::Intra { embeddings, labels, k, eps } => {
            let b = batch_of(embeddings, labels)?;
            let mut analytic = intra_range_loss(&b, *k, *eps)?.grads;
            analytic.as_mut_slice().iter_mut().for_each(|g| *g *= 1.0 + perturb_intra);
            let x = matrix_of(embeddings)?;
            let ids = b.labels().to_vec();
            let numeric = finite_difference_grad(
                |m| intra_range_loss(&EmbeddingBatch::new(m.clone(), ids.clone()).expect("shape"), *k, *eps).expect("loss").value,
                &x,
                FD_STEP,
            );
            Ok(grad_outcome(&analytic, &numeric, LOSS_GRAD_TOL))
        }
        CheckCase::Inter { embeddings, labels, margin } => {
            let b = batch_of(embeddings, labels)?;
            let analytic = inter_range_loss(&b, *margin)?.grads;
            let ids = b.labels().to_vec();
            let numeric = finite_difference_grad(
                |m| inter_range_loss(&EmbeddingBatch::new(m.clone(), ids.clone()).expect("shape"), *margin).expect("loss").value,
                &matrix_of(embeddings)?,
                FD_STEP,
            );
            Ok(grad_outcome(&analytic, &numeric, LOSS_GRAD_TOL))
        }
        CheckCase::Softmax { logits, labels } => {
            let x = matrix_of(logits)?;
            let analytic = softmax_xent(&x, labels)?.dlogits;
            let numeric = finite_difference_grad(|m| softmax_xent(m, labels).expect("loss").value, &x, FD_STEP);
            Ok(grad_outcome(&analytic, &numeric, LOSS_GRAD_TOL))
        }
        CheckCase::Contrastive { embeddings, pairs, margin } => {
            let x = matrix_of(embeddings)?;
            let analytic = contrastive_loss(&x, pairs, *margin)?.grads;
            let numeric = finite_difference_grad(|m| contrastive_loss(m, pairs, *margin).expect("loss").value, &x, FD_STEP);
            Ok(grad_outcome(&analytic, &numeric, LOSS_GRAD_TOL))
        }
        CheckCase::Triplet { embeddings, triplets, margin } => {
            let x = matrix_of(embeddings)?;
            let analytic = triplet_loss(&x, triplets, *margin)?.grads;
            let numeric = finite_difference_grad(|m| triplet_loss(m, triplets, *margin).expect("loss").value, &x, FD_STEP);
            Ok(grad_outcome(&analytic, &numeric, LOSS_GRAD_TOL))
        }
        CheckCase::Network { shape, init_seed, inputs, labels, range } => network_case(shape, *init_seed, inputs, labels, range),
        CheckCase::Sampler { dataset, batch, n_batches } => sampler_case(dataset, *batch, *n_batches),
    }
}

/// Joint loss (mean softmax + range) of the whole network.
pub fn joint_loss(params: &MlpParams<f64>, inputs: &Matrix<f64>, ids: &[IdentityId], classes: &[usize], range: &RangeLossConfig) -> Result<f64> {
    let fwd = forward(params, inputs)?;
    let sm = softmax_xent(&fwd.logits, classes)?.value;
    let parts = range_loss(&EmbeddingBatch::new(fwd.embeddings, ids.to_vec())?, range)?;
    Ok(sm + parts.combined.value)
}

fn class_indices(ids: &[IdentityId]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    for id in ids {
        let n = map.len();
        map.entry(*id).or_insert(n);
    }
    ids.iter().map(|id| map[id]).collect()
}

fn network_case(shape: &NetworkShape, init_seed: u64, inputs: &[Vec<f64>], labels: &[u32], range: &RangeLossConfig) -> Result<CaseOutcome> {
    let params: MlpParams<f64> = init_params_with_sigma(shape, init_seed, 0.5)?;
    let x = matrix_of(inputs)?;
    let ids: Vec<IdentityId> = labels.iter().map(|&l| IdentityId(l)).collect();
    let classes = class_indices(&ids);
    let fwd = forward(&params, &x)?;
    let sm = softmax_xent(&fwd.logits, &classes)?;
    let parts = range_loss(&EmbeddingBatch::new(fwd.embeddings.clone(), ids.clone())?, range)?;
    let grads = backward(&params, &fwd.cache, &parts.combined.grads, &sm.dlogits)?;

    let mut worst = CaseOutcome { passed: true, error: 0.0, detail: String::new() };
    let mut worst_err = -1.0;
    let names = params.tensor_names();
    for (t, name) in names.iter().enumerate() {
        let base = params.tensors()[t].to_vec();
        let as_matrix = Matrix::from_vec(1, base.len(), base)?;
        let numeric = finite_difference_grad(
            |m| {
                let mut p = params.clone();
                p.tensors_mut()[t].copy_from_slice(m.as_slice());
                joint_loss(&p, &x, &ids, &classes, range).expect("loss")
            },
            &as_matrix,
            FD_STEP,
        );
        let analytic = Matrix::from_vec(1, numeric.cols(), grads.tensors()[t].to_vec())?;
        let rep = compare_gradients(analytic.as_slice(), numeric.as_slice());
        if rep.max_rel_error > worst_err {
            worst_err = rep.max_rel_error;
            let mut o = grad_outcome(&analytic, &numeric, NETWORK_GRAD_TOL);
            o.detail = format!("{name}: {}", o.detail);
            worst = o;
        }
    }
    Ok(worst)
}

fn sampler_case(dataset: &DatasetSpec, batch: BatchSpec, n_batches: usize) -> Result<CaseOutcome> {
    let ds = generate(dataset)?;
    let batches = pk_batches(&ds, batch, n_batches)?;
    let n_ids = ds.identities().len();
    let mut hits: BTreeMap<IdentityId, usize> = ds.identities().into_iter().map(|id| (id, 0)).collect();
    for (bi, b) in batches.iter().enumerate() {
        let mut per: BTreeMap<IdentityId, usize> = BTreeMap::new();
        for (&id, &row) in b.labels.iter().zip(&b.indices) {
            *per.entry(id).or_default() += 1;
            if ds.labels()[row] != id {
                return Ok(CaseOutcome { passed: false, error: 0.0, detail: format!("batch {bi}: row {row} is not identity {id}") });
            }
        }
        if b.labels.len() != batch.p * batch.k || per.len() != batch.p || per.values().any(|&c| c != batch.k) {
            return Ok(CaseOutcome {
                passed: false,
                error: 0.0,
                detail: format!("batch {bi}: {} samples, per-identity counts {per:?}", b.labels.len()),
            });
        }
        for id in per.keys() {
            *hits.get_mut(id).expect("known identity") += 1;
        }
    }
    let p = batch.p as f64 / n_ids as f64;
    let mean = n_batches as f64 * p;
    let sigma = (n_batches as f64 * p * (1.0 - p)).sqrt();
    let (worst_id, worst_z) = hits
        .iter()
        .map(|(&id, &h)| (id, (h as f64 - mean).abs() / sigma.max(f64::MIN_POSITIVE)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    Ok(CaseOutcome {
        passed: worst_z <= 3.0,
        error: 0.0,
        detail: format!(
            "{n_batches} batches of {}x{}; worst identity {worst_id} at {worst_z:.2} sigma (expected {mean:.1} +- {sigma:.2})",
            batch.p, batch.k
        ),
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| scale * gauss(rng)).collect())
        .collect()
}

/// 3-6 identities with 2-8 samples each in dimension 8.
fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<u32>) {
    let n_ids = rng.random_range(3..=6);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for id in 0..n_ids {
        let center: Vec<f64> = (0..8).map(|_| 2.0 * gauss(rng)).collect();
        for _ in 0..rng.random_range(2..=8) {
            rows.push(center.iter().map(|c| c + gauss(rng)).collect());
            labels.push(id as u32);
        }
    }
    (rows, labels)
}

/// Sorted pairwise distances of each identity; used to keep top-k
/// selections away from ties and zero ranges.
fn intra_clear(rows: &[Vec<f64>], labels: &[u32], k: usize) -> bool {
    let mut groups: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
    for (r, l) in rows.iter().zip(labels) {
        groups.entry(*l).or_default().push(r);
    }
    groups.values().all(|g| {
        let mut d = Vec::new();
        for i in 0..g.len() {
            for j in (i + 1)..g.len() {
                d.push(sq_distance(g[i], g[j]));
            }
        }
        d.sort_by(|a, b| b.total_cmp(a));
        let sel = k.min(d.len());
        d[..sel].iter().all(|&x| x > KINK_CLEARANCE)
            && (sel == d.len() || d[sel - 1] - d[sel] > KINK_CLEARANCE)
    })
}

fn center_gaps(rows: &[Vec<f64>], labels: &[u32]) -> Result<Vec<f64>> {
    let b = batch_of(rows, labels)?;
    let c = b.centers();
    let mut d = Vec::new();
    for i in 0..c.len() {
        for j in (i + 1)..c.len() {
            d.push(sq_distance(&c[i].1, &c[j].1));
        }
    }
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Draws cases until `accept` holds; the draw sequence is seeded so the
/// generated cases are a pure function of the seed.
fn draw<F: FnMut(&mut ChaCha8Rng) -> Option<CheckCase>>(seed: u64, label: &str, n: usize, mut gen: F) -> Result<Vec<CheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > 1000 * n.max(1) {
            return Err(Error::invalid(format!("{label}: could not draw {n} cases clear of kinks")));
        }
        if let Some(c) = gen(&mut rng) {
            out.push(c);
        }
    }
    Ok(out)
}

/// The full list of (property name, cases) for `opts`.
pub fn build_cases(opts: &CheckOptions) -> Result<Vec<(&'static str, Vec<CheckCase>)>> {
    let s = opts.seed;
    let mut props = vec![("closed_forms", vec![CheckCase::ClosedForms])];

    props.push((
        "top_k_ranges_oracle",
        draw(s, "topk", opts.oracle_cases, |rng| {
            let n = rng.random_range(2..=10);
            let d = rng.random_range(1..=6);
            let k = rng.random_range(1..=4);
            Some(CheckCase::TopK { group: normal_rows(rng, n, d, 1.0), k })
        })?,
    ));
    props.push((
        "min_center_pair_oracle",
        draw(s, "mincenter", opts.oracle_cases, |rng| {
            let (embeddings, labels) = random_batch(rng);
            Some(CheckCase::MinCenter { embeddings, labels })
        })?,
    ));
    props.push((
        "intra_gradient",
        draw(s, "intra", opts.loss_cases, |rng| {
            let (embeddings, labels) = random_batch(rng);
            let k = rng.random_range(1..=3);
            intra_clear(&embeddings, &labels, k).then_some(CheckCase::Intra { embeddings, labels, k, eps: 1e-12 })
        })?,
    ));
    props.push((
        "inter_gradient",
        draw(s, "inter", opts.loss_cases, |rng| {
            let (embeddings, labels) = random_batch(rng);
            let d = center_gaps(&embeddings, &labels).ok()?;
            let margin = d[0] * rng.random_range(0.5..2.0);
            let clear = (margin - d[0]).abs() > KINK_CLEARANCE && d.get(1).is_none_or(|&d1| d1 - d[0] > KINK_CLEARANCE);
            clear.then_some(CheckCase::Inter { embeddings, labels, margin })
        })?,
    ));
    props.push((
        "softmax_gradient",
        draw(s, "softmax", opts.loss_cases, |rng| {
            let m = rng.random_range(1..=8);
            let c = rng.random_range(2..=6);
            let logits = normal_rows(rng, m, c, 3.0);
            let labels = (0..m).map(|_| rng.random_range(0..c)).collect();
            Some(CheckCase::Softmax { logits, labels })
        })?,
    ));
    props.push((
        "contrastive_gradient",
        draw(s, "contrastive", opts.loss_cases, |rng| {
            let (embeddings, labels) = random_batch(rng);
            let margin = rng.random_range(1.0..6.0);
            let mut pairs = Vec::new();
            for i in 0..labels.len() {
                for j in (i + 1)..labels.len() {
                    let same = labels[i] == labels[j];
                    let d = sq_distance(&embeddings[i], &embeddings[j]).sqrt();
                    if d < KINK_CLEARANCE || (!same && (d - margin).abs() < KINK_CLEARANCE) {
                        return None;
                    }
                    pairs.push((i, j, same));
                }
            }
            Some(CheckCase::Contrastive { embeddings, pairs, margin })
        })?,
    ));
    props.push((
        "triplet_gradient",
        draw(s, "triplet", opts.loss_cases, |rng| {
            let (embeddings, labels) = random_batch(rng);
            let mut gaps = Vec::new();
            for a in 0..labels.len() {
                for p in 0..labels.len() {
                    for n in 0..labels.len() {
                        if p != a && labels[p] == labels[a] && labels[n] != labels[a] {
                            gaps.push(sq_distance(&embeddings[a], &embeddings[n]) - sq_distance(&embeddings[a], &embeddings[p]));
                        }
                    }
                }
            }
            gaps.sort_by(f64::total_cmp);
            // a margin near the median gap leaves roughly half the triplets active
            let margin = gaps[gaps.len() / 2].abs().max(1.0) * rng.random_range(0.5..1.5);
            let mut triplets = Vec::new();
            for a in 0..labels.len() {
                for p in 0..labels.len() {
                    if p == a || labels[p] != labels[a] {
                        continue;
                    }
                    for n in 0..labels.len() {
                        if labels[n] == labels[a] {
                            continue;
                        }
                        let gap = sq_distance(&embeddings[a], &embeddings[p]) - sq_distance(&embeddings[a], &embeddings[n]) + margin;
                        if gap.abs() < KINK_CLEARANCE {
                            return None;
                        }
                        triplets.push((a, p, n));
                    }
                }
            }
            Some(CheckCase::Triplet { embeddings, triplets, margin })
        })?,
    ));
    props.push((
        "network_gradient",
        draw(s, "network", opts.network_cases, |rng| {
            let shape = NetworkShape {
                d_in: rng.random_range(3..=6),
                hidden: vec![rng.random_range(4..=7)],
                d_emb: rng.random_range(2..=4),
                n_classes: 3,
            };
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for id in 0..3u32 {
                for _ in 0..rng.random_range(2..=4) {
                    inputs.push((0..shape.d_in).map(|_| gauss(rng)).collect());
                    labels.push(id);
                }
            }
            let init_seed = rng.random();
            let params: MlpParams<f64> = init_params_with_sigma(&shape, init_seed, 0.5).ok()?;
            let fwd = forward(&params, &matrix_of(&inputs).ok()?).ok()?;
            // stay away from ReLU kinks and range/center selection ties
            let relu_clear = fwd.cache.pre_activations[..fwd.cache.pre_activations.len() - 1]
                .iter()
                .all(|z| z.as_slice().iter().all(|v| v.abs() > KINK_CLEARANCE));
            let emb = fwd.embeddings.to_rows();
            let d = center_gaps(&emb, &labels).ok()?;
            let margin = d[0] * 1.5;
            let clear = relu_clear && intra_clear(&emb, &labels, 2) && d[1] - d[0] > KINK_CLEARANCE;
            let range = RangeLossConfig { k: 2, margin, w_intra: 0.3, w_inter: 0.7, eps: 1e-12 };
            clear.then_some(CheckCase::Network { shape, init_seed, inputs, labels, range })
        })?,
    ));
    props.push((
        "pk_sampler",
        vec![CheckCase::Sampler {
            dataset: DatasetSpec { seed: derive_seed(s, "sampler-data"), ..DatasetSpec::default() },
            batch: BatchSpec { p: 4, k: 8, seed: derive_seed(s, "sampler-batches") },
            n_batches: opts.sampler_batches,
        }],
    ));
    Ok(props)
}

/// Runs every property. Within a property, evaluation stops at the first
/// failing case.
pub fn run_checks(opts: &CheckOptions) -> Result<Vec<PropertyResult>> {
    let mut results = Vec::new();
    for (name, cases) in build_cases(opts)? {
        let mut res = PropertyResult {
            name: name.to_string(),
            cases: cases.len(),
            passed: true,
            detail: String::new(),
            failing_case: None,
        };
        let mut worst = -1.0;
        for (i, case) in cases.iter().enumerate() {
            let out = evaluate_case(case, opts.perturb_intra)?;
            if !out.passed {
                res.passed = false;
                res.detail = format!("case {i}: {}", out.detail);
                res.failing_case = Some(case.clone());
                break;
            }
            if out.error > worst {
                worst = out.error;
                res.detail = format!("worst case {i}: {}", out.detail);
            }
        }
        results.push(res);
    }
    Ok(results)
}

/// Re-runs a stored failing case.
pub fn replay(file: &ReplayFile) -> Result<CaseOutcome> {
    evaluate_case(&file.case, file.perturb_intra)
}
