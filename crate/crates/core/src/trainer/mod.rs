//! Joint softmax + metric-loss training of the embedding network.
//!
//! Each step embeds a P x K batch, evaluates softmax cross-entropy on the
//! logits and the selected auxiliary loss on the embeddings, backpropagates
//! both and applies one SGD update. For the range loss the per-batch order is:
//! class centers, top-k intra ranges, harmonic intra loss, closest centers,
//! hinge check against the margin.

pub mod checkpoint;
pub mod eval;
pub mod report;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{generate, truncate_tail, verification_pairs, BatchSpec, DatasetSpec, LongTailDataset, PkBatch, PkSampler, VerificationPair};
use crate::error::{Error, Result};
use crate::geometry::{min_center_pair, EmbeddingBatch, IdentityId};
use crate::losses::{contrastive_loss, range_loss, softmax_xent, triplet_loss, LossWarning, RangeLossConfig};
use crate::matrix::Matrix;
use crate::network::{backward, embed, forward, init_params, MlpParams, NetworkShape, Sgd, SgdConfig};
use crate::seed::derive_seed;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use eval::{best_threshold_accuracy, embedding_geometry, evaluate_verification, geometry_metrics, GeometryMetrics};

/// Objective used alongside softmax cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Softmax,
    Contrastive,
    Triplet,
    Range,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Softmax => "softmax",
            LossMode::Contrastive => "contrastive",
            LossMode::Triplet => "triplet",
            LossMode::Range => "range",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// Contrastive or triplet baseline settings. The summed loss is divided by
/// the number of pairs (triplets) in the batch before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairLossConfig {
    pub margin: f64,
    pub weight: f64,
    /// Positive pairs only among rich identities, negative pairs only among
    /// poor identities.
    pub rich_poor_split: bool,
}

impl Default for PairLossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            weight: 0.1,
            rich_poor_split: false,
        }
    }
}

/// Held-out evaluation split: fresh noisy samples of every generated
/// prototype (before tail truncation) and verification pairs over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub per_identity: usize,
    /// Defaults to the training noise level.
    pub noise_sigma: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_thresholds: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            per_identity: 10,
            noise_sigma: None,
            n_pos: 1000,
            n_neg: 1000,
            n_thresholds: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    /// Fraction of poor identities removed before training.
    pub tail_ratio: f64,
    pub truncate_seed: u64,
    pub batch: BatchSpec,
    pub hidden: Vec<usize>,
    pub d_emb: usize,
    pub init_seed: u64,
    pub loss: LossMode,
    pub range: RangeLossConfig,
    /// Replace `range.margin` with the median initial inter-center squared
    /// distance of the training set.
    pub auto_margin: bool,
    pub contrastive: PairLossConfig,
    pub triplet: PairLossConfig,
    pub sgd: SgdConfig,
    pub iterations: u64,
    pub eval_every: u64,
    pub eval: EvalSpec,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            tail_ratio: 0.0,
            truncate_seed: 0,
            batch: BatchSpec::default(),
            hidden: vec![64, 64],
            d_emb: 16,
            init_seed: 0,
            loss: LossMode::Range,
            range: RangeLossConfig {
                margin: 400.0,
                w_intra: 0.005,
                w_inter: 0.03,
                ..RangeLossConfig::default()
            },
            auto_margin: false,
            contrastive: PairLossConfig::default(),
            triplet: PairLossConfig::default(),
            sgd: SgdConfig {
                halve_every: 500,
                base_lr: 0.01,
                ..SgdConfig::default()
            },
            iterations: 2000,
            eval_every: 100,
            eval: EvalSpec::default(),
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Sets every seed from one master seed.
    pub fn with_master_seed(mut self, master: u64) -> Self {
        self.dataset.seed = derive_seed(master, "data");
        self.truncate_seed = derive_seed(master, "truncate");
        self.batch.seed = derive_seed(master, "batches");
        self.init_seed = derive_seed(master, "init");
        self.eval.seed = derive_seed(master, "eval");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.batch.validate()?;
        self.range.validate()?;
        self.sgd.validate()?;
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.tail_ratio) {
            bad.push(format!("tail_ratio must be in [0, 1], got {}", self.tail_ratio));
        }
        if self.d_emb == 0 || self.hidden.contains(&0) {
            bad.push("layer widths must be positive".into());
        }
        if self.eval_every == 0 {
            bad.push("eval_every must be >= 1".into());
        }
        for (name, c) in [("contrastive", &self.contrastive), ("triplet", &self.triplet)] {
            if !(c.margin > 0.0) || !(c.weight >= 0.0) {
                bad.push(format!("{name}: margin must be > 0 and weight >= 0"));
            }
        }
        if self.eval.per_identity < 2 {
            bad.push("eval.per_identity must be >= 2".into());
        }
        if self.eval.n_thresholds == 0 || self.eval.n_pos + self.eval.n_neg == 0 {
            bad.push("eval needs pairs and thresholds".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("train config: {}", bad.join("; "))))
        }
    }
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub softmax: f64,
    /// Weighted auxiliary term actually optimized.
    pub aux: f64,
    /// Unweighted intra-class range loss of the batch (monitored in every mode).
    pub intra: f64,
    /// Unweighted inter-class hinge of the batch (monitored in every mode).
    pub inter: f64,
    pub batch_min_center_sq: f64,
    pub lr: f64,
}

/// One row of the metrics history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed optimizer steps.
    pub iteration: u64,
    pub lr: f64,
    pub total_loss: f64,
    pub softmax_loss: f64,
    pub aux_loss: f64,
    pub intra_loss: f64,
    pub inter_loss: f64,
    pub batch_min_center_sq: f64,
    pub mean_intra_range: f64,
    pub min_center_sq: f64,
    pub verification_accuracy: f64,
}

/// Everything a step needs besides parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub mode: LossMode,
    /// Range config with the resolved margin.
    pub range: RangeLossConfig,
    pub contrastive: PairLossConfig,
    pub triplet: PairLossConfig,
    /// Classifier row of every training identity.
    pub class_index: BTreeMap<IdentityId, usize>,
    pub poor: HashSet<IdentityId>,
}

impl StepContext {
    pub fn new(config: &TrainConfig, train_set: &LongTailDataset, margin: f64) -> Self {
        Self {
            mode: config.loss,
            range: RangeLossConfig { margin, ..config.range },
            contrastive: config.contrastive,
            triplet: config.triplet,
            class_index: train_set.identities().into_iter().enumerate().map(|(i, id)| (id, i)).collect(),
            poor: train_set.poor_identities().into_iter().collect(),
        }
    }
}

/// A step produced a non-finite loss.
#[derive(Debug, Clone, thiserror::Error)]
#[error("non-finite loss at iteration {iteration}: {losses:?}")]
pub struct NonFiniteLoss {
    pub iteration: u64,
    pub losses: StepLosses,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// Training stopped; `history` holds the records made before the abort.
    #[error("{source}")]
    Aborted {
        #[source]
        source: NonFiniteLoss,
        history: Vec<MetricsRecord>,
    },
}

fn batch_pairs(labels: &[IdentityId], cfg: &PairLossConfig, poor: &HashSet<IdentityId>) -> Vec<(usize, usize, bool)> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            let same = labels[i] == labels[j];
            let keep = !cfg.rich_poor_split
                || if same {
                    !poor.contains(&labels[i])
                } else {
                    poor.contains(&labels[i]) && poor.contains(&labels[j])
                };
            if keep {
                pairs.push((i, j, same));
            }
        }
    }
    pairs
}

fn batch_triplets(labels: &[IdentityId], cfg: &PairLossConfig, poor: &HashSet<IdentityId>) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            if p == a || labels[p] != labels[a] || (cfg.rich_poor_split && poor.contains(&labels[a])) {
                continue;
            }
            for n in 0..labels.len() {
                if labels[n] != labels[a] && (!cfg.rich_poor_split || poor.contains(&labels[n])) {
                    out.push((a, p, n));
                }
            }
        }
    }
    out
}

/// Forward, losses, backward and one SGD update on `batch`.
pub fn train_step(
    params: &mut MlpParams<f64>,
    sgd: &mut Sgd<f64>,
    batch: &PkBatch,
    ctx: &StepContext,
    iteration: u64,
) -> std::result::Result<StepLosses, TrainError> {
    let fwd = forward(params, &batch.inputs)?;
    let class_labels: Vec<usize> = batch
        .labels
        .iter()
        .map(|id| {
            ctx.class_index
                .get(id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("identity {id} is not a training class")))
        })
        .collect::<Result<_>>()?;
    let xent = softmax_xent(&fwd.logits, &class_labels)?;

    let emb_batch = EmbeddingBatch::new(fwd.embeddings.clone(), batch.labels.clone())?;
    let parts = range_loss(&emb_batch, &ctx.range)?;
    if parts.inter.warning == Some(LossWarning::SingleIdentity) {
        log::warn!("iteration {iteration}: batch holds a single identity, inter-class term is zero");
    }
    let batch_min_center_sq = min_center_pair(&emb_batch).map_or(f64::INFINITY, |p| p.sq_distance);

    let (aux, aux_grads) = match ctx.mode {
        LossMode::Softmax => (0.0, Matrix::zeros(emb_batch.len(), emb_batch.dim())),
        LossMode::Range => (parts.combined.value, parts.combined.grads),
        LossMode::Contrastive => {
            let pairs = batch_pairs(&batch.labels, &ctx.contrastive, &ctx.poor);
            scaled_pair_loss(contrastive_loss(&fwd.embeddings, &pairs, ctx.contrastive.margin)?, pairs.len(), ctx.contrastive.weight)
        }
        LossMode::Triplet => {
            let trips = batch_triplets(&batch.labels, &ctx.triplet, &ctx.poor);
            scaled_pair_loss(triplet_loss(&fwd.embeddings, &trips, ctx.triplet.margin)?, trips.len(), ctx.triplet.weight)
        }
    };

    let losses = StepLosses {
        total: xent.value + aux,
        softmax: xent.value,
        aux,
        intra: parts.intra.value,
        inter: parts.inter.value,
        batch_min_center_sq,
        lr: sgd.config.lr_at(iteration),
    };
    if !(losses.total.is_finite() && losses.intra.is_finite() && losses.inter.is_finite()) {
        return Err(TrainError::Aborted {
            source: NonFiniteLoss { iteration, losses },
            history: Vec::new(),
        });
    }

    let grads = backward(params, &fwd.cache, &aux_grads, &xent.dlogits)?;
    sgd.step(params, &grads, iteration)?;
    Ok(losses)
}

fn scaled_pair_loss(r: crate::losses::LossResult<f64>, count: usize, weight: f64) -> (f64, Matrix<f64>) {
    let scale = if count == 0 { 0.0 } else { weight / count as f64 };
    let mut g = r.grads;
    g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    (r.value * scale, g)
}

/// Median pairwise squared distance between the class centers of
/// `dataset` embedded by `params`.
pub fn median_center_sq_distance(params: &MlpParams<f64>, dataset: &LongTailDataset) -> Result<f64> {
    let emb = embed(params, dataset.inputs())?;
    let batch = EmbeddingBatch::new(emb, dataset.labels().to_vec())?;
    let centers = batch.centers();
    if centers.len() < 2 {
        return Err(Error::invalid("margin calibration needs at least 2 identities"));
    }
    let mut d = Vec::with_capacity(centers.len() * (centers.len() - 1) / 2);
    for a in 0..centers.len() {
        for b in (a + 1)..centers.len() {
            d.push(crate::geometry::sq_distance(&centers[a].1, &centers[b].1));
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    Ok(if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) })
}

/// Prepared training run: data, evaluation split, initial parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub full_set: LongTailDataset,
    pub train_set: LongTailDataset,
    pub eval_set: LongTailDataset,
    pub eval_pairs: Vec<VerificationPair>,
    pub margin: f64,
    pub params: MlpParams<f64>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: MlpParams<f64>,
    pub history: Vec<MetricsRecord>,
    pub margin: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let full_set = generate(&config.dataset)?;
        let train_set = truncate_tail(&full_set, config.tail_ratio, config.truncate_seed)?;
        let noise = config.eval.noise_sigma.unwrap_or(config.dataset.noise_sigma);
        let eval_set = full_set.resample(config.eval.per_identity, noise, config.eval.seed)?;
        let eval_pairs = verification_pairs(
            &eval_set,
            config.eval.n_pos,
            config.eval.n_neg,
            derive_seed(config.eval.seed, "pairs"),
        )?;
        let shape = NetworkShape {
            d_in: config.dataset.d_in,
            hidden: config.hidden.clone(),
            d_emb: config.d_emb,
            n_classes: train_set.identities().len(),
        };
        let params = init_params(&shape, config.init_seed)?;
        let margin = if config.auto_margin {
            let m = median_center_sq_distance(&params, &train_set)?;
            log::info!("auto margin: median initial inter-center squared distance {m:e}");
            if !(m > 0.0) {
                return Err(Error::invalid(format!("auto margin calibrated to {m}, need > 0")));
            }
            m
        } else {
            config.range.margin
        };
        Ok(Self {
            config,
            full_set,
            train_set,
            eval_set,
            eval_pairs,
            margin,
            params,
        })
    }

    pub fn step_context(&self) -> StepContext {
        StepContext::new(&self.config, &self.train_set, self.margin)
    }

    pub fn evaluate(&self, params: &MlpParams<f64>) -> Result<(GeometryMetrics, f64)> {
        let geometry = geometry_metrics(params, &self.eval_set)?;
        let acc = evaluate_verification(params, &self.eval_set, &self.eval_pairs, self.config.eval.n_thresholds)?;
        Ok((geometry, acc))
    }

    /// Runs all iterations. The trajectory is a pure function of the config.
    pub fn run(self) -> std::result::Result<TrainRun, TrainError> {
        self.run_with(|_| {})
    }

    /// Like [`Trainer::run`], calling `on_record` for each metrics row.
    pub fn run_with(self, mut on_record: impl FnMut(&MetricsRecord)) -> std::result::Result<TrainRun, TrainError> {
        let ctx = self.step_context();
        let mut params = self.params.clone();
        let mut sgd = Sgd::new(self.config.sgd)?;
        let mut sampler = PkSampler::new(&self.train_set, self.config.batch)?;
        let mut history = Vec::new();

        for t in 0..self.config.iterations {
            let batch = sampler.next_batch();
            let losses = match train_step(&mut params, &mut sgd, &batch, &ctx, t) {
                Ok(l) => l,
                Err(TrainError::Aborted { source, .. }) => {
                    log::error!("{source}");
                    return Err(TrainError::Aborted { source, history });
                }
                Err(e) => return Err(e),
            };
            if (t + 1) % self.config.eval_every == 0 {
                let (g, acc) = self.evaluate(&params)?;
                let rec = MetricsRecord {
                    iteration: t + 1,
                    lr: losses.lr,
                    total_loss: losses.total,
                    softmax_loss: losses.softmax,
                    aux_loss: losses.aux,
                    intra_loss: losses.intra,
                    inter_loss: losses.inter,
                    batch_min_center_sq: losses.batch_min_center_sq,
                    mean_intra_range: g.mean_intra_range,
                    min_center_sq: g.min_center_sq,
                    verification_accuracy: acc,
                };
                log::debug!("{rec:?}");
                on_record(&rec);
                history.push(rec);
            }
        }
        if let Some(path) = &self.config.checkpoint {
            save_checkpoint(&params, path)?;
        }
        Ok(TrainRun {
            params,
            history,
            margin: self.margin,
        })
    }
}

/// Builds and runs a trainer for `config`.
pub fn train(config: TrainConfig) -> std::result::Result<TrainRun, TrainError> {
    Trainer::new(config)?.run()
}
