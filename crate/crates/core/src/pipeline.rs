//! Training procedures: end-to-end joint clustering and representation
//! learning, the two-stage variant with mined nearest neighbors, the
//! semi-supervised variant, and ablation sweeps.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critics::{smooth_in_place, CriticConfig, CriticKind};
use crate::data::{self, Dataset, ViewConfig};
use crate::error::{invalid, CrlcError, Result};
use crate::losses::{entropy_of_mean, fc_loss_grad, pc_anchor_grad, LossWeights};
use crate::memory_bank::MemoryBank;
use crate::metrics::{self, Partition};
use crate::model::{sgd_step, softmax_backward, ForwardOutput, ModelSpec, SgdConfig, SgdState, TwoHeadModel};
use crate::seed;

/// Where the dataset of a run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mixture { classes: usize, dim: usize, n_per_class: usize, separation: f64 },
    Csv { path: PathBuf, classes: Option<usize> },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Mixture { classes: 4, dim: 16, n_per_class: 500, separation: 6.0 }
    }
}

impl DatasetSpec {
    /// Mixture data is drawn from the `data` stream of `master_seed`.
    pub fn load(&self, master_seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Mixture { classes, dim, n_per_class, separation } => data::gen_mixture(
                *classes,
                *dim,
                *n_per_class,
                *separation,
                seed::derive_seed(master_seed, seed::DATA),
            ),
            DatasetSpec::Csv { path, classes } => data::load_csv(path, *classes),
        }
    }
}

/// Source of the candidates of the probability contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcBackend {
    /// Candidates are the other view of every sample in the batch.
    InBatch,
    /// The positive and the negatives are rows of a momentum memory bank.
    MemoryBank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    TrainBackbone,
    FreezeBackbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub stage1_epochs: usize,
    pub stage1_optimizer: SgdConfig,
    pub neighbors: usize,
    pub stage2_epochs: usize,
    pub stage2_mode: Stage2Mode,
    pub stage2_optimizer: SgdConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 100,
            stage1_optimizer: SgdConfig { lr_init: 0.4, weight_decay: 1e-4, ..SgdConfig::default() },
            neighbors: 50,
            stage2_epochs: 100,
            stage2_mode: Stage2Mode::TrainBackbone,
            stage2_optimizer: SgdConfig {
                lr_init: 0.01,
                weight_decay: 1e-4,
                schedule: crate::model::LrSchedule::Constant,
                ..SgdConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiConfig {
    pub labels_per_class: usize,
    /// Labeled samples drawn (with replacement) per step.
    pub labeled_batch: usize,
}

impl Default for SemiConfig {
    fn default() -> Self {
        Self { labels_per_class: 1, labeled_batch: 64 }
    }
}

/// Fully resolved experiment configuration. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub views: ViewConfig,
    pub critic: CriticKind,
    pub temperature: f64,
    pub smoothing: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pc_backend: PcBackend,
    pub bank_momentum: f64,
    /// Candidates per anchor with the memory bank backend; `0` means the
    /// batch size.
    pub bank_candidates: usize,
    /// Average the losses over both view orderings.
    pub symmetric: bool,
    pub optimizer: SgdConfig,
    pub eval_every: usize,
    pub two_stage: TwoStageConfig,
    pub semi: SemiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            views: ViewConfig::default(),
            critic: CriticKind::LogDot,
            temperature: 0.1,
            smoothing: 0.01,
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 1.0,
            batch_size: 256,
            epochs: 200,
            seed: 0,
            pc_backend: PcBackend::InBatch,
            bank_momentum: 0.5,
            bank_candidates: 0,
            symmetric: true,
            optimizer: SgdConfig::default(),
            eval_every: 10,
            two_stage: TwoStageConfig::default(),
            semi: SemiConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn critic_config(&self) -> Result<CriticConfig> {
        if self.critic == CriticKind::ScaledCosine {
            return Err(invalid("the probability critic cannot be scaled_cosine"));
        }
        CriticConfig::new(self.critic, self.temperature, self.smoothing)
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda1, self.lambda2, self.lambda3)
    }

    pub fn bank_candidates(&self) -> usize {
        if self.bank_candidates == 0 {
            self.batch_size
        } else {
            self.bank_candidates
        }
    }

    /// Checks hyperparameter ranges and fills dataset-dependent model widths.
    pub fn resolve(&mut self, ds: &Dataset) -> Result<()> {
        self.critic_config()?;
        self.weights()?;
        self.views.validate()?;
        self.optimizer.validate()?;
        self.two_stage.stage1_optimizer.validate()?;
        self.two_stage.stage2_optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(invalid(format!("bank momentum must lie in [0, 1], got {}", self.bank_momentum)));
        }
        if self.batch_size < 2 || self.batch_size > ds.len() {
            return Err(invalid(format!(
                "batch size must lie in [2, {}] for this dataset, got {}",
                ds.len(),
                self.batch_size
            )));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be >= 1"));
        }
        if self.model.input_dim == 0 {
            self.model.input_dim = ds.dim();
        }
        if self.model.classes == 0 {
            self.model.classes = ds.class_count;
        }
        if self.model.input_dim != ds.dim() {
            return Err(CrlcError::DimensionMismatch {
                expected: ds.dim(),
                actual: self.model.input_dim,
                context: "model input width vs dataset",
            });
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Subhead whose argmax assignments were scored.
    pub head: usize,
    /// `None` when the dataset has no complete ground truth.
    pub metrics: Option<Metrics>,
    /// Accuracy of the first subhead read with the class identity mapping
    /// (semi-supervised runs only).
    pub labeled_acc: Option<f64>,
}

/// Epoch means of the training losses. Loss terms a stage does not optimize
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_pc: Option<f64>,
    pub loss_fc: Option<f64>,
    pub entropy: Option<f64>,
    pub info_nce_pc: Option<f64>,
    pub info_nce_fc: Option<f64>,
    pub pc_candidates: usize,
    pub fc_candidates: usize,
    pub loss_xent: Option<f64>,
    pub eval: Option<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Seconds since the Unix epoch at which the run started.
    pub started_unix_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub config: RunConfig,
    pub seed: u64,
    pub per_epoch: Vec<EpochRecord>,
    pub final_eval: EvalRecord,
    pub final_metrics: Option<Metrics>,
    /// Share of mined neighbors with the anchor's class (two-stage runs on
    /// labeled data only).
    pub neighbor_purity: Option<f64>,
    pub runtime_s: f64,
    pub metadata: Metadata,
}

impl RunReport {
    /// Clears the wall-clock fields so equal runs serialize identically.
    pub fn strip_timing(&mut self) {
        self.runtime_s = 0.0;
        self.metadata.started_unix_s = 0;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plot-ready per-epoch curves.
    pub fn curves_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
        let mut out = String::from(
            "stage,epoch,lr,loss_total,loss_pc,loss_fc,entropy,info_nce_pc,info_nce_fc,loss_xent,acc,nmi,ari,labeled_acc\n",
        );
        for r in &self.per_epoch {
            let m = r.eval.as_ref().and_then(|e| e.metrics);
            let labeled = r.eval.as_ref().and_then(|e| e.labeled_acc);
            out.push_str(&format!(
                "{},{},{:?},{:?},{},{},{},{},{},{},{},{},{},{}\n",
                r.stage,
                r.epoch,
                r.lr,
                r.loss_total,
                opt(r.loss_pc),
                opt(r.loss_fc),
                opt(r.entropy),
                opt(r.info_nce_pc),
                opt(r.info_nce_fc),
                opt(r.loss_xent),
                opt(m.map(|m| m.acc)),
                opt(m.map(|m| m.nmi)),
                opt(m.map(|m| m.ari)),
                opt(labeled),
            ));
        }
        out
    }
}

/// Trained model together with its report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: TwoHeadModel,
}

/// Indices of the `k` rows with the highest cosine similarity to each row,
/// excluding the row itself; ties go to the lower index.
pub fn mine_neighbors(features: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = features.nrows();
    if k >= n {
        return Err(invalid(format!("need k < N for neighbor mining (k = {k}, N = {n})")));
    }
    for (i, row) in features.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("feature row {i} has norm {norm}, expected 1")));
        }
    }
    let sims = features.dot(&features.t());
    Ok(sims
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        })
        .collect())
}

/// Argmax cluster of each row; ties go to the lower index.
fn argmax_rows(probs: ArrayView2<'_, f64>) -> Vec<usize> {
    probs
        .outer_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

const EVAL_CHUNK: usize = 512;

/// Per-subhead cluster assignments on clean inputs.
pub fn predict(model: &TwoHeadModel, x: ArrayView2<'_, f64>) -> Result<Vec<Vec<usize>>> {
    let mut heads = vec![Vec::with_capacity(x.nrows()); model.subheads.len()];
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let out = model.forward(x.slice(s![start..end, ..]))?;
        for (h, p) in heads.iter_mut().zip(&out.probs) {
            h.extend(argmax_rows(p.view()));
        }
        start = end;
    }
    Ok(heads)
}

/// Unit-norm features of clean inputs.
pub fn embed(model: &TwoHeadModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), model.spec().feature_dim));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let f = model.forward(x.slice(s![start..end, ..]))?.features;
        out.slice_mut(s![start..end, ..]).assign(&f);
        start = end;
    }
    Ok(out)
}

pub fn score_partition(pred: &[usize], truth: &[usize]) -> Result<Metrics> {
    let p = Partition::new(pred.to_vec())?;
    let t = Partition::new(truth.to_vec())?;
    Ok(Metrics {
        acc: metrics::clustering_accuracy(&p, &t)?,
        nmi: metrics::nmi(&p, &t)?,
        ari: metrics::ari(&p, &t)?,
    })
}

/// Scores subhead `head` against the dataset's ground truth.
pub fn evaluate(model: &TwoHeadModel, ds: &Dataset, head: usize, labeled_mapping: bool) -> Result<EvalRecord> {
    let preds = predict(model, ds.features.view())?;
    let pred = preds.get(head).ok_or(CrlcError::IndexOutOfRange { index: head, len: preds.len() })?;
    let truth = ds.truth();
    let metrics = truth.as_ref().map(|t| score_partition(pred, t)).transpose()?;
    let labeled_acc = match (labeled_mapping, &truth) {
        (true, Some(t)) => {
            let hits = preds[0].iter().zip(t).filter(|(p, t)| p == t).count();
            Some(hits as f64 / t.len() as f64)
        }
        _ => None,
    };
    Ok(EvalRecord { head, metrics, labeled_acc })
}

/// Gradients on one view's outputs, in the shapes `backward` expects.
struct ViewGrads {
    features: Array2<f64>,
    /// Gradient on each subhead's probabilities.
    probs: Vec<Array2<f64>>,
}

impl ViewGrads {
    fn zeros(out: &ForwardOutput) -> Self {
        Self {
            features: Array2::zeros(out.features.raw_dim()),
            probs: out.probs.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    fn apply(self, model: &mut TwoHeadModel, out: &ForwardOutput) -> Result<()> {
        let logits: Vec<Array2<f64>> = out
            .probs
            .iter()
            .zip(&self.probs)
            .map(|(p, g)| softmax_backward(p.view(), g.view()))
            .collect();
        model.backward(out, self.features.view(), &logits)
    }
}

fn smoothed(probs: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let mut out = probs.as_standard_layout().into_owned();
    for mut row in out.outer_iter_mut() {
        smooth_in_place(row.as_slice_mut().expect("standard layout"), gamma);
    }
    out
}

/// Probability contrastive loss of `anchors` against the matching rows of
/// `candidates` (in-batch negatives). Returns the mean loss and gradients on
/// the raw (unsmoothed) probabilities, scaled by `scale`.
fn pc_in_batch(
    critic: &CriticConfig,
    anchors: &Array2<f64>,
    candidates: &Array2<f64>,
    scale: f64,
    grad_anchor: &mut Array2<f64>,
    grad_cand: &mut Array2<f64>,
) -> Result<f64> {
    let gamma = critic.smoothing;
    let a = smoothed(anchors, gamma);
    let c = smoothed(candidates, gamma);
    let m = a.nrows();
    let classes = a.ncols();
    let rows: Vec<&[f64]> = c.outer_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let chain = scale * (1.0 - gamma) / m as f64;
    let mut total = 0.0;
    for i in 0..m {
        let g = pc_anchor_grad(critic.kind, a.row(i).to_slice().expect("standard layout"), rows.iter().copied(), i)?;
        total += g.loss;
        for (dst, src) in grad_anchor.row_mut(i).iter_mut().zip(&g.anchor) {
            *dst += chain * src;
        }
        let gc = ArrayView2::from_shape((m, classes), &g.candidates).expect("m x c");
        grad_cand.scaled_add(chain, &gc);
    }
    Ok(total / m as f64)
}

/// Probability contrastive loss with memory-bank candidates: candidate one is
/// the bank row of the anchor's own sample, the rest are sampled rows.
fn pc_with_bank(
    critic: &CriticConfig,
    anchors: &Array2<f64>,
    sample_ids: &[usize],
    bank: &mut MemoryBank,
    candidates: usize,
    scale: f64,
    grad_anchor: &mut Array2<f64>,
) -> Result<f64> {
    let gamma = critic.smoothing;
    let a = smoothed(anchors, gamma);
    let m = a.nrows();
    let chain = scale * (1.0 - gamma) / m as f64;
    let mut total = 0.0;
    for (i, &id) in sample_ids.iter().enumerate() {
        let negatives = bank.sample_negative_indices(candidates, id)?;
        let mut rows: Vec<Vec<f64>> = std::iter::once(id)
            .chain(negatives)
            .map(|j| bank.row(j).to_vec())
            .collect();
        rows.iter_mut().for_each(|r| smooth_in_place(r, gamma));
        let g = pc_anchor_grad(critic.kind, a.row(i).to_slice().expect("standard layout"), rows.iter().map(Vec::as_slice), 0)?;
        total += g.loss;
        for (dst, src) in grad_anchor.row_mut(i).iter_mut().zip(&g.anchor) {
            *dst += chain * src;
        }
    }
    Ok(total / m as f64)
}

/// Adds `scale * d(-H(mean rows))/d rows` and returns the entropy.
fn entropy_term(probs: &Array2<f64>, scale: f64, grad: &mut Array2<f64>) -> f64 {
    let (h, dh) = entropy_of_mean(probs.view());
    for mut row in grad.outer_iter_mut() {
        for (g, d) in row.iter_mut().zip(&dh) {
            *g -= scale * d;
        }
    }
    h
}

/// Memory-bank state used by one training step.
struct BankStep<'b> {
    banks: &'b mut [MemoryBank],
    /// Dataset index of every batch row.
    ids: &'b [usize],
    candidates: usize,
}

struct ObjectiveTerms<'c> {
    critic: &'c CriticConfig,
    weights: &'c LossWeights,
    symmetric: bool,
}

impl ObjectiveTerms<'_> {
    /// Loss of one step given both views' outputs, with gradients on those
    /// outputs. Epoch statistics are added to `acc`.
    fn evaluate(
        &self,
        objective: Objective,
        out1: &ForwardOutput,
        out2: &ForwardOutput,
        mut bank: Option<BankStep<'_>>,
        acc: &mut EpochAccumulator,
    ) -> Result<(f64, ViewGrads, ViewGrads)> {
            let mut g1 = ViewGrads::zeros(out1);
            let mut g2 = ViewGrads::zeros(out2);
            let orderings = if self.symmetric { 2.0 } else { 1.0 };
            let mut total = 0.0;

            if objective != Objective::NeighborCluster {
                let w = if objective == Objective::FeatureOnly { 1.0 } else { self.weights.feature };
                let positives: Vec<usize> = (0..out1.features.nrows()).collect();
                let (l12, ga, gc) = fc_loss_grad(out1.features.view(), out2.features.view(), &positives, self.critic.temperature, true)?;
                let mut fc = l12;
                g1.features.scaled_add(w / orderings, &ga);
                g2.features.scaled_add(w / orderings, &gc);
                if self.symmetric {
                    let (l21, ga, gc) =
                        fc_loss_grad(out2.features.view(), out1.features.view(), &positives, self.critic.temperature, true)?;
                    fc = 0.5 * (fc + l21);
                    g2.features.scaled_add(w / orderings, &ga);
                    g1.features.scaled_add(w / orderings, &gc);
                }
                acc.fc += fc;
                total += w * fc;
            }

            if objective != Objective::FeatureOnly {
                let heads = out1.probs.len();
                let head_scale = 1.0 / heads as f64;
                let mut pc_sum = 0.0;
                let mut ent_sum = 0.0;
                for h in 0..heads {
                    let scale = head_scale / orderings;
                    let (q1, q2) = (&out1.probs[h], &out2.probs[h]);
                    let mut pc = if let Some(bank) = bank.as_mut() {
                        pc_with_bank(self.critic, q1, bank.ids, &mut bank.banks[h], bank.candidates, scale, &mut g1.probs[h])?
                    } else {
                        pc_in_batch(self.critic, q1, q2, scale, &mut g1.probs[h], &mut g2.probs[h])?
                    };
                    let mut ent = entropy_term(q1, scale * self.weights.entropy, &mut g1.probs[h]);
                    if self.symmetric {
                        let pc21 = if let Some(bank) = bank.as_mut() {
                            pc_with_bank(self.critic, q2, bank.ids, &mut bank.banks[h], bank.candidates, scale, &mut g2.probs[h])?
                        } else {
                            pc_in_batch(self.critic, q2, q1, scale, &mut g2.probs[h], &mut g1.probs[h])?
                        };
                        pc = 0.5 * (pc + pc21);
                        ent = 0.5 * (ent + entropy_term(q2, scale * self.weights.entropy, &mut g2.probs[h]));
                    }
                    acc.head_cluster[h] += pc - self.weights.entropy * ent;
                    pc_sum += pc;
                    ent_sum += ent;
                }
                let pc = pc_sum * head_scale;
                let ent = ent_sum * head_scale;
                acc.pc += pc;
                acc.entropy += ent;
                total += pc - self.weights.entropy * ent;

                if let Some(bank) = bank {
                    // read-then-write: bank rows move only after this step's losses
                    for h in 0..heads {
                        let fresh = (&out1.probs[h] + &out2.probs[h]) * 0.5;
                        for (row, &id) in fresh.outer_iter().zip(bank.ids) {
                            let mut r = row.to_vec();
                            let s: f64 = r.iter().sum();
                            r.iter_mut().for_each(|v| *v /= s);
                            bank.banks[h].update(id, &r)?;
                        }
                    }
                }
            }
        Ok((total, g1, g2))
    }
}

/// Joint objective of two views of the same samples with in-batch candidates:
/// the feature loss weighted by `lambda2` plus the mean cluster loss over
/// subheads. When `backward` is set the parameter gradients are accumulated
/// into `model`.
pub fn joint_objective(
    model: &mut TwoHeadModel,
    view1: ArrayView2<'_, f64>,
    view2: ArrayView2<'_, f64>,
    cfg: &RunConfig,
    backward: bool,
) -> Result<f64> {
    if view1.dim() != view2.dim() {
        return Err(invalid("both views need the same shape"));
    }
    let critic = cfg.critic_config()?;
    let weights = cfg.weights()?;
    let out1 = model.forward(view1)?;
    let out2 = model.forward(view2)?;
    let terms = ObjectiveTerms { critic: &critic, weights: &weights, symmetric: cfg.symmetric };
    let mut acc = EpochAccumulator::new(out1.probs.len());
    let (total, g1, g2) = terms.evaluate(Objective::Joint, &out1, &out2, None, &mut acc)?;
    if backward {
        g1.apply(model, &out1)?;
        g2.apply(model, &out2)?;
    }
    Ok(total)
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    total: f64,
    pc: f64,
    fc: f64,
    entropy: f64,
    xent: f64,
    head_cluster: Vec<f64>,
}

impl EpochAccumulator {
    fn new(heads: usize) -> Self {
        Self { head_cluster: vec![0.0; heads], ..Default::default() }
    }

    /// Subhead with the lowest mean cluster loss this epoch.
    fn best_head(&self) -> usize {
        self.head_cluster
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best })
            .0
    }
}

/// Which loss terms one training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    /// Cluster loss on all subheads plus the weighted feature loss.
    Joint,
    /// Feature contrastive loss only.
    FeatureOnly,
    /// Cluster loss only, positives drawn from mined neighbors.
    NeighborCluster,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    critic: CriticConfig,
    weights: LossWeights,
    model: TwoHeadModel,
    augment_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
    label_rng: ChaCha8Rng,
    banks: Vec<MemoryBank>,
    labeled: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    records: Vec<EpochRecord>,
    current_head: usize,
    labeled_mapping: bool,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, ds: &'a Dataset) -> Result<Self> {
        let master = cfg.seed;
        let model = TwoHeadModel::new(cfg.model.clone(), seed::derive_seed(master, seed::INIT))?;
        let banks = if cfg.pc_backend == PcBackend::MemoryBank {
            let base = seed::derive_seed(master, seed::BANK);
            (0..cfg.model.subheads)
                .map(|h| MemoryBank::new(ds.len(), cfg.model.classes, cfg.bank_momentum, base.wrapping_add(h as u64)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg,
            ds,
            critic: cfg.critic_config()?,
            weights: cfg.weights()?,
            model,
            augment_rng: ChaCha8Rng::seed_from_u64(seed::derive_seed(master, seed::AUGMENT)),
            batch_rng: ChaCha8Rng::seed_from_u64(seed::derive_seed(master, seed::BATCH)),
            label_rng: ChaCha8Rng::seed_from_u64(seed::derive_seed(master, seed::LABELS)),
            banks,
            labeled: Vec::new(),
            neighbors: Vec::new(),
            records: Vec::new(),
            current_head: 0,
            labeled_mapping: false,
        })
    }

    fn evaluate(&self) -> Result<EvalRecord> {
        evaluate(&self.model, self.ds, self.current_head, self.labeled_mapping)
    }

    fn run_stage(&mut self, stage: u8, objective: Objective, epochs: usize, opt: SgdConfig) -> Result<()> {
        let mut state = SgdState::new(opt, &self.model, epochs)?;
        for epoch in 0..epochs {
            state.epoch = epoch;
            let lr = state.lr();
            let mut acc = EpochAccumulator::new(self.model.subheads.len());
            let batches = data::epoch_batches(self.ds.len(), self.cfg.batch_size, &mut self.batch_rng);
            for batch in &batches {
                self.step(objective, batch, &mut acc)?;
                sgd_step(&mut self.model, &mut state);
            }
            let steps = acc.steps.max(1) as f64;
            let m = self.cfg.batch_size;
            let pc_candidates = match (objective, self.cfg.pc_backend) {
                (Objective::Joint, PcBackend::MemoryBank) => self.cfg.bank_candidates(),
                _ => m,
            };
            let has_pc = objective != Objective::FeatureOnly;
            let has_fc = objective != Objective::NeighborCluster;
            let mean_pc = acc.pc / steps;
            let mean_fc = acc.fc / steps;
            if has_pc {
                self.current_head = acc.best_head();
            }
            let done = epoch + 1;
            let eval = if done % self.cfg.eval_every == 0 || done == epochs {
                Some(self.evaluate()?)
            } else {
                None
            };
            self.records.push(EpochRecord {
                stage,
                epoch: done,
                lr,
                loss_total: acc.total / steps,
                loss_pc: has_pc.then_some(mean_pc),
                loss_fc: has_fc.then_some(mean_fc),
                entropy: has_pc.then_some(acc.entropy / steps),
                info_nce_pc: has_pc.then(|| (pc_candidates as f64).ln() - mean_pc),
                info_nce_fc: has_fc.then(|| (m as f64).ln() - mean_fc),
                pc_candidates,
                fc_candidates: m,
                loss_xent: (!self.labeled.is_empty() && self.weights.crossentropy > 0.0)
                    .then_some(acc.xent / steps),
                eval,
            });
        }
        Ok(())
    }

    fn views(&mut self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.cfg.views.apply_rows(x, &mut self.augment_rng)
    }

    fn step(&mut self, objective: Objective, batch: &[usize], acc: &mut EpochAccumulator) -> Result<()> {
        let x = self.ds.features.select(Axis(0), batch);
        // the second view comes from a mined neighbor in the neighbor objective
        let partner_ids: Vec<usize> = if objective == Objective::NeighborCluster {
            batch
                .iter()
                .map(|&i| {
                    let nb = &self.neighbors[i];
                    nb[self.batch_rng.gen_range(0..nb.len())]
                })
                .collect()
        } else {
            batch.to_vec()
        };
        let x2 = self.ds.features.select(Axis(0), &partner_ids);
        let v1 = self.views(x.view());
        let v2 = self.views(x2.view());
        let out1 = self.model.forward(v1.view())?;
        let out2 = self.model.forward(v2.view())?;
        let bank = (objective == Objective::Joint && self.cfg.pc_backend == PcBackend::MemoryBank).then(|| BankStep {
            banks: &mut self.banks,
            ids: batch,
            candidates: self.cfg.bank_candidates(),
        });
        let terms = ObjectiveTerms { critic: &self.critic, weights: &self.weights, symmetric: self.cfg.symmetric };
        let (mut total, g1, g2) = terms.evaluate(objective, &out1, &out2, bank, acc)?;

        if !self.labeled.is_empty() && self.weights.crossentropy > 0.0 {
            total += self.weights.crossentropy * self.labeled_step(acc)?;
        }

        g1.apply(&mut self.model, &out1)?;
        g2.apply(&mut self.model, &out2)?;
        acc.total += total;
        acc.steps += 1;
        Ok(())
    }

    /// Cross-entropy of the first subhead on a labeled minibatch; gradients are
    /// accumulated into the model directly.
    fn labeled_step(&mut self, acc: &mut EpochAccumulator) -> Result<f64> {
        let b = self.cfg.semi.labeled_batch.max(1);
        let ids: Vec<usize> = (0..b).map(|_| self.labeled[self.label_rng.gen_range(0..self.labeled.len())]).collect();
        let x = self.ds.features.select(Axis(0), &ids);
        let v = self.cfg.views.apply_rows(x.view(), &mut self.label_rng);
        let out = self.model.forward(v.view())?;
        let q = &out.probs[0];
        let mut grad = ViewGrads::zeros(&out);
        let mut nll = 0.0;
        let w = self.weights.crossentropy / b as f64;
        for (i, &id) in ids.iter().enumerate() {
            let y = self.ds.labels[id] as usize;
            let p = q[[i, y]];
            nll -= p.ln();
            grad.probs[0][[i, y]] = -w / p;
        }
        grad.apply(&mut self.model, &out)?;
        let nll = nll / b as f64;
        acc.xent += nll;
        Ok(nll)
    }

    fn neighbor_purity(&self) -> Option<f64> {
        let truth = self.ds.truth()?;
        if self.neighbors.is_empty() {
            return None;
        }
        let (same, total) = self.neighbors.iter().enumerate().fold((0usize, 0usize), |(s, t), (i, nb)| {
            (s + nb.iter().filter(|&&j| truth[j] == truth[i]).count(), t + nb.len())
        });
        Some(same as f64 / total as f64)
    }

    fn finish(self, mode: &str, started: Instant, started_unix_s: u64) -> Result<TrainOutcome> {
        let final_eval = self.evaluate()?;
        let neighbor_purity = self.neighbor_purity();
        let report = RunReport {
            mode: mode.to_string(),
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            per_epoch: self.records,
            final_metrics: final_eval.metrics,
            final_eval,
            neighbor_purity,
            runtime_s: started.elapsed().as_secs_f64(),
            metadata: Metadata { started_unix_s },
        };
        Ok(TrainOutcome { report, model: self.model })
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn prepare(cfg: &RunConfig) -> Result<(RunConfig, Dataset)> {
    let ds = cfg.dataset.load(cfg.seed)?;
    let mut resolved = cfg.clone();
    resolved.resolve(&ds)?;
    Ok((resolved, ds))
}

/// Joint training of both heads on two views per sample.
pub fn train_end_to_end(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (cfg, ds) = prepare(cfg)?;
    train_end_to_end_on(&cfg, &ds)
}

pub fn train_end_to_end_on(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    let started = Instant::now();
    let unix = unix_now();
    let mut cfg = cfg.clone();
    cfg.resolve(ds)?;
    let mut t = Trainer::new(&cfg, ds)?;
    t.run_stage(1, Objective::Joint, cfg.epochs, cfg.optimizer)?;
    t.finish("end_to_end", started, unix)
}

/// Feature pretraining, neighbor mining, then cluster training with neighbors
/// as positives.
pub fn train_two_stage(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (cfg, ds) = prepare(cfg)?;
    train_two_stage_on(&cfg, &ds)
}

pub fn train_two_stage_on(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    let started = Instant::now();
    let unix = unix_now();
    let mut cfg = cfg.clone();
    cfg.resolve(ds)?;
    let ts = cfg.two_stage.clone();
    let mut t = Trainer::new(&cfg, ds)?;
    t.run_stage(1, Objective::FeatureOnly, ts.stage1_epochs, ts.stage1_optimizer)?;
    let features = embed(&t.model, ds.features.view())?;
    t.neighbors = mine_neighbors(features.view(), ts.neighbors)?;
    t.model.set_backbone_frozen(ts.stage2_mode == Stage2Mode::FreezeBackbone);
    t.run_stage(2, Objective::NeighborCluster, ts.stage2_epochs, ts.stage2_optimizer)?;
    t.model.set_backbone_frozen(false);
    t.finish("two_stage", started, unix)
}

/// Joint training plus cross-entropy of the first subhead on `labeled`
/// samples. Evaluation also reads the first subhead with the class identity
/// mapping.
pub fn train_semi(cfg: &RunConfig, labeled: &[usize]) -> Result<TrainOutcome> {
    let (cfg, ds) = prepare(cfg)?;
    train_semi_on(&cfg, &ds, labeled)
}

pub fn train_semi_on(cfg: &RunConfig, ds: &Dataset, labeled: &[usize]) -> Result<TrainOutcome> {
    let started = Instant::now();
    let unix = unix_now();
    if labeled.is_empty() {
        return Err(invalid("semi-supervised training needs at least one labeled sample"));
    }
    if let Some(&bad) = labeled.iter().find(|&&i| i >= ds.len() || ds.labels[i] < 0) {
        return Err(invalid(format!("index {bad} is not a labeled sample")));
    }
    let mut cfg = cfg.clone();
    cfg.resolve(ds)?;
    let mut t = Trainer::new(&cfg, ds)?;
    t.labeled = labeled.to_vec();
    t.labeled_mapping = true;
    t.run_stage(1, Objective::Joint, cfg.epochs, cfg.optimizer)?;
    t.finish("semi", started, unix)
}

/// Draws the class-balanced labeled subset of a semi-supervised run from the
/// `labels` stream of the run seed.
pub fn labeled_subset(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<usize>> {
    data::sample_labeled(ds, cfg.semi.labels_per_class, seed::derive_seed(cfg.seed, "labeled-subset"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    Critic(Vec<CriticKind>),
    Lambda2(Vec<f64>),
    PcBackend(Vec<PcBackend>),
    Momentum(Vec<f64>),
    NumNegatives(Vec<usize>),
}

impl AblationAxis {
    /// One config per value, all sharing the base seed (and so the same data).
    pub fn configs(&self, base: &RunConfig) -> Vec<RunConfig> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Critic(v) => v.iter().map(|&k| with(&|c| c.critic = k)).collect(),
            AblationAxis::Lambda2(v) => v.iter().map(|&l| with(&|c| c.lambda2 = l)).collect(),
            AblationAxis::PcBackend(v) => v.iter().map(|&b| with(&|c| c.pc_backend = b)).collect(),
            AblationAxis::Momentum(v) => v
                .iter()
                .map(|&a| {
                    with(&|c| {
                        c.pc_backend = PcBackend::MemoryBank;
                        c.bank_momentum = a;
                    })
                })
                .collect(),
            AblationAxis::NumNegatives(v) => v
                .iter()
                .map(|&m| {
                    with(&|c| {
                        c.pc_backend = PcBackend::MemoryBank;
                        c.bank_candidates = m;
                    })
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AblationAxis::Critic(v) => v.len(),
            AblationAxis::Lambda2(v) | AblationAxis::Momentum(v) => v.len(),
            AblationAxis::PcBackend(v) => v.len(),
            AblationAxis::NumNegatives(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs one end-to-end training per axis value, up to `jobs` at a time.
/// Reports come back in value order.
pub fn ablation_sweep(base: &RunConfig, axis: &AblationAxis, jobs: usize) -> Result<Vec<RunReport>> {
    let configs = axis.configs(base);
    if configs.is_empty() {
        return Err(invalid("ablation axis has no values"));
    }
    let ds = base.dataset.load(base.seed)?;
    let jobs = jobs.max(1);
    let mut reports = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(jobs) {
        let results: Vec<Result<RunReport>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|c| scope.spawn(|| train_end_to_end_on(c, &ds).map(|o| o.report)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for r in results {
            reports.push(r?);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            dataset: DatasetSpec::Mixture { classes: 3, dim: 6, n_per_class: 40, separation: 6.0 },
            model: ModelSpec {
                backbone_hidden: vec![16],
                rl_hidden: 16,
                feature_dim: 8,
                head_hidden: 16,
                subheads: 2,
                ..ModelSpec::default()
            },
            batch_size: 32,
            epochs: 3,
            eval_every: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn neighbor_examples() {
        let deg = |d: f64| {
            let r = d.to_radians();
            [r.cos(), r.sin()]
        };
        let f = array![deg(0.0), deg(10.0), deg(90.0)];
        assert_eq!(mine_neighbors(f.view(), 1).unwrap()[0], vec![1]);
        let all = mine_neighbors(f.view(), 2).unwrap();
        assert_eq!(all[0], vec![1, 2]);
        assert_eq!(all[2], vec![1, 0]);
        assert!(all.iter().enumerate().all(|(i, r)| !r.contains(&i)));
        assert!(mine_neighbors(f.view(), 3).is_err());
        // ties resolve to the lower index
        let t = array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
        assert_eq!(mine_neighbors(t.view(), 1).unwrap()[1], vec![2]);
    }

    #[test]
    fn zero_epochs_reports_initial_eval() {
        let cfg = RunConfig { epochs: 0, ..tiny_config() };
        let out = train_end_to_end(&cfg).unwrap();
        assert!(out.report.per_epoch.is_empty());
        assert!(out.report.final_metrics.is_some());
    }

    #[test]
    fn records_and_bounds() {
        let out = train_end_to_end(&tiny_config()).unwrap();
        let r = &out.report;
        assert_eq!(r.per_epoch.len(), 3);
        assert!(r.per_epoch[0].eval.is_none());
        assert!(r.per_epoch[1].eval.is_some() && r.per_epoch[2].eval.is_some());
        for e in &r.per_epoch {
            assert!(e.info_nce_pc.unwrap() <= (e.pc_candidates as f64).ln());
            assert!(e.info_nce_fc.unwrap() <= (e.fc_candidates as f64).ln());
            assert!(e.loss_total.is_finite());
        }
        assert_eq!(r.config.model.input_dim, 6);
        assert_eq!(r.config.model.classes, 3);
    }

    #[test]
    fn memory_bank_backend_runs() {
        let cfg = RunConfig { pc_backend: PcBackend::MemoryBank, bank_candidates: 10, ..tiny_config() };
        let out = train_end_to_end(&cfg).unwrap();
        assert!(out.report.per_epoch.iter().all(|e| e.pc_candidates == 10));
        assert!(out.report.per_epoch.iter().all(|e| e.info_nce_pc.unwrap() <= 10f64.ln()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = RunConfig { batch_size: 1, ..tiny_config() };
        assert!(train_end_to_end(&bad).is_err());
        let bad = RunConfig { smoothing: 2.0, ..tiny_config() };
        assert!(train_end_to_end(&bad).is_err());
        let bad = RunConfig { critic: CriticKind::ScaledCosine, ..tiny_config() };
        assert!(train_end_to_end(&bad).is_err());
        assert!(train_semi(&tiny_config(), &[]).is_err());
    }

    #[test]
    fn ablation_cardinality() {
        let axis = AblationAxis::Critic(CriticKind::PROBABILITY.to_vec());
        let base = RunConfig { epochs: 1, ..tiny_config() };
        let reports = ablation_sweep(&base, &axis, 2).unwrap();
        assert_eq!(reports.len(), 4);
        for (r, k) in reports.iter().zip(CriticKind::PROBABILITY) {
            assert_eq!(r.config.critic, k);
        }
    }
}
