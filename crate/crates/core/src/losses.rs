//! Contrastive objectives over features and cluster probabilities, the
//! marginal-entropy regularizer, the closed-form logit gradient of the
//! probability contrastive loss, and the InfoNCE estimate.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::critics::{self, accumulate_critic_grad, CriticConfig, CriticKind, ProbVector};
use crate::error::{invalid, CrlcError, Result};

/// Logits are hard-clipped to this magnitude before the softmax.
pub const LOGIT_CLAMP: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Marginal-entropy weight.
    pub entropy: f64,
    /// Feature contrastive weight.
    pub feature: f64,
    /// Labeled cross-entropy weight.
    pub crossentropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { entropy: 1.0, feature: 10.0, crossentropy: 1.0 }
    }
}

impl LossWeights {
    pub fn new(entropy: f64, feature: f64, crossentropy: f64) -> Result<Self> {
        let w = Self { entropy, feature, crossentropy };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("entropy", self.entropy),
            ("feature", self.feature),
            ("crossentropy", self.crossentropy),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} weight must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Clipped logits of one probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.iter_mut().for_each(|v| *v = v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn softmax(&self) -> Vec<f64> {
        softmax(&self.0)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|u| (u - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Negative log-softmax of `scores[positive]`. Never negative.
pub fn contrast_from_scores(scores: &[f64], positive: usize) -> Result<f64> {
    if positive >= scores.len() {
        return Err(CrlcError::IndexOutOfRange { index: positive, len: scores.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("contrast scores must be finite"));
    }
    Ok((log_sum_exp(scores) - scores[positive]).max(0.0))
}

/// Loss plus `d loss / d scores`, i.e. `softmax(scores) - onehot(positive)`.
fn contrast_with_grad(scores: &[f64], positive: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(scores);
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    grad[positive] -= 1.0;
    ((lse - scores[positive]).max(0.0), grad)
}

/// Rows of unit-norm feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch(Array2<f64>);

impl FeatureBatch {
    /// Wraps rows that are already unit norm (within 1e-7).
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-7 {
                return Err(invalid(format!("feature row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self(rows))
    }

    /// Normalizes each row; zero rows are a domain error.
    pub fn normalized(mut rows: Array2<f64>) -> Result<Self> {
        for (i, mut row) in rows.outer_iter_mut().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(CrlcError::Domain(format!("feature row {i} has norm {norm}")));
            }
            row /= norm;
        }
        Ok(Self(rows))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Mean feature contrastive loss: anchor `i` scores every candidate with the
/// scaled cosine critic and `positives[i]` names its positive candidate.
pub fn loss_fc(
    anchors: &FeatureBatch,
    candidates: &FeatureBatch,
    positives: &[usize],
    temperature: f64,
) -> Result<f64> {
    Ok(fc_loss_grad(anchors.view(), candidates.view(), positives, temperature, false)?.0)
}

/// Feature contrastive loss with gradients on anchors and candidates.
pub(crate) fn fc_loss_grad(
    anchors: ArrayView2<'_, f64>,
    candidates: ArrayView2<'_, f64>,
    positives: &[usize],
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if positives.len() != anchors.nrows() {
        return Err(invalid(format!(
            "{} anchors but {} positive indices",
            anchors.nrows(),
            positives.len()
        )));
    }
    if anchors.ncols() != candidates.ncols() {
        return Err(CrlcError::DimensionMismatch {
            expected: anchors.ncols(),
            actual: candidates.ncols(),
            context: "feature width",
        });
    }
    if let Some(&bad) = positives.iter().find(|&&p| p >= candidates.nrows()) {
        return Err(CrlcError::IndexOutOfRange { index: bad, len: candidates.nrows() });
    }
    let n = anchors.nrows();
    let scores = anchors.dot(&candidates.t()) / temperature;
    let mut score_grad = Array2::<f64>::zeros(scores.raw_dim());
    let mut total = 0.0;
    for (i, row) in scores.outer_iter().enumerate() {
        let row = row.to_vec();
        let (loss, g) = contrast_with_grad(&row, positives[i]);
        total += loss;
        if want_grad {
            score_grad.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return Ok((mean, Array2::zeros((0, 0)), Array2::zeros((0, 0))));
    }
    score_grad /= n as f64 * temperature;
    let grad_anchor = score_grad.dot(&candidates);
    let grad_cand = score_grad.t().dot(&anchors);
    Ok((mean, grad_anchor, grad_cand))
}

/// One anchor with its `M` candidates; `positive_index` names the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    pub anchor: ProbVector,
    pub rows: Vec<ProbVector>,
    pub positive_index: usize,
}

impl ProbBatch {
    pub fn new(anchor: ProbVector, rows: Vec<ProbVector>, positive_index: usize) -> Result<Self> {
        if positive_index >= rows.len() {
            return Err(CrlcError::IndexOutOfRange { index: positive_index, len: rows.len() });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != anchor.len()) {
            return Err(CrlcError::DimensionMismatch {
                expected: anchor.len(),
                actual: r.len(),
                context: "probability batch row",
            });
        }
        Ok(Self { anchor, rows, positive_index })
    }
}

/// Per-anchor probability contrastive loss on already smoothed inputs, with
/// gradients with respect to those smoothed inputs.
pub(crate) struct AnchorGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    /// Row-major `M x C`.
    pub candidates: Vec<f64>,
}

pub(crate) fn pc_anchor_grad<'a>(
    kind: CriticKind,
    anchor: &[f64],
    candidates: impl ExactSizeIterator<Item = &'a [f64]> + Clone,
    positive: usize,
) -> Result<AnchorGrad> {
    let c = anchor.len();
    let m = candidates.len();
    if kind == CriticKind::LogDot {
        return log_dot_anchor_grad(anchor, candidates, positive);
    }
    let mut scores = Vec::with_capacity(m);
    for cand in candidates.clone() {
        scores.push(score_prob(kind, anchor, cand)?);
    }
    let (loss, w) = contrast_with_grad(&scores, positive);
    let mut g_anchor = vec![0.0; c];
    let mut g_cands = vec![0.0; m * c];
    for (j, cand) in candidates.enumerate() {
        accumulate_critic_grad(kind, anchor, cand, w[j], &mut g_anchor, &mut g_cands[j * c..(j + 1) * c]);
    }
    Ok(AnchorGrad { loss, anchor: g_anchor, candidates: g_cands })
}

/// `exp(log(a . b)) = a . b`, so the log-dot softmax weights are the dot
/// products normalized by their sum and no exponentials are needed.
fn log_dot_anchor_grad<'a>(
    anchor: &[f64],
    candidates: impl ExactSizeIterator<Item = &'a [f64]> + Clone,
    positive: usize,
) -> Result<AnchorGrad> {
    let c = anchor.len();
    let m = candidates.len();
    let dots: Vec<f64> = candidates.clone().map(|q| critics::dot(anchor, q)).collect();
    if let Some(j) = dots.iter().position(|&d| !(d > 0.0)) {
        return Err(CrlcError::Domain(format!("log of non-positive dot product at candidate {j}")));
    }
    let total: f64 = dots.iter().sum();
    let pos = dots[positive];
    let loss = (total.ln() - pos.ln()).max(0.0);
    // d loss / d score_j = dots_j / total - [j = pos], d score_j / d q_j = anchor / dots_j
    let inv_total = 1.0 / total;
    let mut g_anchor = vec![0.0; c];
    let mut g_cands = vec![0.0; m * c];
    for (j, cand) in candidates.enumerate() {
        let w = if j == positive { inv_total - 1.0 / pos } else { inv_total };
        let out = &mut g_cands[j * c..(j + 1) * c];
        for k in 0..c {
            g_anchor[k] += w * cand[k];
            out[k] = w * anchor[k];
        }
    }
    Ok(AnchorGrad { loss, anchor: g_anchor, candidates: g_cands })
}

fn score_prob(kind: CriticKind, p: &[f64], q: &[f64]) -> Result<f64> {
    match kind {
        CriticKind::LogDot => critics::critic_log_dot(p, q),
        CriticKind::Dot => Ok(critics::critic_dot(p, q)),
        CriticKind::NegL2 => Ok(critics::critic_neg_l2(p, q)),
        CriticKind::NegJs => Ok(critics::critic_neg_js(p, q)),
        CriticKind::ScaledCosine => {
            Err(invalid("scaled cosine is a feature critic, not a probability critic"))
        }
    }
}

/// Probability contrastive loss of one anchor against its candidates. Anchor
/// and rows are smoothed with the critic's coefficient first.
pub fn loss_pc(batch: &ProbBatch, critic: &CriticConfig) -> Result<f64> {
    critic.validate()?;
    let anchor = critics::smooth(&batch.anchor, critic.smoothing)?;
    let mut scores = Vec::with_capacity(batch.rows.len());
    let mut row = Vec::with_capacity(anchor.len());
    for r in &batch.rows {
        row.clear();
        row.extend_from_slice(r);
        critics::smooth_in_place(&mut row, critic.smoothing);
        scores.push(score_prob(critic.kind, &anchor, &row)?);
    }
    contrast_from_scores(&scores, batch.positive_index)
}

/// Entropy (natural log) of the mean of `probs`.
pub fn marginal_entropy(probs: &[ProbVector]) -> Result<f64> {
    let first = probs.first().ok_or_else(|| invalid("marginal entropy of an empty list"))?;
    let c = first.len();
    let mut rows = Array2::<f64>::zeros((probs.len(), c));
    for (i, p) in probs.iter().enumerate() {
        if p.len() != c {
            return Err(CrlcError::DimensionMismatch { expected: c, actual: p.len(), context: "marginal entropy" });
        }
        rows.row_mut(i).assign(&ndarray::ArrayView1::from(&p[..]));
    }
    Ok(entropy_of_mean(rows.view()).0)
}

/// `H(mean of rows)` and `dH / d rows` (every row receives the same gradient).
pub(crate) fn entropy_of_mean(rows: ArrayView2<'_, f64>) -> (f64, Vec<f64>) {
    let n = rows.nrows() as f64;
    let mean = rows.mean_axis(Axis(0)).expect("nonempty rows");
    let mut h = 0.0;
    let mut grad = vec![0.0; mean.len()];
    for (c, &m) in mean.iter().enumerate() {
        if m > 0.0 {
            h -= m * m.ln();
            grad[c] = -(m.ln() + 1.0) / n;
        }
    }
    (h, grad)
}

/// Mean probability contrastive loss over `batches` minus the weighted entropy
/// of the mean anchor.
pub fn loss_cluster(batches: &[ProbBatch], weights: &LossWeights, critic: &CriticConfig) -> Result<f64> {
    if batches.is_empty() {
        return Err(invalid("cluster loss over an empty batch"));
    }
    weights.validate()?;
    let mut pc = 0.0;
    for b in batches {
        pc += loss_pc(b, critic)?;
    }
    pc /= batches.len() as f64;
    let anchors: Vec<ProbVector> = batches.iter().map(|b| b.anchor.clone()).collect();
    Ok(pc - weights.entropy * marginal_entropy(&anchors)?)
}

/// Combines precomputed parts into the joint clustering objective.
pub fn loss_crlc(prob_part: f64, fc_part: f64, entropy_part: f64, weights: &LossWeights) -> f64 {
    prob_part - weights.entropy * entropy_part + weights.feature * fc_part
}

/// Adds the weighted mean negative log-likelihood of labeled samples.
pub fn loss_crlc_semi(crlc: f64, labeled_logprobs: &[f64], weights: &LossWeights) -> Result<f64> {
    if weights.crossentropy == 0.0 {
        return Ok(crlc);
    }
    if labeled_logprobs.is_empty() {
        return Err(invalid("semi-supervised loss needs at least one labeled sample"));
    }
    let nll = -labeled_logprobs.iter().sum::<f64>() / labeled_logprobs.len() as f64;
    Ok(crlc + weights.crossentropy * nll)
}

/// Closed-form gradient of the log-of-dot-product probability contrastive loss
/// with respect to the anchor logits.
///
/// Without smoothing this is
/// `sum_i q_c q_ic / sum_i sum_k q_k q_ik - q_c q_pc / sum_k q_k q_pk`.
/// With smoothing `gamma` the same ratios are taken over smoothed vectors and
/// projected through the softmax Jacobian of the raw anchor probabilities.
pub fn grad_pc_logits(
    anchor_logits: &LogitVector,
    candidates: &[ProbVector],
    positive_index: usize,
    smoothing: f64,
) -> Result<Vec<f64>> {
    let q = anchor_logits.softmax();
    let c = q.len();
    if positive_index >= candidates.len() {
        return Err(CrlcError::IndexOutOfRange { index: positive_index, len: candidates.len() });
    }
    let qs = critics::smooth(&q, smoothing)?;
    let rows: Vec<Vec<f64>> = candidates
        .iter()
        .map(|r| {
            if r.len() != c {
                return Err(CrlcError::DimensionMismatch { expected: c, actual: r.len(), context: "candidate" });
            }
            critics::smooth(r, smoothing)
        })
        .collect::<Result<_>>()?;

    let total: f64 = rows.iter().map(|r| critics::dot(&qs, r)).sum();
    let pos = &rows[positive_index];
    let pos_dot = critics::dot(&qs, pos);
    if !(total > 0.0 && pos_dot > 0.0) {
        return Err(CrlcError::Domain(
            "zero dot product in probability contrastive gradient; smooth the inputs".into(),
        ));
    }
    // a_c = d L / d qs_c
    let a: Vec<f64> = (0..c)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / total - pos[k] / pos_dot)
        .collect();
    let qa = critics::dot(&q, &a);
    Ok((0..c).map(|k| (1.0 - smoothing) * q[k] * (a[k] - qa)).collect())
}

/// InfoNCE lower-bound estimate `log M - loss`, which never exceeds `log M`.
pub fn info_nce_estimate(contrast_loss: f64, m: usize) -> Result<f64> {
    if m < 1 {
        return Err(invalid("InfoNCE needs at least one candidate"));
    }
    if !(contrast_loss >= 0.0) {
        return Err(invalid(format!("contrastive loss must be >= 0, got {contrast_loss}")));
    }
    Ok((m as f64).ln() - contrast_loss)
}

/// Compares [`grad_pc_logits`] with central differences of [`loss_pc`] on
/// `trials` seeded random instances (2 to 10 classes, 2 to 16 candidates,
/// smoothing alternating between 0 and 0.01). Returns the largest relative
/// error, measured as `|g - fd| / max(|fd|, 1e-8)` in the Euclidean norm.
pub fn check_pc_gradient(trials: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Exp1};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let c = rng.gen_range(2..=10);
        let m = rng.gen_range(2..=16);
        let gamma = if trial % 2 == 0 { 0.0 } else { 0.01 };
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let rows: Vec<ProbVector> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| { let e: f64 = Exp1.sample(&mut rng); e + 1e-3 }).collect();
                let sum: f64 = raw.iter().sum();
                ProbVector::new(raw.into_iter().map(|v| v / sum).collect())
            })
            .collect::<Result<_>>()?;
        let pos = rng.gen_range(0..m);
        let critic = CriticConfig::new(CriticKind::LogDot, 0.1, gamma)?;
        let g = grad_pc_logits(&LogitVector::new(logits.clone()), &rows, pos, gamma)?;
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        for k in 0..c {
            let eval = |delta: f64| -> Result<f64> {
                let mut u = logits.clone();
                u[k] += delta;
                loss_pc(&ProbBatch::new(ProbVector::new(softmax(&u))?, rows.clone(), pos)?, &critic)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            err2 += (g[k] - fd).powi(2);
            norm2 += fd * fd;
        }
        worst = worst.max(err2.sqrt() / norm2.sqrt().max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn log_dot(gamma: f64) -> CriticConfig {
        CriticConfig::new(CriticKind::LogDot, 0.1, gamma).unwrap()
    }

    #[test]
    fn contrast_examples() {
        assert_eq!(contrast_from_scores(&[3.7], 0).unwrap(), 0.0);
        let v = contrast_from_scores(&[0.4; 4], 2).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = contrast_from_scores(&[5.0, 0.0, 0.0], 0).unwrap();
        assert!((v - 0.013_385_901_721_448_902).abs() < 1e-12);
        assert!(contrast_from_scores(&[1.0], 1).is_err());
        // large scores stay finite
        assert!(contrast_from_scores(&[1e3, -1e3, 999.0], 1).unwrap().is_finite());
    }

    #[test]
    fn fc_examples() {
        let a = FeatureBatch::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let v = loss_fc(&a, &a, &[0, 1], 0.1).unwrap();
        assert!((v - 4.539_889_921_686_465e-5).abs() < 1e-15);
        let one = FeatureBatch::new(array![[0.6, 0.8]]).unwrap();
        assert_eq!(loss_fc(&one, &one, &[0], 0.1).unwrap(), 0.0);
        let same = FeatureBatch::new(array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]).unwrap();
        let v = loss_fc(&same, &same, &[0, 1, 2], 0.1).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        assert!(loss_fc(&same, &same, &[0, 1], 0.1).is_err());
        assert!(FeatureBatch::new(array![[1.0, 1.0]]).is_err());
    }

    #[test]
    fn pc_examples() {
        let q = pv(&[0.2, 0.3, 0.5]);
        let b = ProbBatch::new(q.clone(), vec![q.clone(); 5], 0).unwrap();
        for kind in CriticKind::PROBABILITY {
            let cfg = CriticConfig::new(kind, 0.1, 0.01).unwrap();
            assert!((loss_pc(&b, &cfg).unwrap() - 5f64.ln()).abs() < 1e-12);
        }
        let single = ProbBatch::new(q.clone(), vec![q], 0).unwrap();
        assert_eq!(loss_pc(&single, &log_dot(0.01)).unwrap(), 0.0);

        let b = ProbBatch::new(pv(&[0.9, 0.1]), vec![pv(&[0.9, 0.1]), pv(&[0.1, 0.9])], 0).unwrap();
        let v = loss_pc(&b, &log_dot(0.0)).unwrap();
        assert!((v - 0.198_450_938_723_838_25).abs() < 1e-12);

        let corner = ProbBatch::new(pv(&[1.0, 0.0]), vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0])], 0).unwrap();
        assert!(matches!(loss_pc(&corner, &log_dot(0.0)), Err(CrlcError::Domain(_))));
        assert!(loss_pc(&corner, &log_dot(0.01)).is_ok());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(marginal_entropy(&vec![pv(&[1.0, 0.0, 0.0]); 3]).unwrap(), 0.0);
        let two = marginal_entropy(&[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]).unwrap();
        assert!((two - LN2).abs() < 1e-15);
        let four = [pv(&[1.0, 0.0]), pv(&[1.0, 0.0]), pv(&[0.0, 1.0]), pv(&[0.0, 1.0])];
        assert!((marginal_entropy(&four).unwrap() - LN2).abs() < 1e-15);
        assert!(marginal_entropy(&[]).is_err());
    }

    #[test]
    fn cluster_examples() {
        let b = ProbBatch::new(pv(&[0.9, 0.1]), vec![pv(&[0.9, 0.1]), pv(&[0.1, 0.9])], 0).unwrap();
        let cfg = log_dot(0.0);
        let pc = loss_pc(&b, &cfg).unwrap();
        let zero = LossWeights::new(0.0, 10.0, 1.0).unwrap();
        assert_eq!(loss_cluster(std::slice::from_ref(&b), &zero, &cfg).unwrap(), pc);
        let v = loss_cluster(std::slice::from_ref(&b), &LossWeights::default(), &cfg).unwrap();
        assert!((v - -0.126_632_034_667_609_98).abs() < 1e-12);

        let u = pv(&[0.5, 0.5]);
        let ub = ProbBatch::new(u.clone(), vec![u.clone(), pv(&[0.2, 0.8])], 0).unwrap();
        let pc = loss_pc(&ub, &cfg).unwrap();
        let v = loss_cluster(&[ub.clone(), ub], &LossWeights::default(), &cfg).unwrap();
        assert!((v - (pc - LN2)).abs() < 1e-12);
    }

    #[test]
    fn crlc_examples() {
        let zero = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(loss_crlc(1.3, 0.4, 0.9, &zero), 1.3);
        assert_eq!(loss_crlc(1.0, 0.2, 0.5, &LossWeights::default()), 2.5);
        assert_eq!(loss_crlc_semi(1.0, &[], &zero).unwrap(), 1.0);
        assert_eq!(loss_crlc_semi(1.0, &[0.0, 0.0], &LossWeights::default()).unwrap(), 1.0);
        let v = loss_crlc_semi(1.0, &[0.5f64.ln()], &LossWeights::default()).unwrap();
        assert!((v - (1.0 + LN2)).abs() < 1e-15);
        assert!(loss_crlc_semi(1.0, &[], &LossWeights::default()).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn info_nce_examples() {
        assert!((info_nce_estimate(0.0, 8).unwrap() - 8f64.ln()).abs() < 1e-15);
        assert!(info_nce_estimate(8f64.ln(), 8).unwrap().abs() < 1e-15);
        let v = info_nce_estimate(0.198_450_938_723_838_25, 2).unwrap();
        assert!((v - 0.494_696_241_836_107_05).abs() < 1e-12);
        assert!(info_nce_estimate(0.1, 0).is_err());
    }

    #[test]
    fn grad_examples() {
        // one positive only: both terms cancel
        let logits = LogitVector::new(vec![-25.0, 25.0, -25.0]);
        let g = grad_pc_logits(&logits, &[pv(&[0.998, 0.001, 0.001])], 0, 0.0).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-12), "{g:?}");

        let uniform = LogitVector::new(vec![0.0; 4]);
        let g = grad_pc_logits(&uniform, &vec![ProbVector::uniform(4); 6], 0, 0.01).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-15), "{g:?}");
        assert!(LogitVector::new(vec![40.0, -30.0]).values() == [25.0, -25.0]);
    }

    fn random_simplex(rng: &mut ChaCha8Rng, c: usize) -> ProbVector {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap()
    }

    /// Central differences of `loss_pc` through the softmax.
    fn fd_grad(logits: &[f64], rows: &[ProbVector], pos: usize, cfg: &CriticConfig) -> Vec<f64> {
        let h = 1e-5;
        (0..logits.len())
            .map(|k| {
                let eval = |delta: f64| {
                    let mut u = logits.to_vec();
                    u[k] += delta;
                    let anchor = ProbVector::new(softmax(&u)).unwrap();
                    loss_pc(&ProbBatch::new(anchor, rows.to_vec(), pos).unwrap(), cfg).unwrap()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn closed_form_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for trial in 0..60 {
            let c = rng.gen_range(2..=10);
            let m = rng.gen_range(2..=16);
            let gamma = if trial % 2 == 0 { 0.0 } else { 0.01 };
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let rows: Vec<ProbVector> = (0..m).map(|_| random_simplex(&mut rng, c)).collect();
            let pos = rng.gen_range(0..m);
            let cfg = log_dot(gamma);
            let g = grad_pc_logits(&LogitVector::new(logits.clone()), &rows, pos, gamma).unwrap();
            let fd = fd_grad(&logits, &rows, pos, &cfg);
            let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
            worst = worst.max(err);
            assert!(g.iter().sum::<f64>().abs() < 1e-9);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn anchor_grad_agrees_with_closed_form() {
        // the generic backward path, chained through smoothing and softmax,
        // must reproduce the closed-form logit gradient
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let c = rng.gen_range(2..=8);
            let m = rng.gen_range(2..=10);
            let gamma = 0.01;
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let rows: Vec<ProbVector> = (0..m).map(|_| random_simplex(&mut rng, c)).collect();
            let pos = rng.gen_range(0..m);
            let q = softmax(&logits);
            let qs = critics::smooth(&q, gamma).unwrap();
            let smoothed: Vec<Vec<f64>> = rows.iter().map(|r| critics::smooth(r, gamma).unwrap()).collect();
            let ag = pc_anchor_grad(CriticKind::LogDot, &qs, smoothed.iter().map(Vec::as_slice), pos).unwrap();
            let gq: Vec<f64> = ag.anchor.iter().map(|v| v * (1.0 - gamma)).collect();
            let qg = critics::dot(&q, &gq);
            let via_chain: Vec<f64> = (0..c).map(|k| q[k] * (gq[k] - qg)).collect();
            let closed = grad_pc_logits(&LogitVector::new(logits), &rows, pos, gamma).unwrap();
            for (a, b) in via_chain.iter().zip(&closed) {
                assert!((a - b).abs() < 1e-12, "{via_chain:?} vs {closed:?}");
            }
        }
    }

    #[test]
    fn candidate_grads_match_finite_differences_for_every_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in CriticKind::PROBABILITY {
            let c = 4;
            let m = 5;
            let anchor = random_simplex(&mut rng, c).into_inner();
            let cands: Vec<Vec<f64>> = (0..m).map(|_| random_simplex(&mut rng, c).into_inner()).collect();
            let ag = pc_anchor_grad(kind, &anchor, cands.iter().map(Vec::as_slice), 1).unwrap();
            let loss_at = |a: &[f64], cs: &[Vec<f64>]| {
                let scores: Vec<f64> = cs.iter().map(|r| score_prob(kind, a, r).unwrap()).collect();
                contrast_from_scores(&scores, 1).unwrap()
            };
            let h = 1e-6;
            for k in 0..c {
                let mut ap = anchor.clone();
                ap[k] += h;
                let mut am = anchor.clone();
                am[k] -= h;
                let fd = (loss_at(&ap, &cands) - loss_at(&am, &cands)) / (2.0 * h);
                assert!((fd - ag.anchor[k]).abs() < 1e-6, "{kind} anchor {k}");
                for j in 0..m {
                    let mut cp = cands.clone();
                    cp[j][k] += h;
                    let mut cm = cands.clone();
                    cm[j][k] -= h;
                    let fd = (loss_at(&anchor, &cp) - loss_at(&anchor, &cm)) / (2.0 * h);
                    assert!((fd - ag.candidates[j * c + k]).abs() < 1e-6, "{kind} cand {j},{k}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn contrast_is_nonnegative_and_shift_invariant(
            scores in prop::collection::vec(-20.0f64..20.0, 1..16),
            shift in -50.0f64..50.0,
            pos_seed in 0usize..1000,
        ) {
            let pos = pos_seed % scores.len();
            let base = contrast_from_scores(&scores, pos).unwrap();
            prop_assert!(base >= 0.0);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let moved = contrast_from_scores(&shifted, pos).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
            let est = info_nce_estimate(base, scores.len()).unwrap();
            prop_assert!(est <= (scores.len() as f64).ln());
        }

        #[test]
        fn cluster_loss_is_linear_in_entropy_weight(l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
            let b = ProbBatch::new(pv(&[0.7, 0.2, 0.1]), vec![pv(&[0.6, 0.3, 0.1]), pv(&[0.1, 0.1, 0.8])], 0).unwrap();
            let cfg = log_dot(0.01);
            let w = |l| LossWeights::new(l, 10.0, 1.0).unwrap();
            let a = loss_cluster(std::slice::from_ref(&b), &w(l1), &cfg).unwrap();
            let bb = loss_cluster(std::slice::from_ref(&b), &w(l2), &cfg).unwrap();
            let h = marginal_entropy(std::slice::from_ref(&b.anchor)).unwrap();
            prop_assert!(((a - bb) - (l2 - l1) * h).abs() < 1e-12);
            if l1 <= l2 { prop_assert!(a >= bb - 1e-12); }
        }
    }
}
