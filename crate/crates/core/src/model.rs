//! Two-headed network: an MLP backbone shared by a unit-normalizing
//! representation head and several softmax clustering subheads, with
//! hand-written backpropagation and an SGD optimizer.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critics::CriticConfig;
use crate::error::{invalid, io_err, CrlcError, Result};
use crate::losses::{loss_cluster, LossWeights, ProbBatch, LOGIT_CLAMP};

const MODEL_MAGIC: &[u8; 8] = b"CRLCMODL";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Input width; `0` means "take it from the dataset".
    pub input_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub rl_hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    /// Number of clusters; `0` means "take it from the dataset".
    pub classes: usize,
    pub subheads: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 0,
            backbone_hidden: vec![256, 256],
            rl_hidden: 256,
            feature_dim: 128,
            head_hidden: 256,
            classes: 0,
            subheads: 10,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("model input width must be > 0"));
        }
        if self.classes < 2 {
            return Err(invalid(format!("model needs at least 2 classes, got {}", self.classes)));
        }
        if self.backbone_hidden.is_empty() || self.backbone_hidden.contains(&0) {
            return Err(invalid("backbone needs at least one nonzero hidden layer"));
        }
        if self.rl_hidden == 0 || self.feature_dim == 0 || self.head_hidden == 0 {
            return Err(invalid("head widths must be > 0"));
        }
        if self.subheads == 0 {
            return Err(invalid("model needs at least one clustering subhead"));
        }
        Ok(())
    }

    fn hidden_out(&self) -> usize {
        *self.backbone_hidden.last().expect("validated")
    }
}

/// Affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
}

impl Linear {
    /// He-uniform weights, zero biases.
    fn he_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || rng.gen_range(-bound..bound));
        Self::from_parts(weight, Array1::zeros(outputs))
    }

    fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        let grad_weight = Array2::zeros(weight.raw_dim());
        let grad_bias = Array1::zeros(bias.raw_dim());
        Self { weight, bias, grad_weight, grad_bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Stack of affine layers with ReLU between them, and after the last one when
/// `relu_out` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    relu_out: bool,
}

impl Mlp {
    fn new(widths: &[usize], relu_out: bool, rng: &mut ChaCha8Rng) -> Self {
        let layers = widths.windows(2).map(|w| Linear::he_uniform(w[0], w[1], rng)).collect();
        Self { layers, relu_out }
    }

    fn relu_after(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.relu_out
    }

    /// Returns every activation, input first.
    fn forward(&self, x: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts[l].view());
            if self.relu_after(l) {
                y.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(y);
        }
        acts
    }

    /// Accumulates parameter gradients and returns the gradient on the input.
    fn backward(&mut self, acts: &[Array2<f64>], grad_out: Array2<f64>, accumulate: bool) -> Array2<f64> {
        let mut grad = grad_out;
        for l in (0..self.layers.len()).rev() {
            if self.relu_after(l) {
                Zip::from(&mut grad).and(&acts[l + 1]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let layer = &mut self.layers[l];
            if accumulate {
                general_mat_mul(1.0, &acts[l].t(), &grad, 1.0, &mut layer.grad_weight);
                layer.grad_bias += &grad.sum_axis(Axis(0));
            }
            grad = grad.dot(&layer.weight.t());
        }
        grad
    }
}

/// Activations kept by [`TwoHeadModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    backbone: Vec<Array2<f64>>,
    rl: Vec<Array2<f64>>,
    norms: Array1<f64>,
    subheads: Vec<Vec<Array2<f64>>>,
    /// `true` where a logit was clipped.
    clipped: Vec<Array2<bool>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Unit-norm features, one row per input.
    pub features: Array2<f64>,
    /// Clipped logits of each subhead.
    pub logits: Vec<Array2<f64>>,
    /// Softmax probabilities of each subhead.
    pub probs: Vec<Array2<f64>>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadModel {
    spec: ModelSpec,
    pub backbone: Mlp,
    pub rl_head: Mlp,
    pub subheads: Vec<Mlp>,
    backbone_frozen: bool,
}

impl TwoHeadModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.backbone_hidden);
        let backbone = Mlp::new(&widths, true, &mut rng);
        let h = spec.hidden_out();
        let rl_head = Mlp::new(&[h, spec.rl_hidden, spec.feature_dim], false, &mut rng);
        let subheads = (0..spec.subheads)
            .map(|_| Mlp::new(&[h, spec.head_hidden, spec.classes], false, &mut rng))
            .collect();
        Ok(Self { spec, backbone, rl_head, subheads, backbone_frozen: false })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// A frozen backbone neither accumulates gradients nor moves under
    /// [`sgd_step`].
    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.backbone_frozen = frozen;
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardOutput> {
        if x.ncols() != self.spec.input_dim {
            return Err(CrlcError::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: x.ncols(),
                context: "model input width",
            });
        }
        let backbone = self.backbone.forward(x.to_owned());
        let hidden = backbone.last().expect("nonempty").clone();

        let rl = self.rl_head.forward(hidden.clone());
        let pre = rl.last().expect("nonempty");
        let norms = pre.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some((i, n)) = norms.iter().enumerate().find(|(_, n)| !(**n > 0.0 && n.is_finite())) {
            return Err(CrlcError::Domain(format!(
                "representation row {i} has norm {n} before normalization"
            )));
        }
        let features = pre / &norms.view().insert_axis(Axis(1));

        let mut subheads = Vec::with_capacity(self.subheads.len());
        let mut logits = Vec::with_capacity(self.subheads.len());
        let mut probs = Vec::with_capacity(self.subheads.len());
        let mut clipped = Vec::with_capacity(self.subheads.len());
        for head in &self.subheads {
            let acts = head.forward(hidden.clone());
            let raw = acts.last().expect("nonempty");
            clipped.push(raw.mapv(|u| !(-LOGIT_CLAMP..=LOGIT_CLAMP).contains(&u)));
            let u = raw.mapv(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            probs.push(softmax_rows(u.view()));
            logits.push(u);
            subheads.push(acts);
        }
        Ok(ForwardOutput {
            features,
            logits,
            probs,
            cache: ForwardCache { backbone, rl, norms, subheads, clipped },
        })
    }

    /// Accumulates parameter gradients given upstream gradients on the unit-norm
    /// features and on each subhead's clipped logits.
    pub fn backward(
        &mut self,
        out: &ForwardOutput,
        grad_features: ArrayView2<'_, f64>,
        grad_logits: &[Array2<f64>],
    ) -> Result<()> {
        let cache = &out.cache;
        if cache.backbone.is_empty() {
            return Err(CrlcError::MissingCache);
        }
        if grad_logits.len() != self.subheads.len() {
            return Err(CrlcError::DimensionMismatch {
                expected: self.subheads.len(),
                actual: grad_logits.len(),
                context: "subhead gradients",
            });
        }
        if grad_features.raw_dim() != out.features.raw_dim() {
            return Err(invalid("feature gradient shape does not match forward output"));
        }
        // through z = h / |h|: dh = (dz - z (z . dz)) / |h|
        let z = &out.features;
        let proj = (z * &grad_features).sum_axis(Axis(1));
        let mut grad_pre = &grad_features - &(z * &proj.view().insert_axis(Axis(1)));
        grad_pre /= &cache.norms.view().insert_axis(Axis(1));

        let mut grad_hidden = self.rl_head.backward(&cache.rl, grad_pre, true);
        for ((head, acts), (g, clip)) in self
            .subheads
            .iter_mut()
            .zip(&cache.subheads)
            .zip(grad_logits.iter().zip(&cache.clipped))
        {
            let mut g = g.clone();
            Zip::from(&mut g).and(clip).for_each(|v, &c| {
                if c {
                    *v = 0.0;
                }
            });
            grad_hidden += &head.backward(acts, g, true);
        }
        if !self.backbone_frozen {
            self.backbone.backward(&cache.backbone, grad_hidden, true);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().for_each(Linear::zero_grad);
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone
            .layers
            .iter()
            .chain(&self.rl_head.layers)
            .chain(self.subheads.iter().flat_map(|h| &h.layers))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.backbone
            .layers
            .iter_mut()
            .chain(&mut self.rl_head.layers)
            .chain(self.subheads.iter_mut().flat_map(|h| &mut h.layers))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Linear::param_len).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (l, layer) in self.layers().enumerate() {
            if index < layer.param_len() {
                return (l, index);
            }
            index -= layer.param_len();
        }
        panic!("parameter index out of range");
    }

    /// Parameters are numbered layer by layer (backbone, representation head,
    /// subheads), each layer's weights row-major followed by its bias.
    pub fn param(&self, index: usize) -> f64 {
        let (l, i) = self.locate(index);
        let layer = self.layers().nth(l).expect("located");
        if i < layer.weight.len() {
            layer.weight.as_slice().expect("standard layout")[i]
        } else {
            layer.bias[i - layer.weight.len()]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, i) = self.locate(index);
        let layer = self.layers_mut().nth(l).expect("located");
        if i < layer.weight.len() {
            layer.weight.as_slice_mut().expect("standard layout")[i] = value;
        } else {
            layer.bias[i - layer.weight.len()] = value;
        }
    }

    pub fn grad(&self, index: usize) -> f64 {
        let (l, i) = self.locate(index);
        let layer = self.layers().nth(l).expect("located");
        if i < layer.weight.len() {
            layer.grad_weight.as_slice().expect("standard layout")[i]
        } else {
            layer.grad_bias[i - layer.weight.len()]
        }
    }

    /// SHA-256 over the backbone parameters, hex encoded.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.backbone.layers {
            layer.weight.iter().chain(&layer.bias).for_each(|v| h.update(v.to_le_bytes()));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Versioned binary checkpoint, little endian:
    /// magic, version u32, then u32 fields `input_dim, classes, subheads,
    /// feature_dim, rl_hidden, head_hidden, backbone depth`, the backbone
    /// widths as u32, then every parameter as f64 in [`TwoHeadModel::param`]
    /// order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let s = &self.spec;
        w.write_all(MODEL_MAGIC)?;
        let header = [
            MODEL_VERSION,
            s.input_dim as u32,
            s.classes as u32,
            s.subheads as u32,
            s.feature_dim as u32,
            s.rl_hidden as u32,
            s.head_hidden as u32,
            s.backbone_hidden.len() as u32,
        ];
        for v in header.iter().chain(s.backbone_hidden.iter().map(|&h| h as u32).collect::<Vec<_>>().iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for layer in self.layers() {
            for v in layer.weight.iter().chain(&layer.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let schema = |e: std::io::Error| CrlcError::Schema(format!("truncated model checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(schema)?;
        if &magic != MODEL_MAGIC {
            return Err(CrlcError::Schema("not a model checkpoint".into()));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(schema)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION as usize {
            return Err(CrlcError::Schema(format!("unsupported model checkpoint version {version}")));
        }
        let mut fields = [0usize; 7];
        for f in fields.iter_mut() {
            *f = read_u32(&mut r)?;
        }
        let [input_dim, classes, subheads, feature_dim, rl_hidden, head_hidden, depth] = fields;
        if depth > 64 {
            return Err(CrlcError::Schema(format!("implausible backbone depth {depth}")));
        }
        let backbone_hidden = (0..depth).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec { input_dim, backbone_hidden, rl_hidden, feature_dim, head_hidden, classes, subheads };
        spec.validate().map_err(|e| CrlcError::Schema(e.to_string()))?;
        let mut model = Self::new(spec, 0)?;
        let mut b = [0u8; 8];
        for layer in model.layers_mut() {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                r.read_exact(&mut b).map_err(schema)?;
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub(crate) fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|u| (u - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Pulls a gradient on softmax probabilities back to the logits:
/// `du_c = q_c (dq_c - q . dq)`.
pub fn softmax_backward(probs: ArrayView2<'_, f64>, grad_probs: ArrayView2<'_, f64>) -> Array2<f64> {
    let inner = (&probs * &grad_probs).sum_axis(Axis(1));
    let centered = &grad_probs - &inner.view().insert_axis(Axis(1));
    &probs * &centered
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub schedule: LrSchedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.1,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: false,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return Err(invalid(format!(
                "learning rates need 0 <= lr_min <= lr_init, lr_init > 0 (got {} and {})",
                self.lr_min, self.lr_init
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` at `t = 0` to `lr_min` at `t = horizon`.
pub fn cosine_lr(t: usize, horizon: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if t > horizon {
        return Err(invalid(format!("epoch {t} is past the schedule horizon {horizon}")));
    }
    if horizon == 0 {
        return Ok(lr_init);
    }
    let phase = std::f64::consts::PI * t as f64 / horizon as f64;
    Ok(lr_min + (lr_init - lr_min) * (1.0 + phase.cos()) / 2.0)
}

/// Optimizer state: hyperparameters, velocity per layer, and the epoch clock.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<(Array2<f64>, Array1<f64>)>,
    pub epoch: usize,
    pub horizon: usize,
}

impl SgdState {
    pub fn new(config: SgdConfig, model: &TwoHeadModel, horizon: usize) -> Result<Self> {
        config.validate()?;
        let velocity = model
            .layers()
            .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.raw_dim())))
            .collect();
        Ok(Self { config, velocity, epoch: 0, horizon })
    }

    pub fn lr_at(&self, t: usize) -> Result<f64> {
        match self.config.schedule {
            LrSchedule::Cosine => cosine_lr(t, self.horizon, self.config.lr_init, self.config.lr_min),
            LrSchedule::Constant => Ok(self.config.lr_init),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.epoch.min(self.horizon)).expect("clamped epoch")
    }
}

/// `v <- momentum v + (g + wd p)`, `p <- p - lr v`, then clears gradients.
pub fn sgd_step(model: &mut TwoHeadModel, state: &mut SgdState) {
    let lr = state.lr();
    let SgdConfig { momentum, weight_decay, nesterov, .. } = state.config;
    let skip = if model.backbone_frozen { model.backbone.layers.len() } else { 0 };
    for (i, (layer, (vw, vb))) in model.layers_mut().zip(state.velocity.iter_mut()).enumerate() {
        if i < skip {
            layer.zero_grad();
            continue;
        }
        update(&mut layer.weight, &layer.grad_weight, vw, lr, momentum, weight_decay, nesterov);
        update(&mut layer.bias, &layer.grad_bias, vb, lr, momentum, weight_decay, nesterov);
        layer.zero_grad();
    }
}

fn update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    velocity: &mut ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    nesterov: bool,
) {
    Zip::from(param).and(grad).and(velocity).for_each(|p, &g, v| {
        let d = g + weight_decay * *p;
        *v = momentum * *v + d;
        *p -= lr * if nesterov { d + momentum * *v } else { *v };
    });
}

/// Mean cluster loss over subheads; `heads[s]` holds subhead `s`'s batches.
pub fn multihead_cluster_loss(
    heads: &[Vec<ProbBatch>],
    weights: &LossWeights,
    critic: &CriticConfig,
) -> Result<f64> {
    if heads.is_empty() {
        return Err(invalid("need at least one subhead"));
    }
    let mut total = 0.0;
    for batches in heads {
        total += loss_cluster(batches, weights, critic)?;
    }
    Ok(total / heads.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::{CriticKind, ProbVector};
    use ndarray::Array;
    use rand_distr::StandardNormal;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 5,
            backbone_hidden: vec![7, 6],
            rl_hidden: 6,
            feature_dim: 4,
            head_hidden: 5,
            classes: 3,
            subheads: 2,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
    }

    #[test]
    fn forward_shapes_and_invariants() {
        let model = TwoHeadModel::new(small_spec(), 3).unwrap();
        let x = random_input(8, 5, 1);
        let out = model.forward(x.view()).unwrap();
        assert_eq!(out.features.dim(), (8, 4));
        for row in out.features.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-7);
        }
        assert_eq!(out.probs.len(), 2);
        for p in &out.probs {
            assert!(p.outer_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
        }
        let again = model.forward(x.view()).unwrap();
        assert_eq!(out.features, again.features);
        assert_eq!(out.probs, again.probs);
        assert!(model.forward(random_input(2, 4, 1).view()).is_err());
    }

    #[test]
    fn zero_weights_cannot_normalize() {
        let mut model = TwoHeadModel::new(small_spec(), 3).unwrap();
        for i in 0..model.param_count() {
            model.set_param(i, 0.0);
        }
        let err = model.forward(random_input(2, 5, 1).view()).unwrap_err();
        assert!(matches!(err, CrlcError::Domain(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut model = TwoHeadModel::new(small_spec(), 3).unwrap();
        let out = model.forward(random_input(4, 5, 2).view()).unwrap();
        let gz = Array2::zeros(out.features.raw_dim());
        let gl: Vec<_> = out.logits.iter().map(|l| Array2::zeros(l.raw_dim())).collect();
        model.backward(&out, gz.view(), &gl).unwrap();
        assert!((0..model.param_count()).all(|i| model.grad(i) == 0.0));
    }

    /// `sum(A . z) + sum_s sum(B_s . q_s)` for fixed random weights A and B_s.
    fn probe_loss(model: &TwoHeadModel, x: &Array2<f64>, a: &Array2<f64>, b: &[Array2<f64>]) -> f64 {
        let out = model.forward(x.view()).unwrap();
        (&out.features * a).sum() + out.probs.iter().zip(b).map(|(p, w)| (p * w).sum()).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut model = TwoHeadModel::new(small_spec(), 11).unwrap();
        let x = random_input(6, 5, 4);
        let a = random_input(6, 4, 5);
        let b = vec![random_input(6, 3, 6), random_input(6, 3, 7)];
        let out = model.forward(x.view()).unwrap();
        let gl: Vec<_> = out.probs.iter().zip(&b).map(|(p, w)| softmax_backward(p.view(), w.view())).collect();
        model.backward(&out, a.view(), &gl).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..40 {
            let i = rng.gen_range(0..model.param_count());
            let orig = model.param(i);
            model.set_param(i, orig + h);
            let up = probe_loss(&model, &x, &a, &b);
            model.set_param(i, orig - h);
            let down = probe_loss(&model, &x, &a, &b);
            model.set_param(i, orig);
            let fd = (up - down) / (2.0 * h);
            let an = model.grad(i);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err <= 1e-4, "param {i}: analytic {an}, numeric {fd}");
        }
    }

    #[test]
    fn normalization_gradient_is_orthogonal_to_features() {
        // d L / d h must satisfy h . dL/dh = 0 since z is scale invariant
        let model = TwoHeadModel::new(small_spec(), 2).unwrap();
        let out = model.forward(random_input(5, 5, 8).view()).unwrap();
        let gz = random_input(5, 4, 9);
        let z = &out.features;
        let proj = (z * &gz).sum_axis(Axis(1));
        let gh = (&gz - &(z * &proj.view().insert_axis(Axis(1)))) / out.cache.norms.view().insert_axis(Axis(1));
        for (zr, gr) in z.outer_iter().zip(gh.outer_iter()) {
            assert!(zr.dot(&gr).abs() < 1e-12);
        }
    }

    #[test]
    fn clipped_logits_block_gradient() {
        let mut spec = small_spec();
        spec.subheads = 1;
        let mut model = TwoHeadModel::new(spec, 1).unwrap();
        let last = model.subheads[0].layers.last_mut().unwrap();
        last.bias.fill(0.0);
        last.bias[0] = 100.0;
        last.weight.fill(0.0);
        let out = model.forward(random_input(3, 5, 1).view()).unwrap();
        assert!(out.logits[0].column(0).iter().all(|&u| u == LOGIT_CLAMP));
        let max_p = out.probs[0].iter().cloned().fold(0.0, f64::max);
        assert!(max_p <= 1.0 / (1.0 + 2.0 * (-50f64).exp()) + 1e-16);
        let gz = Array2::zeros(out.features.raw_dim());
        let mut g = Array2::zeros((3, 3));
        g.column_mut(0).fill(1.0);
        model.backward(&out, gz.view(), &[g]).unwrap();
        let last = model.subheads[0].layers.last().unwrap();
        assert_eq!(last.grad_bias[0], 0.0);
    }

    #[test]
    fn cosine_schedule() {
        assert!((cosine_lr(0, 100, 0.1, 0.001).unwrap() - 0.1).abs() < 1e-15);
        assert!((cosine_lr(100, 100, 0.1, 0.001).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1, 0.001).unwrap() - 0.0505).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1, 0.001).is_err());
        let lrs: Vec<f64> = (0..=37).map(|t| cosine_lr(t, 37, 0.1, 0.001).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| (0.001..=0.1).contains(&l)));
    }

    fn one_layer_state(model: &mut TwoHeadModel, cfg: SgdConfig) -> SgdState {
        model.zero_grad();
        SgdState::new(SgdConfig { schedule: LrSchedule::Constant, ..cfg }, model, 10).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let mut model = TwoHeadModel::new(small_spec(), 1).unwrap();
        let cfg = SgdConfig { lr_init: 1.0, momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        let mut st = one_layer_state(&mut model, cfg);
        let before = model.param(0);
        model.layers_mut().next().unwrap().grad_weight[[0, 0]] = 0.25;
        sgd_step(&mut model, &mut st);
        assert!((model.param(0) - (before - 0.25)).abs() < 1e-15);
        assert_eq!(model.grad(0), 0.0);

        // momentum unrolled twice with a constant gradient: eta (g + 1.9 g)
        let mut model = TwoHeadModel::new(small_spec(), 1).unwrap();
        let cfg = SgdConfig { lr_init: 0.1, momentum: 0.9, weight_decay: 0.0, ..Default::default() };
        let mut st = one_layer_state(&mut model, cfg);
        let before = model.param(0);
        for _ in 0..2 {
            model.layers_mut().next().unwrap().grad_weight[[0, 0]] = 0.5;
            sgd_step(&mut model, &mut st);
        }
        assert!((before - model.param(0) - 0.1 * (0.5 + 1.9 * 0.5)).abs() < 1e-15);
        // zero gradient afterwards: only the residual velocity moves the weight
        let mid = model.param(0);
        sgd_step(&mut model, &mut st);
        assert!((mid - model.param(0) - 0.1 * 0.9 * 0.95).abs() < 1e-15);
        assert_eq!(model.param(1), TwoHeadModel::new(small_spec(), 1).unwrap().param(1));
    }

    #[test]
    fn frozen_backbone_does_not_move() {
        let mut model = TwoHeadModel::new(small_spec(), 1).unwrap();
        model.set_backbone_frozen(true);
        let sum = model.backbone_checksum();
        let mut st = SgdState::new(SgdConfig::default(), &model, 5).unwrap();
        let x = random_input(4, 5, 3);
        let out = model.forward(x.view()).unwrap();
        let gz = random_input(4, 4, 2);
        let gl: Vec<_> = out.logits.iter().map(|l| Array2::ones(l.raw_dim())).collect();
        model.backward(&out, gz.view(), &gl).unwrap();
        sgd_step(&mut model, &mut st);
        assert_eq!(sum, model.backbone_checksum());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = TwoHeadModel::new(small_spec(), 77).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = TwoHeadModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert!(TwoHeadModel::read_from(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(TwoHeadModel::read_from(bad.as_slice()), Err(CrlcError::Schema(_))));
    }

    #[test]
    fn multihead_loss_is_mean() {
        let cfg = CriticConfig::new(CriticKind::LogDot, 0.1, 0.01).unwrap();
        let w = LossWeights::default();
        let pv = |v: &[f64]| ProbVector::new(v.to_vec()).unwrap();
        let a = vec![ProbBatch::new(pv(&[0.8, 0.2]), vec![pv(&[0.7, 0.3]), pv(&[0.1, 0.9])], 0).unwrap()];
        let b = vec![ProbBatch::new(pv(&[0.4, 0.6]), vec![pv(&[0.5, 0.5]), pv(&[0.9, 0.1])], 0).unwrap()];
        let la = loss_cluster(&a, &w, &cfg).unwrap();
        let lb = loss_cluster(&b, &w, &cfg).unwrap();
        assert_eq!(multihead_cluster_loss(std::slice::from_ref(&a), &w, &cfg).unwrap(), la);
        assert_eq!(multihead_cluster_loss(&[a.clone(), a.clone()], &w, &cfg).unwrap(), la);
        let m = multihead_cluster_loss(&[a, b], &w, &cfg).unwrap();
        assert!((m - (la + lb) / 2.0).abs() < 1e-15);
    }
}
