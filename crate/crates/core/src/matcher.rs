//! Trained pairwise matcher: convolution over visit windows, max
//! pooling into a deep vector per patient, a learned symmetric bilinear
//! score, and a joined hidden/softmax head, optimized with AdaGrad.
//!
//! All gradients are derived by hand and checked against central finite
//! differences in the tests and the acceptance suite.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::represent::PatientMatrix;
use crate::similarity::{Measure, SimilarityMatrix};
use crate::Real;

const ADAGRAD_EPS: f64 = 1e-8;
const CHECKPOINT_MAGIC: &str = "patsim-matcher";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax over {dissimilar, similar} with negative log likelihood.
    CrossEntropy,
    /// Scalar sigmoid head with squared error against a real label.
    Square,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::CrossEntropy => f.write_str("cross_entropy"),
            LossKind::Square => f.write_str("square"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "square" => Ok(LossKind::Square),
            _ => Err(Error::InvalidInput(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Convolution width in visits.
    pub filter_width: usize,
    /// Number of feature maps.
    pub n_filters: usize,
    pub hidden_size: usize,
    /// Dropout probability on the hidden layer during training.
    pub dropout: f64,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub pairs_per_epoch: usize,
    /// Fraction of sampled pairs that are same-cohort.
    pub positive_ratio: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            filter_width: 5,
            n_filters: 100,
            hidden_size: 64,
            dropout: 0.5,
            learning_rate: 0.02,
            minibatch: 50,
            max_epochs: 30,
            patience: 3,
            pairs_per_epoch: 2000,
            positive_ratio: 0.5,
            loss: LossKind::CrossEntropy,
            seed: 1,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_width == 0 || self.n_filters == 0 || self.hidden_size == 0 {
            return Err(Error::Config("matcher dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.minibatch == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_ratio) {
            return Err(Error::Config("positive ratio must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One convolution filter: a d x h weight window and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter<F: Scalar = Real> {
    pub weights: Array2<F>,
    pub bias: F,
}

impl<F: Scalar> ConvFilter<F> {
    pub fn width(&self) -> usize {
        self.weights.ncols()
    }
}

/// Every trainable tensor, also reused for gradients and accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams<F: Scalar = Real> {
    pub filters: Vec<ConvFilter<F>>,
    /// Unconstrained m x m matrix A; the bilinear form uses (A + Aᵀ)/2.
    pub matching: Array2<F>,
    /// hidden_size x (2m + 1), applied to [deep_a, sim, deep_b].
    pub hidden_w: Array2<F>,
    pub hidden_b: Array1<F>,
    /// Output head: 2 x hidden for softmax, 1 x hidden for the sigmoid.
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

impl<F: Scalar> MatcherParams<F> {
    fn zeros_like(&self) -> Self {
        MatcherParams {
            filters: self
                .filters
                .iter()
                .map(|f| ConvFilter {
                    weights: Array2::zeros(f.weights.raw_dim()),
                    bias: F::zero(),
                })
                .collect(),
            matching: Array2::zeros(self.matching.raw_dim()),
            hidden_w: Array2::zeros(self.hidden_w.raw_dim()),
            hidden_b: Array1::zeros(self.hidden_b.raw_dim()),
            out_w: Array2::zeros(self.out_w.raw_dim()),
            out_b: Array1::zeros(self.out_b.raw_dim()),
        }
    }

    /// Visits (self, other, reference) triples over every scalar, in
    /// declaration order.
    fn visit3<G>(&mut self, other: &mut Self, reference: &Self, mut f: G)
    where
        G: FnMut(&mut F, &mut F, &F),
    {
        for ((pf, of), rf) in self
            .filters
            .iter_mut()
            .zip(other.filters.iter_mut())
            .zip(&reference.filters)
        {
            for ((x, y), z) in pf
                .weights
                .iter_mut()
                .zip(of.weights.iter_mut())
                .zip(rf.weights.iter())
            {
                f(x, y, z);
            }
            f(&mut pf.bias, &mut of.bias, &rf.bias);
        }
        for ((x, y), z) in self
            .matching
            .iter_mut()
            .zip(other.matching.iter_mut())
            .zip(reference.matching.iter())
        {
            f(x, y, z);
        }
        for ((x, y), z) in self
            .hidden_w
            .iter_mut()
            .zip(other.hidden_w.iter_mut())
            .zip(reference.hidden_w.iter())
        {
            f(x, y, z);
        }
        for ((x, y), z) in self
            .hidden_b
            .iter_mut()
            .zip(other.hidden_b.iter_mut())
            .zip(reference.hidden_b.iter())
        {
            f(x, y, z);
        }
        for ((x, y), z) in self
            .out_w
            .iter_mut()
            .zip(other.out_w.iter_mut())
            .zip(reference.out_w.iter())
        {
            f(x, y, z);
        }
        for ((x, y), z) in self
            .out_b
            .iter_mut()
            .zip(other.out_b.iter_mut())
            .zip(reference.out_b.iter())
        {
            f(x, y, z);
        }
    }

    /// Accumulates `scale * other` into self.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        let mut scratch = other.clone();
        self.visit3(&mut scratch, other, |p, _, g| *p += scale * *g);
    }

    /// All scalars in declaration order.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for f in &self.filters {
            out.extend(f.weights.iter().copied());
            out.push(f.bias);
        }
        out.extend(self.matching.iter().copied());
        out.extend(self.hidden_w.iter().copied());
        out.extend(self.hidden_b.iter().copied());
        out.extend(self.out_w.iter().copied());
        out.extend(self.out_b.iter().copied());
        out
    }

    /// Inverse of [`flatten`]; the value count must match exactly.
    pub fn assign_flat(&mut self, values: &[F]) -> Result<()> {
        let mut iter = values.iter().copied();
        {
            let mut next = || {
                iter.next()
                    .ok_or_else(|| Error::Format("too few parameter values".into()))
            };
            for f in &mut self.filters {
                for w in f.weights.iter_mut() {
                    *w = next()?;
                }
                f.bias = next()?;
            }
            for x in self.matching.iter_mut() {
                *x = next()?;
            }
            for x in self.hidden_w.iter_mut() {
                *x = next()?;
            }
            for x in self.hidden_b.iter_mut() {
                *x = next()?;
            }
            for x in self.out_w.iter_mut() {
                *x = next()?;
            }
            for x in self.out_b.iter_mut() {
                *x = next()?;
            }
        }
        if iter.next().is_some() {
            return Err(Error::Format("too many parameter values".into()));
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.filters
            .iter()
            .all(|f| f.weights.iter().all(|x| x.is_finite()) && f.bias.is_finite())
            && self.matching.iter().all(|x| x.is_finite())
            && self.hidden_w.iter().all(|x| x.is_finite())
            && self.hidden_b.iter().all(|x| x.is_finite())
            && self.out_w.iter().all(|x| x.is_finite())
            && self.out_b.iter().all(|x| x.is_finite())
    }
}

/// Matcher parameters plus AdaGrad state and inference settings.
#[derive(Debug, Clone)]
pub struct MatcherModel<F: Scalar = Real> {
    pub params: MatcherParams<F>,
    /// AdaGrad squared-gradient accumulators, same shapes as `params`.
    pub accumulators: MatcherParams<F>,
    pub loss: LossKind,
    pub dropout: f64,
    pub seed: u64,
}

impl<F: Scalar> MatcherModel<F> {
    /// Fresh model for embedding dimension `d`: Glorot-uniform filters
    /// and dense layers, bilinear matrix at 0.1 * identity so the
    /// initial score is a scaled dot product, zero biases.
    pub fn new(d: usize, config: &MatcherConfig) -> Result<Self> {
        config.validate()?;
        if d == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, m, hidden) = (config.filter_width, config.n_filters, config.hidden_size);
        let out = match config.loss {
            LossKind::CrossEntropy => 2,
            LossKind::Square => 1,
        };

        let mut glorot = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| F::of(rng.gen_range(-bound..bound)))
        };

        let filters = (0..m)
            .map(|_| ConvFilter {
                weights: glorot(d, h, d * h, 1),
                bias: F::zero(),
            })
            .collect();
        // scaled identity: the initial score is a scaled dot product,
        // with the scale shrunk by m so the sim entry of the join stays
        // comparable to a single pooled feature at any filter count
        let scale = F::of(0.1 / m as f64);
        let matching = Array2::from_shape_fn((m, m), |(i, j)| {
            if i == j {
                scale
            } else {
                F::zero()
            }
        });
        let hidden_w = glorot(hidden, 2 * m + 1, 2 * m + 1, hidden);
        let out_w = glorot(out, hidden, hidden, out);

        let params = MatcherParams {
            filters,
            matching,
            hidden_w,
            hidden_b: Array1::zeros(hidden),
            out_w,
            out_b: Array1::zeros(out),
        };
        let accumulators = params.zeros_like();
        Ok(MatcherModel {
            params,
            accumulators,
            loss: config.loss,
            dropout: config.dropout,
            seed: config.seed,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.filters[0].weights.nrows()
    }

    pub fn filter_width(&self) -> usize {
        self.params.filters[0].width()
    }

    pub fn n_filters(&self) -> usize {
        self.params.filters.len()
    }

    /// The symmetric bilinear matrix (A + Aᵀ)/2 actually used by the
    /// score.
    pub fn matching_symmetric(&self) -> Array2<F> {
        let a = &self.params.matching;
        let half = F::of(0.5);
        let mut sym = a.t().to_owned();
        sym += a;
        sym.mapv_inplace(|x| x * half);
        sym
    }
}

/// Pooled feature-map vector, the deep representation of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepPatientVector<F: Scalar = Real> {
    pub values: Array1<F>,
}

/// A scored training pair; the label is 1 for same-cohort, 0 otherwise
/// (any real value is allowed in square-loss mode).
#[derive(Debug, Clone, Copy)]
pub struct PairExample<'a, F: Scalar = Real> {
    pub a: &'a PatientMatrix<F>,
    pub b: &'a PatientMatrix<F>,
    pub label: F,
}

/// Zero-pads on the right so at least `width` visit columns exist.
fn padded_data<F: Scalar>(x: &PatientMatrix<F>, width: usize) -> Array2<F> {
    let n = x.data.ncols();
    if n >= width {
        return x.data.clone();
    }
    let mut padded = Array2::zeros((x.data.nrows(), width));
    padded.slice_mut(ndarray::s![.., ..n]).assign(&x.data);
    padded
}

/// ReLU feature map of one filter slid over the visit columns; inputs
/// shorter than the filter are zero-padded first.
pub fn conv_forward<F: Scalar>(x: &PatientMatrix<F>, filter: &ConvFilter<F>) -> Array1<F> {
    let padded = padded_data(x, filter.width());
    let (map, _, _) = conv_map(&padded, filter);
    map
}

fn conv_map<F: Scalar>(padded: &Array2<F>, filter: &ConvFilter<F>) -> (Array1<F>, usize, F) {
    let h = filter.width();
    let out_len = padded.ncols() - h + 1;
    let mut map = Array1::zeros(out_len);
    let mut argmax = 0usize;
    let mut best = F::neg_infinity();
    for i in 0..out_len {
        let mut pre = filter.bias;
        for k in 0..h {
            pre += filter.weights.column(k).dot(&padded.column(i + k));
        }
        let activated = pre.max(F::zero());
        map[i] = activated;
        if activated > best {
            best = activated;
            argmax = i;
        }
    }
    let mut pre_at_argmax = filter.bias;
    for k in 0..h {
        pre_at_argmax += filter.weights.column(k).dot(&padded.column(argmax + k));
    }
    (map, argmax, pre_at_argmax)
}

/// Largest entry of a feature map.
pub fn max_pool<F: Scalar>(map: &Array1<F>) -> Result<F> {
    if map.is_empty() {
        return Err(Error::InvalidInput("cannot pool an empty feature map".into()));
    }
    Ok(map.iter().copied().fold(F::neg_infinity(), F::max))
}

struct PatientForward<F: Scalar> {
    padded: Array2<F>,
    /// Per filter: window start of the pooled maximum and the
    /// pre-activation there (the ReLU gate for backprop).
    argmax: Vec<usize>,
    pre_activation: Vec<F>,
    deep: Array1<F>,
}

fn forward_patient<F: Scalar>(x: &PatientMatrix<F>, model: &MatcherModel<F>) -> PatientForward<F> {
    let padded = padded_data(x, model.filter_width());
    let m = model.n_filters();
    let mut argmax = Vec::with_capacity(m);
    let mut pre_activation = Vec::with_capacity(m);
    let mut deep = Array1::zeros(m);
    for (j, filter) in model.params.filters.iter().enumerate() {
        let (map, amax, pre) = conv_map(&padded, filter);
        deep[j] = map[amax];
        argmax.push(amax);
        pre_activation.push(pre);
    }
    PatientForward {
        padded,
        argmax,
        pre_activation,
        deep,
    }
}

/// Deep vector of pooled feature maps; inference path, no dropout.
pub fn embed_patient<F: Scalar>(
    x: &PatientMatrix<F>,
    model: &MatcherModel<F>,
) -> DeepPatientVector<F> {
    DeepPatientVector {
        values: forward_patient(x, model).deep,
    }
}

/// Learned similarity `aᵀ M b` with M symmetric by construction, hence
/// symmetric in its arguments.
pub fn bilinear_similarity<F: Scalar>(
    a: &DeepPatientVector<F>,
    b: &DeepPatientVector<F>,
    model: &MatcherModel<F>,
) -> F {
    model.matching_symmetric().dot(&b.values).dot(&a.values)
}

/// Whether dropout masks are sampled; training needs the caller's rng
/// so runs stay reproducible.
pub enum Phase<'r> {
    Infer,
    Train { rng: &'r mut ChaCha8Rng },
}

enum HeadOutput<F: Scalar> {
    Softmax { logits: Array1<F>, probs: Array1<F> },
    Sigmoid { y_hat: F },
}

pub struct ForwardCache<F: Scalar> {
    fa: PatientForward<F>,
    fb: PatientForward<F>,
    join: Array1<F>,
    hidden_pre: Array1<F>,
    hidden: Array1<F>,
    /// Inverted-dropout multiplier per hidden unit (training only).
    dropout_scale: Option<Array1<F>>,
    output: HeadOutput<F>,
}

fn head_from_deep<F: Scalar>(
    fa: PatientForward<F>,
    fb: PatientForward<F>,
    model: &MatcherModel<F>,
    phase: Phase<'_>,
) -> (Array1<F>, ForwardCache<F>) {
    let m = model.n_filters();
    let sim_matrix = model.matching_symmetric();
    let sim = sim_matrix.dot(&fb.deep).dot(&fa.deep);

    let mut join = Array1::zeros(2 * m + 1);
    join.slice_mut(ndarray::s![..m]).assign(&fa.deep);
    join[m] = sim;
    join.slice_mut(ndarray::s![m + 1..]).assign(&fb.deep);

    let hidden_pre = model.params.hidden_w.dot(&join) + &model.params.hidden_b;
    let mut hidden = hidden_pre.mapv(|x| x.max(F::zero()));
    let dropout_scale = match phase {
        Phase::Infer => None,
        Phase::Train { rng } => {
            let keep = 1.0 - model.dropout;
            let scale = Array1::from_shape_fn(hidden.len(), |_| {
                if rng.gen::<f64>() < keep {
                    F::of(1.0 / keep)
                } else {
                    F::zero()
                }
            });
            hidden = &hidden * &scale;
            Some(scale)
        }
    };

    let logits = model.params.out_w.dot(&hidden) + &model.params.out_b;
    let (probs, output) = match model.loss {
        LossKind::CrossEntropy => {
            let peak = logits.iter().copied().fold(F::neg_infinity(), F::max);
            let exps = logits.mapv(|z| (z - peak).exp());
            let total = exps.sum();
            let probs = exps.mapv(|e| e / total);
            (probs.clone(), HeadOutput::Softmax { logits, probs })
        }
        LossKind::Square => {
            let y_hat = F::one() / (F::one() + (-logits[0]).exp());
            (
                Array1::from_vec(vec![F::one() - y_hat, y_hat]),
                HeadOutput::Sigmoid { y_hat },
            )
        }
    };

    (
        probs,
        ForwardCache {
            fa,
            fb,
            join,
            hidden_pre,
            hidden,
            dropout_scale,
            output,
        },
    )
}

/// Full forward pass over a pair. Returns the probabilities over
/// {dissimilar, similar} plus the activations backprop needs.
pub fn forward_pair<'r, F: Scalar>(
    pair: &PairExample<'_, F>,
    model: &MatcherModel<F>,
    phase: Phase<'r>,
) -> (Array1<F>, ForwardCache<F>) {
    let fa = forward_patient(pair.a, model);
    let fb = forward_patient(pair.b, model);
    head_from_deep(fa, fb, model, phase)
}

fn loss_from_cache<F: Scalar>(cache: &ForwardCache<F>, label: F, kind: LossKind) -> F {
    match (&cache.output, kind) {
        (HeadOutput::Softmax { logits, .. }, LossKind::CrossEntropy) => {
            // log-sum-exp keeps the loss finite under saturated logits
            let class = if label > F::of(0.5) { 1 } else { 0 };
            let peak = logits.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = peak + logits.mapv(|z| (z - peak).exp()).sum().ln();
            lse - logits[class]
        }
        (HeadOutput::Sigmoid { y_hat }, LossKind::Square) => {
            let diff = label - *y_hat;
            diff * diff
        }
        _ => unreachable!("head output always matches the model's loss"),
    }
}

/// Inference-path loss of a pair under the model's configured loss.
pub fn pair_loss<F: Scalar>(pair: &PairExample<'_, F>, model: &MatcherModel<F>) -> F {
    let (_, cache) = forward_pair(pair, model, Phase::Infer);
    loss_from_cache(&cache, pair.label, model.loss)
}

/// Analytic gradients of the pair loss for every parameter tensor,
/// routed through the pooling argmax, the ReLU gates, the dropout mask
/// applied in the forward pass, and the symmetrized bilinear matrix.
pub fn backward<F: Scalar>(
    pair: &PairExample<'_, F>,
    model: &MatcherModel<F>,
    cache: &ForwardCache<F>,
) -> MatcherParams<F> {
    let mut grads = model.params.zeros_like();
    let m = model.n_filters();

    // head
    let dlogits: Array1<F> = match (&cache.output, model.loss) {
        (HeadOutput::Softmax { probs, .. }, LossKind::CrossEntropy) => {
            let class = if pair.label > F::of(0.5) { 1 } else { 0 };
            let mut d = probs.clone();
            d[class] -= F::one();
            d
        }
        (HeadOutput::Sigmoid { y_hat }, LossKind::Square) => {
            let two = F::of(2.0);
            let dy = two * (*y_hat - pair.label);
            let dz = dy * *y_hat * (F::one() - *y_hat);
            Array1::from_vec(vec![dz])
        }
        _ => unreachable!("head output always matches the model's loss"),
    };

    for (i, &dl) in dlogits.iter().enumerate() {
        grads.out_b[i] = dl;
        for (j, &hj) in cache.hidden.iter().enumerate() {
            grads.out_w[(i, j)] = dl * hj;
        }
    }

    let mut dhidden = model.params.out_w.t().dot(&dlogits);
    if let Some(scale) = &cache.dropout_scale {
        dhidden = &dhidden * scale;
    }
    let dhidden_pre: Array1<F> = dhidden
        .iter()
        .zip(cache.hidden_pre.iter())
        .map(|(&g, &pre)| if pre > F::zero() { g } else { F::zero() })
        .collect();

    for (i, &dp) in dhidden_pre.iter().enumerate() {
        grads.hidden_b[i] = dp;
        for (j, &xj) in cache.join.iter().enumerate() {
            grads.hidden_w[(i, j)] = dp * xj;
        }
    }

    let djoin = model.params.hidden_w.t().dot(&dhidden_pre);
    let mut da = djoin.slice(ndarray::s![..m]).to_owned();
    let dsim = djoin[m];
    let mut db = djoin.slice(ndarray::s![m + 1..]).to_owned();

    // bilinear score: sim = aᵀ M b, M = (A + Aᵀ)/2
    let sym = model.matching_symmetric();
    da = da + sym.dot(&cache.fb.deep).mapv(|x| x * dsim);
    db = db + sym.dot(&cache.fa.deep).mapv(|x| x * dsim);
    let half = F::of(0.5);
    for i in 0..m {
        for j in 0..m {
            grads.matching[(i, j)] = dsim
                * half
                * (cache.fa.deep[i] * cache.fb.deep[j] + cache.fb.deep[i] * cache.fa.deep[j]);
        }
    }

    // pooled conv features: gradient flows to the argmax window only,
    // gated by the ReLU at that window
    let h = model.filter_width();
    for (forward, ddeep) in [(&cache.fa, &da), (&cache.fb, &db)] {
        for j in 0..m {
            if forward.pre_activation[j] <= F::zero() {
                continue;
            }
            let g = ddeep[j];
            let start = forward.argmax[j];
            let filter_grad = &mut grads.filters[j];
            for k in 0..h {
                let column = forward.padded.column(start + k);
                for (r, &x) in column.iter().enumerate() {
                    filter_grad.weights[(r, k)] += g * x;
                }
            }
            filter_grad.bias += g;
        }
    }

    grads
}

/// One AdaGrad update: accumulate squared gradients, then step each
/// parameter by `lr * g / (sqrt(accum) + 1e-8)`.
pub fn adagrad_step<F: Scalar>(model: &mut MatcherModel<F>, grads: &MatcherParams<F>, lr: F) {
    let eps = F::of(ADAGRAD_EPS);
    model
        .params
        .visit3(&mut model.accumulators, grads, |p, acc, &g| {
            *acc += g * g;
            *p -= lr * g / (acc.sqrt() + eps);
        });
}

/// An index pair into a patient list plus its similarity label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub label: f64,
}

/// Draws `count` labeled pairs without replacement: same-cohort pairs
/// get label 1, cross-cohort pairs 0, mixed at `ratio` positives.
pub fn sample_pairs(
    cohorts: &[String],
    ratio: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidInput("positive ratio must be in [0, 1]".into()));
    }
    let want_pos = (ratio * count as f64).round() as usize;
    let want_neg = count - want_pos.min(count);
    sample_pairs_exact(cohorts, want_pos, want_neg, seed)
}

fn sample_pairs_exact(
    cohorts: &[String],
    want_pos: usize,
    want_neg: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let n = cohorts.len();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if cohorts[i] == cohorts[j] {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }

    if want_pos > positives.len() || want_neg > negatives.len() {
        return Err(Error::InvalidInput(format!(
            "requested {want_pos} positive and {want_neg} negative pairs but only {} and {} exist",
            positives.len(),
            negatives.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let mut samples: Vec<PairSample> = positives[..want_pos]
        .iter()
        .map(|&(a, b)| PairSample { a, b, label: 1.0 })
        .chain(
            negatives[..want_neg]
                .iter()
                .map(|&(a, b)| PairSample { a, b, label: 0.0 }),
        )
        .collect();
    samples.shuffle(&mut rng);
    Ok(samples)
}

/// How many same/cross-cohort pairs a label set offers.
fn pair_availability(cohorts: &[String]) -> (usize, usize) {
    let mut sizes: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for c in cohorts {
        *sizes.entry(c.as_str()).or_default() += 1;
    }
    let positives: usize = sizes.values().map(|&s| s * (s - 1) / 2).sum();
    let total = cohorts.len() * (cohorts.len().saturating_sub(1)) / 2;
    (positives, total - positives)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_dev_loss: f64,
    pub final_train_loss: f64,
}

/// Trains the matcher on labeled patient matrices with minibatch
/// AdaGrad, early-stopping on dev loss, returning the best-dev model.
/// Deterministic for a given config.
pub fn train<F: Scalar>(
    train_set: &[PatientMatrix<F>],
    train_cohorts: &[String],
    dev_set: &[PatientMatrix<F>],
    dev_cohorts: &[String],
    config: &MatcherConfig,
) -> Result<(MatcherModel<F>, TrainSummary)> {
    config.validate()?;
    if train_set.len() != train_cohorts.len() || dev_set.len() != dev_cohorts.len() {
        return Err(Error::InvalidInput("one cohort label per matrix required".into()));
    }
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::InvalidInput("empty train or dev set".into()));
    }

    let d = train_set[0].dim();
    let mut model = MatcherModel::new(d, config)?;
    let lr = F::of(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    // requested pair counts clamped to what the label sets can offer
    let clamp = |want: usize, cohorts: &[String]| -> (usize, usize) {
        let (pos, neg) = pair_availability(cohorts);
        let want_pos = (config.positive_ratio * want as f64).round() as usize;
        (want_pos.min(pos), (want - want_pos.min(want)).min(neg))
    };

    let (dev_pos, dev_neg) = clamp(config.pairs_per_epoch.min(1000), dev_cohorts);
    if dev_pos + dev_neg == 0 {
        return Err(Error::InvalidInput("dev set offers no labeled pairs".into()));
    }
    let dev_pairs = sample_pairs_exact(dev_cohorts, dev_pos, dev_neg, config.seed ^ 0xdead)?;
    let dev_loss = |model: &MatcherModel<F>| -> f64 {
        // ordered collect + sequential sum keeps the value independent
        // of rayon's scheduling
        let losses: Vec<f64> = dev_pairs
            .par_iter()
            .map(|s| {
                let pair = PairExample {
                    a: &dev_set[s.a],
                    b: &dev_set[s.b],
                    label: F::of(s.label),
                };
                pair_loss(&pair, model).as_f64()
            })
            .collect();
        losses.iter().sum::<f64>() / dev_pairs.len() as f64
    };

    let mut best_model = model.clone();
    let mut best_dev = dev_loss(&model);
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    let mut last_train_loss = f64::NAN;

    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        let (epoch_pos, epoch_neg) = clamp(config.pairs_per_epoch, train_cohorts);
        if epoch_pos + epoch_neg == 0 {
            return Err(Error::InvalidInput("train set offers no labeled pairs".into()));
        }
        let samples = sample_pairs_exact(
            train_cohorts,
            epoch_pos,
            epoch_neg,
            config.seed.wrapping_add(1 + epoch as u64),
        )?;

        let mut epoch_loss = 0.0f64;
        for batch in samples.chunks(config.minibatch) {
            let mut grads = model.params.zeros_like();
            let scale = F::of(1.0 / batch.len() as f64);
            for sample in batch {
                // the join vector is order-dependent, so present each
                // pair in a random orientation
                let (first, second) = if rng.gen::<bool>() {
                    (sample.a, sample.b)
                } else {
                    (sample.b, sample.a)
                };
                let pair = PairExample {
                    a: &train_set[first],
                    b: &train_set[second],
                    label: F::of(sample.label),
                };
                let (_, cache) = forward_pair(&pair, &model, Phase::Train { rng: &mut rng });
                epoch_loss += loss_from_cache(&cache, pair.label, model.loss).as_f64();
                let pair_grads = backward(&pair, &model, &cache);
                grads.add_scaled(&pair_grads, scale);
            }
            if !grads.all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient in epoch {epoch}"
                )));
            }
            adagrad_step(&mut model, &grads, lr);
        }
        last_train_loss = epoch_loss / samples.len() as f64;
        if !last_train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite training loss in epoch {epoch}"
            )));
        }

        let dl = dev_loss(&model);
        if dl < best_dev {
            best_dev = dl;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                break;
            }
        }
    }

    Ok((
        best_model,
        TrainSummary {
            epochs_run,
            best_dev_loss: best_dev,
            final_train_loss: last_train_loss,
        },
    ))
}

/// p(similar) for a pair, averaged over both argument orders so the
/// score is symmetric.
pub fn similar_probability<F: Scalar>(
    a: &PatientMatrix<F>,
    b: &PatientMatrix<F>,
    model: &MatcherModel<F>,
) -> F {
    let fa = forward_patient(a, model);
    let fb = forward_patient(b, model);
    similar_probability_from_forward(&fa, &fb, model)
}

fn similar_probability_from_forward<F: Scalar>(
    fa: &PatientForward<F>,
    fb: &PatientForward<F>,
    model: &MatcherModel<F>,
) -> F {
    let clone = |f: &PatientForward<F>| PatientForward {
        padded: f.padded.clone(),
        argmax: f.argmax.clone(),
        pre_activation: f.pre_activation.clone(),
        deep: f.deep.clone(),
    };
    let (p_ab, _) = head_from_deep(clone(fa), clone(fb), model, Phase::Infer);
    let (p_ba, _) = head_from_deep(clone(fb), clone(fa), model, Phase::Infer);
    (p_ab[1] + p_ba[1]) * F::of(0.5)
}

/// All-pairs trained similarity with the per-patient convolution work
/// done once; diagonal fixed at 1.
pub fn build_cnn_similarity<F: Scalar>(
    patients: &[PatientMatrix<F>],
    model: &MatcherModel<F>,
) -> SimilarityMatrix<F> {
    let forwards: Vec<PatientForward<F>> = patients
        .par_iter()
        .map(|x| forward_patient(x, model))
        .collect();

    let p = patients.len();
    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .collect();
    let scored: Vec<F> = pairs
        .par_iter()
        .map(|&(i, j)| similar_probability_from_forward(&forwards[i], &forwards[j], model))
        .collect();

    let mut scores = Array2::zeros((p, p));
    for i in 0..p {
        scores[(i, i)] = F::one();
    }
    for (&(i, j), &value) in pairs.iter().zip(&scored) {
        scores[(i, j)] = value;
        scores[(j, i)] = value;
    }
    SimilarityMatrix {
        ids: patients.iter().map(|m| m.patient_id.clone()).collect(),
        scores,
        measure: Measure::Cnn,
        undefined_pairs: 0,
    }
}

impl<F: Scalar> MatcherModel<F> {
    /// Writes a versioned text checkpoint: header, dimensions, then all
    /// tensors (parameters, then accumulators) in declaration order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(writer, "loss {}", self.loss)?;
        writeln!(
            writer,
            "dims {} {} {} {} {}",
            self.embedding_dim(),
            self.filter_width(),
            self.n_filters(),
            self.params.hidden_w.nrows(),
            self.params.out_b.len(),
        )?;
        writeln!(writer, "dropout {}", self.dropout)?;
        writeln!(writer, "seed {}", self.seed)?;
        for tensor in [self.params.flatten(), self.accumulators.flatten()] {
            write!(writer, "{}", tensor.len())?;
            for value in tensor {
                write!(writer, " {value}")?;
            }
            writeln!(writer)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let mut lines = BufReader::new(file).lines();
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format("truncated checkpoint".into()))?
                .map_err(Error::Io)
        };

        let header = next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Format("not a matcher checkpoint".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }

        let field = |line: String, name: &str| -> Result<String> {
            line.strip_prefix(name)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| Error::Format(format!("expected `{name}` line")))
        };
        let loss: LossKind = field(next_line()?, "loss")?.parse()?;
        let dims_line = field(next_line()?, "dims")?;
        let dims: Vec<usize> = dims_line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format("bad dims".into())))
            .collect::<Result<_>>()?;
        let [d, h, m, hidden, out] = dims[..] else {
            return Err(Error::Format("dims line needs 5 entries".into()));
        };
        let dropout: f64 = field(next_line()?, "dropout")?
            .parse()
            .map_err(|_| Error::Format("bad dropout".into()))?;
        let seed: u64 = field(next_line()?, "seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed".into()))?;

        let mut template = MatcherParams::<F> {
            filters: (0..m)
                .map(|_| ConvFilter {
                    weights: Array2::zeros((d, h)),
                    bias: F::zero(),
                })
                .collect(),
            matching: Array2::zeros((m, m)),
            hidden_w: Array2::zeros((hidden, 2 * m + 1)),
            hidden_b: Array1::zeros(hidden),
            out_w: Array2::zeros((out, hidden)),
            out_b: Array1::zeros(out),
        };
        let mut accumulators = template.zeros_like();

        for target in [&mut template, &mut accumulators] {
            let line = next_line()?;
            let mut tokens = line.split_whitespace();
            let count: usize = tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format("missing tensor length".into()))?;
            let values: Vec<F> = tokens
                .map(|t| {
                    t.parse::<f64>()
                        .map(F::of)
                        .map_err(|_| Error::Format(format!("bad number `{t}`")))
                })
                .collect::<Result<_>>()?;
            if values.len() != count {
                return Err(Error::Format(format!(
                    "tensor length {count} declared but {} values found",
                    values.len()
                )));
            }
            target.assign_flat(&values)?;
        }

        Ok(MatcherModel {
            params: template,
            accumulators,
            loss,
            dropout,
            seed,
        })
    }
}
