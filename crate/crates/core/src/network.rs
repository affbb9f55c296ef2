//! Bayesian multi-layer perceptrons.
//!
//! A network is a ReLU trunk plus one or more affine output heads. In
//! multi-head layouts every task owns a head and only that head participates
//! in the task's forward and backward passes; in single-head layouts one
//! output layer covers the concatenated class range of all tasks.
//!
//! `forward_mc` draws fresh weight noise per MC sample and returns both the
//! draw-averaged class probabilities and a [`ForwardTrace`] capturing
//! everything the backward pass needs: sampled weights with their noise,
//! layer inputs, pre-activations, and logits. The trace remembers the network
//! mutation stamp it was recorded at, so differentiating against a network
//! that has since been stepped is rejected instead of silently wrong.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Result, UcbError};
use crate::variational::{
    sigmoid, softplus, GaussianVariational, ParamShape, WeightSample,
};

/// Checkpoint file magic and version.
const CHECKPOINT_MAGIC: &[u8; 4] = b"UCBN";
const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Network description
// ---------------------------------------------------------------------------

/// One output head of a multi-head network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    /// 1-based task id the head belongs to.
    pub task_id: usize,
    pub class_count: usize,
}

/// Output layer arrangement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadLayout {
    /// One affine head per task, in task order.
    MultiHead(Vec<HeadSpec>),
    /// A single affine head over the union of all class ranges.
    /// `task_ranges[t-1]` is task t's half-open global class range, used to
    /// restrict argmax when predicting with a task scope.
    SingleHead {
        total_classes: usize,
        task_ranges: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub heads: HeadLayout,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(UcbError::InvalidArgument("input_dim must be positive".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(UcbError::InvalidArgument("hidden dims must be positive".into()));
        }
        match &self.heads {
            HeadLayout::MultiHead(heads) => {
                if heads.is_empty() {
                    return Err(UcbError::InvalidArgument("need at least one head".into()));
                }
                for (i, h) in heads.iter().enumerate() {
                    if h.task_id != i + 1 {
                        return Err(UcbError::InvalidArgument(format!(
                            "heads must be in task order; position {} holds task {}",
                            i, h.task_id
                        )));
                    }
                    if h.class_count == 0 {
                        return Err(UcbError::InvalidArgument("empty head".into()));
                    }
                }
            }
            HeadLayout::SingleHead { total_classes, task_ranges } => {
                if *total_classes == 0 {
                    return Err(UcbError::InvalidArgument("empty output layer".into()));
                }
                for &(lo, hi) in task_ranges {
                    if lo >= hi || hi > *total_classes {
                        return Err(UcbError::InvalidArgument(format!(
                            "class range {lo}..{hi} outside 0..{total_classes}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// (fan_in, fan_out) of every layer: trunk in order, then heads in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        let mut shapes: Vec<(usize, usize)> =
            dims.windows(2).map(|w| (w[0], w[1])).collect();
        let last = *dims.last().unwrap();
        match &self.heads {
            HeadLayout::MultiHead(heads) => {
                shapes.extend(heads.iter().map(|h| (last, h.class_count)));
            }
            HeadLayout::SingleHead { total_classes, .. } => {
                shapes.push((last, *total_classes));
            }
        }
        shapes
    }

    pub fn head_count(&self) -> usize {
        match &self.heads {
            HeadLayout::MultiHead(heads) => heads.len(),
            HeadLayout::SingleHead { .. } => 1,
        }
    }
}

/// Which head a forward pass runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadScope {
    /// The unique head of a single-head network.
    Single,
    /// The head of the given 1-based task (multi-head networks). On
    /// single-head networks this resolves to the single head; the task id
    /// only matters for prediction scoping.
    Task(usize),
}

// ---------------------------------------------------------------------------
// Layers and the network
// ---------------------------------------------------------------------------

/// An affine layer with variational weights and biases.
#[derive(Debug, Clone)]
pub struct BayesLinearLayer {
    pub weights: GaussianVariational,
    pub biases: GaussianVariational,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl BayesLinearLayer {
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Initialization for fresh networks: mu ~ N(0, mu_std^2), rho constant.
#[derive(Debug, Clone, Copy)]
pub struct InitConfig {
    pub mu_std: f64,
    pub rho_init: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { mu_std: 0.1, rho_init: -3.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BayesNetwork {
    spec: NetworkSpec,
    trunk: Vec<BayesLinearLayer>,
    heads: Vec<BayesLinearLayer>,
    /// Bumped on every parameter mutation; traces record it.
    stamp: u64,
}

fn init_layer(
    fan_in: usize,
    fan_out: usize,
    init: &InitConfig,
    rng: &mut impl Rng,
) -> Result<BayesLinearLayer> {
    let normal = Normal::new(0.0, init.mu_std)
        .map_err(|e| UcbError::InvalidArgument(format!("mu_std: {e}")))?;
    let wn = fan_in * fan_out;
    let mu_w: Vec<f64> = (0..wn).map(|_| normal.sample(rng)).collect();
    let mu_b: Vec<f64> = (0..fan_out).map(|_| normal.sample(rng)).collect();
    Ok(BayesLinearLayer {
        weights: GaussianVariational::new(
            mu_w,
            vec![init.rho_init; wn],
            ParamShape::Matrix { rows: fan_in, cols: fan_out },
        )?,
        biases: GaussianVariational::new(
            mu_b,
            vec![init.rho_init; fan_out],
            ParamShape::Vector { len: fan_out },
        )?,
        fan_in,
        fan_out,
    })
}

impl BayesNetwork {
    pub fn init(spec: NetworkSpec, init: &InitConfig, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let trunk_count = spec.hidden_dims.len();
        let mut layers = Vec::with_capacity(shapes.len());
        for &(fi, fo) in &shapes {
            layers.push(init_layer(fi, fo, init, rng)?);
        }
        let heads = layers.split_off(trunk_count);
        Ok(Self { spec, trunk: layers, heads, stamp: 0 })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn trunk(&self) -> &[BayesLinearLayer] {
        &self.trunk
    }

    pub fn heads(&self) -> &[BayesLinearLayer] {
        &self.heads
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Record that parameters changed, invalidating existing traces.
    pub(crate) fn touch(&mut self) {
        self.stamp += 1;
    }

    pub fn layer_count(&self) -> usize {
        self.trunk.len() + self.heads.len()
    }

    /// Layer by global index: trunk layers first, then heads.
    pub fn layer(&self, idx: usize) -> &BayesLinearLayer {
        if idx < self.trunk.len() {
            &self.trunk[idx]
        } else {
            &self.heads[idx - self.trunk.len()]
        }
    }

    pub(crate) fn layer_mut(&mut self, idx: usize) -> &mut BayesLinearLayer {
        if idx < self.trunk.len() {
            &mut self.trunk[idx]
        } else {
            &mut self.heads[idx - self.trunk.len()]
        }
    }

    /// Total number of (mu, rho) parameter pairs.
    pub fn param_count(&self) -> usize {
        (0..self.layer_count()).map(|i| self.layer(i).param_count()).sum()
    }

    /// Global parameter offset of each layer's weight and bias blocks, in the
    /// canonical order: layers by global index, weights before biases.
    /// This layout defines freeze-map indices and SNR tie-breaking.
    pub fn block_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::with_capacity(self.layer_count());
        let mut at = 0;
        for i in 0..self.layer_count() {
            let l = self.layer(i);
            offsets.push((at, at + l.weights.len()));
            at += l.param_count();
        }
        offsets
    }

    pub fn head_index(&self, scope: HeadScope) -> Result<usize> {
        match (&self.spec.heads, scope) {
            (HeadLayout::SingleHead { .. }, _) => Ok(0),
            (HeadLayout::MultiHead(heads), HeadScope::Task(t)) => {
                if t >= 1 && t <= heads.len() {
                    Ok(t - 1)
                } else {
                    Err(UcbError::InvalidArgument(format!(
                        "task {t} has no head (network has {})",
                        heads.len()
                    )))
                }
            }
            (HeadLayout::MultiHead(_), HeadScope::Single) => Err(UcbError::InvalidArgument(
                "multi-head network needs a task scope".into(),
            )),
        }
    }

    /// Global layer indices visited by a forward pass through `head_idx`.
    pub fn scoped_layers(&self, head_idx: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.trunk.len()).collect();
        v.push(self.trunk.len() + head_idx);
        v
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Per-layer standard deviations and their rho-derivatives, shared by all MC
/// samples of one forward pass.
#[derive(Debug, Clone)]
pub struct LayerSigmas {
    pub sigma_w: Vec<f64>,
    pub dsigma_w: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub dsigma_b: Vec<f64>,
}

/// Sampled weights and biases of one layer for one MC draw.
#[derive(Debug, Clone)]
pub struct LayerSample {
    pub w: WeightSample,
    pub b: WeightSample,
}

/// Everything recorded about one MC draw.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    /// Sampled parameters per scoped layer.
    pub layers: Vec<LayerSample>,
    /// ReLU outputs of each trunk layer (inputs to the following layer).
    pub hidden: Vec<Array2<f64>>,
    /// Pre-activations per scoped layer; the last entry is the logits.
    pub preacts: Vec<Array2<f64>>,
}

impl SampleTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.preacts.last().expect("non-empty forward")
    }
}

/// Record of a full MC forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub(crate) stamp: u64,
    pub head_idx: usize,
    /// Global indices of the layers that ran, trunk first, head last.
    pub layer_indices: Vec<usize>,
    pub input: Array2<f64>,
    pub sigmas: Vec<LayerSigmas>,
    pub samples: Vec<SampleTrace>,
}

/// Noise for every scoped layer of one MC draw.
#[derive(Debug, Clone)]
pub struct LayerEps {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Noise for one MC draw across all scoped layers.
#[derive(Debug, Clone)]
pub struct NetEps {
    pub layers: Vec<LayerEps>,
}

/// Per-layer 0/1 multipliers applied to sampled weights; indexed by global
/// layer id. Used to evaluate pruned networks where released parameters must
/// contribute nothing, including their noise.
#[derive(Debug, Clone)]
pub struct NetMask {
    pub layers: Vec<LayerMaskValues>,
}

#[derive(Debug, Clone)]
pub struct LayerMaskValues {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

fn sample_block(mu: &[f64], sigma: &[f64], eps: &[f64], shape: ParamShape) -> WeightSample {
    let w = mu
        .iter()
        .zip(sigma.iter())
        .zip(eps.iter())
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    WeightSample { w, eps: eps.to_vec(), shape }
}

fn affine(x: &Array2<f64>, w: &[f64], b: &[f64], fan_in: usize, fan_out: usize) -> Array2<f64> {
    let wv = ArrayView2::from_shape((fan_in, fan_out), w).expect("weight layout");
    let bv = ArrayView1::from(b);
    let mut z = x.dot(&wv);
    z += &bv;
    z
}

pub fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

/// Row-wise stable softmax.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

enum EpsSource<'a, R: Rng> {
    Draw { rng: &'a mut R, n: usize },
    Zeros { n: usize },
    Frozen(&'a [NetEps]),
}

impl BayesNetwork {
    fn check_batch(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.spec.input_dim {
            return Err(UcbError::ShapeMismatch(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn forward_impl<R: Rng>(
        &self,
        batch: &Array2<f64>,
        scope: HeadScope,
        eps_source: EpsSource<'_, R>,
        mask: Option<&NetMask>,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        self.check_batch(batch)?;
        let head_idx = self.head_index(scope)?;
        let layer_indices = self.scoped_layers(head_idx);

        // sigma and its rho-derivative once per pass; identical across draws.
        let sigmas: Vec<LayerSigmas> = layer_indices
            .iter()
            .map(|&li| {
                let l = self.layer(li);
                LayerSigmas {
                    sigma_w: l.weights.rho.iter().map(|&r| softplus(r)).collect(),
                    dsigma_w: l.weights.rho.iter().map(|&r| sigmoid(r)).collect(),
                    sigma_b: l.biases.rho.iter().map(|&r| softplus(r)).collect(),
                    dsigma_b: l.biases.rho.iter().map(|&r| sigmoid(r)).collect(),
                }
            })
            .collect();

        let n_samples = match &eps_source {
            EpsSource::Draw { n, .. } => *n,
            EpsSource::Zeros { n } => *n,
            EpsSource::Frozen(eps) => eps.len(),
        };
        if n_samples == 0 {
            return Err(UcbError::InvalidArgument("need at least one MC draw".into()));
        }

        let mut eps_per_sample: Vec<NetEps> = Vec::with_capacity(n_samples);
        match eps_source {
            EpsSource::Draw { rng, n } => {
                // Draw order: per sample, layers in scoped order, weights then
                // biases. This order is part of the determinism contract.
                for _ in 0..n {
                    let mut layers = Vec::with_capacity(layer_indices.len());
                    for &li in &layer_indices {
                        let l = self.layer(li);
                        let w: Vec<f64> = (0..l.weights.len())
                            .map(|_| rng.sample(StandardNormal))
                            .collect();
                        let b: Vec<f64> = (0..l.biases.len())
                            .map(|_| rng.sample(StandardNormal))
                            .collect();
                        layers.push(LayerEps { w, b });
                    }
                    eps_per_sample.push(NetEps { layers });
                }
            }
            EpsSource::Zeros { n } => {
                for _ in 0..n {
                    let layers = layer_indices
                        .iter()
                        .map(|&li| {
                            let l = self.layer(li);
                            LayerEps {
                                w: vec![0.0; l.weights.len()],
                                b: vec![0.0; l.biases.len()],
                            }
                        })
                        .collect();
                    eps_per_sample.push(NetEps { layers });
                }
            }
            EpsSource::Frozen(eps) => {
                for e in eps {
                    if e.layers.len() != layer_indices.len() {
                        return Err(UcbError::ShapeMismatch(
                            "frozen noise does not cover the scoped layers".into(),
                        ));
                    }
                    eps_per_sample.push(e.clone());
                }
            }
        }

        let mut samples = Vec::with_capacity(n_samples);
        let mut mean_probs: Option<Array2<f64>> = None;
        for eps in &eps_per_sample {
            let mut layers = Vec::with_capacity(layer_indices.len());
            let mut hidden = Vec::with_capacity(layer_indices.len().saturating_sub(1));
            let mut preacts = Vec::with_capacity(layer_indices.len());
            let mut x = batch;
            for (pos, &li) in layer_indices.iter().enumerate() {
                let l = self.layer(li);
                let sg = &sigmas[pos];
                let mut ws = sample_block(&l.weights.mu, &sg.sigma_w, &eps.layers[pos].w, l.weights.shape());
                let mut bs = sample_block(&l.biases.mu, &sg.sigma_b, &eps.layers[pos].b, l.biases.shape());
                if let Some(m) = mask {
                    let lm = &m.layers[li];
                    for (w, &k) in ws.w.iter_mut().zip(lm.w.iter()) {
                        *w *= k;
                    }
                    for (b, &k) in bs.w.iter_mut().zip(lm.b.iter()) {
                        *b *= k;
                    }
                }
                let z = affine(x, &ws.w, &bs.w, l.fan_in, l.fan_out);
                let is_head = pos + 1 == layer_indices.len();
                layers.push(LayerSample { w: ws, b: bs });
                preacts.push(z);
                if !is_head {
                    hidden.push(relu(preacts.last().unwrap()));
                    x = hidden.last().unwrap();
                }
            }
            let probs = softmax_rows(preacts.last().unwrap());
            match &mut mean_probs {
                None => mean_probs = Some(probs),
                Some(acc) => *acc += &probs,
            }
            samples.push(SampleTrace { layers, hidden, preacts });
        }
        let mut mean_probs = mean_probs.expect("at least one draw");
        mean_probs /= n_samples as f64;

        let trace = ForwardTrace {
            stamp: self.stamp,
            head_idx,
            layer_indices,
            input: batch.clone(),
            sigmas,
            samples,
        };
        Ok((mean_probs, trace))
    }

    /// MC-sampled forward pass: draws `n_samples` weight settings, runs the
    /// scoped layers, and averages the per-draw softmax probabilities.
    pub fn forward_mc(
        &self,
        batch: &Array2<f64>,
        n_samples: usize,
        rng: &mut impl Rng,
        scope: HeadScope,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        self.forward_impl(batch, scope, EpsSource::Draw { rng, n: n_samples }, None)
    }

    /// Forward pass replaying recorded noise; used by the gradient checker.
    pub fn forward_with_eps(
        &self,
        batch: &Array2<f64>,
        eps: &[NetEps],
        scope: HeadScope,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        self.forward_impl::<ChaCha12Rng>(batch, scope, EpsSource::Frozen(eps), None)
    }

    /// Deterministic forward at the posterior means (w = mu).
    pub fn forward_mean(&self, batch: &Array2<f64>, scope: HeadScope) -> Result<Array2<f64>> {
        let (probs, _) =
            self.forward_impl::<ChaCha12Rng>(batch, scope, EpsSource::Zeros { n: 1 }, None)?;
        Ok(probs)
    }

    /// Mean-weight logits, for losses that want log-softmax directly.
    pub fn forward_mean_logits(&self, batch: &Array2<f64>, scope: HeadScope) -> Result<Array2<f64>> {
        let (_, trace) =
            self.forward_impl::<ChaCha12Rng>(batch, scope, EpsSource::Zeros { n: 1 }, None)?;
        Ok(trace.samples.into_iter().next().unwrap().preacts.pop().unwrap())
    }

    /// Masked variants: sampled parameters are multiplied by 0/1 before use,
    /// so masked-out entries contribute neither their mean nor their noise.
    pub fn forward_mc_masked(
        &self,
        batch: &Array2<f64>,
        n_samples: usize,
        rng: &mut impl Rng,
        scope: HeadScope,
        mask: &NetMask,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        self.forward_impl(batch, scope, EpsSource::Draw { rng, n: n_samples }, Some(mask))
    }

    pub fn forward_mean_masked(
        &self,
        batch: &Array2<f64>,
        scope: HeadScope,
        mask: &NetMask,
    ) -> Result<Array2<f64>> {
        let (probs, _) =
            self.forward_impl::<ChaCha12Rng>(batch, scope, EpsSource::Zeros { n: 1 }, Some(mask))?;
        Ok(probs)
    }

    /// Class predictions.
    ///
    /// Multi-head networks require `task_scope` and return labels local to
    /// that head. Single-head networks return global class indices; with a
    /// task scope the argmax is restricted to the task's class range, without
    /// one it runs over every class the network knows.
    pub fn predict(
        &self,
        batch: &Array2<f64>,
        mode: PredictMode,
        task_scope: Option<usize>,
        mask: Option<&NetMask>,
    ) -> Result<Vec<usize>> {
        let scope = match task_scope {
            Some(t) => HeadScope::Task(t),
            None => HeadScope::Single,
        };
        if matches!(self.spec.heads, HeadLayout::MultiHead(_)) && task_scope.is_none() {
            return Err(UcbError::InvalidArgument(
                "multi-head network needs a task scope to predict".into(),
            ));
        }
        let probs = match mode {
            PredictMode::McAverage { n, seed } => {
                let mut rng = <ChaCha12Rng as rand::SeedableRng>::seed_from_u64(seed);
                let (probs, _) = match mask {
                    Some(m) => self.forward_mc_masked(batch, n, &mut rng, scope, m)?,
                    None => self.forward_mc(batch, n, &mut rng, scope)?,
                };
                probs
            }
            PredictMode::MeanWeights => match mask {
                Some(m) => self.forward_mean_masked(batch, scope, m)?,
                None => self.forward_mean(batch, scope)?,
            },
        };
        let (lo, hi) = match (&self.spec.heads, task_scope) {
            (HeadLayout::SingleHead { task_ranges, .. }, Some(t)) => {
                *task_ranges.get(t - 1).ok_or_else(|| {
                    UcbError::InvalidArgument(format!("task {t} has no class range"))
                })?
            }
            _ => (0, probs.ncols()),
        };
        Ok(probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = lo;
                let mut best_p = f64::NEG_INFINITY;
                for c in lo..hi {
                    if row[c] > best_p {
                        best_p = row[c];
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

/// Evaluation modes for `predict`.
#[derive(Debug, Clone, Copy)]
pub enum PredictMode {
    /// Average probabilities over `n` seeded MC draws. The fixed seed makes
    /// repeated evaluations of unchanged parameters bit-identical.
    McAverage { n: usize, seed: u64 },
    /// Use the posterior means as point weights.
    MeanWeights,
}

/// Sum over the batch of log p(label | input) under the given probabilities.
/// For MC estimates, call once per draw and add the results.
pub fn log_likelihood(probabilities: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probabilities.nrows() != labels.len() {
        return Err(UcbError::ShapeMismatch(format!(
            "{} probability rows vs {} labels",
            probabilities.nrows(),
            labels.len()
        )));
    }
    let classes = probabilities.ncols();
    let mut acc = 0.0;
    for (row, &label) in probabilities.rows().into_iter().zip(labels.iter()) {
        if label >= classes {
            return Err(UcbError::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        acc += row[label].ln();
    }
    Ok(acc)
}

/// Mean negative log-likelihood per example from logits.
pub fn nll_mean(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(UcbError::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let ls = log_softmax_rows(logits);
    let mut acc = 0.0;
    for (row, &label) in ls.rows().into_iter().zip(labels.iter()) {
        if label >= ls.ncols() {
            return Err(UcbError::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                ls.ncols()
            )));
        }
        acc -= row[label];
    }
    Ok(acc / labels.len() as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// One layer as stored on disk.
#[derive(Debug, Clone)]
pub struct RawLayer {
    pub fan_in: u32,
    pub fan_out: u32,
    pub mu_w: Vec<f64>,
    pub rho_w: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub rho_b: Vec<f64>,
}

/// Write every layer (trunk, then heads) to a little-endian binary file:
/// magic "UCBN", version u32, layer count u32, then per layer fan_in u32,
/// fan_out u32, mu weights, rho weights, mu biases, rho biases as f64
/// row-major.
pub fn write_checkpoint(net: &BayesNetwork, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(net.layer_count() as u32)?;
    for i in 0..net.layer_count() {
        let l = net.layer(i);
        w.write_u32::<LittleEndian>(l.fan_in as u32)?;
        w.write_u32::<LittleEndian>(l.fan_out as u32)?;
        for &v in &l.weights.mu {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &v in &l.weights.rho {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &v in &l.biases.mu {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &v in &l.biases.rho {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            UcbError::Corruption("checkpoint truncated".into())
        } else {
            UcbError::Io(e)
        }
    })?;
    Ok(v)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<RawLayer>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| UcbError::Corruption("checkpoint truncated".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(UcbError::Format(format!(
            "bad checkpoint magic {:02x?}, expected {:02x?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| UcbError::Corruption("checkpoint truncated".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(UcbError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let layer_count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| UcbError::Corruption("checkpoint truncated".into()))?;
    let mut layers = Vec::with_capacity(layer_count as usize);
    for _ in 0..layer_count {
        let fan_in = r
            .read_u32::<LittleEndian>()
            .map_err(|_| UcbError::Corruption("checkpoint truncated".into()))?;
        let fan_out = r
            .read_u32::<LittleEndian>()
            .map_err(|_| UcbError::Corruption("checkpoint truncated".into()))?;
        let wn = fan_in as usize * fan_out as usize;
        let mu_w = read_f64s(&mut r, wn)?;
        let rho_w = read_f64s(&mut r, wn)?;
        let mu_b = read_f64s(&mut r, fan_out as usize)?;
        let rho_b = read_f64s(&mut r, fan_out as usize)?;
        layers.push(RawLayer { fan_in, fan_out, mu_w, rho_w, mu_b, rho_b });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(UcbError::Corruption("checkpoint has trailing bytes".into()));
    }
    Ok(layers)
}

impl BayesNetwork {
    /// Rebuild a network from raw checkpoint layers; shapes must match `spec`.
    pub fn from_raw_layers(spec: NetworkSpec, raw: Vec<RawLayer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if raw.len() != shapes.len() {
            return Err(UcbError::Inconsistency(format!(
                "checkpoint has {} layers, spec wants {}",
                raw.len(),
                shapes.len()
            )));
        }
        let trunk_count = spec.hidden_dims.len();
        let mut layers = Vec::with_capacity(raw.len());
        for (layer, &(fi, fo)) in raw.into_iter().zip(shapes.iter()) {
            if layer.fan_in as usize != fi || layer.fan_out as usize != fo {
                return Err(UcbError::Inconsistency(format!(
                    "checkpoint layer is {}x{}, spec wants {}x{}",
                    layer.fan_in, layer.fan_out, fi, fo
                )));
            }
            layers.push(BayesLinearLayer {
                weights: GaussianVariational::new(
                    layer.mu_w,
                    layer.rho_w,
                    ParamShape::Matrix { rows: fi, cols: fo },
                )?,
                biases: GaussianVariational::new(
                    layer.mu_b,
                    layer.rho_b,
                    ParamShape::Vector { len: fo },
                )?,
                fan_in: fi,
                fan_out: fo,
            });
        }
        let heads = layers.split_off(trunk_count);
        Ok(Self { spec, trunk: layers, heads, stamp: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn two_head_spec() -> NetworkSpec {
        NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![3],
            heads: HeadLayout::MultiHead(vec![
                HeadSpec { task_id: 1, class_count: 2 },
                HeadSpec { task_id: 2, class_count: 2 },
            ]),
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let a = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut r1).unwrap();
        let b = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut r2).unwrap();
        for i in 0..a.layer_count() {
            let (la, lb) = (a.layer(i), b.layer(i));
            assert_eq!(la.weights.mu, lb.weights.mu);
            assert_eq!(la.biases.mu, lb.biases.mu);
            assert!(la.weights.rho.iter().all(|&r| r == -3.0));
        }
    }

    #[test]
    fn forward_mean_matches_hand_computation() {
        // 2 -> 2 single-head net with hand-set means; eps = 0 so w = mu.
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![],
            heads: HeadLayout::SingleHead { total_classes: 2, task_ranges: vec![(0, 2)] },
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut net = BayesNetwork::init(spec, &InitConfig::default(), &mut rng).unwrap();
        net.heads[0].weights.mu = vec![1.0, -1.0, 0.5, 2.0]; // row-major 2x2
        net.heads[0].biases.mu = vec![0.1, -0.2];
        let batch = array![[1.0, 2.0]];
        let probs = net.forward_mean(&batch, HeadScope::Single).unwrap();
        // logits: [1*1 + 2*0.5 + 0.1, 1*(-1) + 2*2 - 0.2] = [2.1, 2.8]
        let (a, b) = (2.1f64, 2.8f64);
        let m = b;
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let z = ea + eb;
        assert_relative_eq!(probs[[0, 0]], ea / z, epsilon = 1e-15);
        assert_relative_eq!(probs[[0, 1]], eb / z, epsilon = 1e-15);
    }

    #[test]
    fn zero_eps_forward_equals_mean_forward_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        let batch = array![[0.3, -1.2], [2.0, 0.0]];
        let head = net.head_index(HeadScope::Task(1)).unwrap();
        let zero_eps: Vec<NetEps> = vec![NetEps {
            layers: net
                .scoped_layers(head)
                .iter()
                .map(|&li| LayerEps {
                    w: vec![0.0; net.layer(li).weights.len()],
                    b: vec![0.0; net.layer(li).biases.len()],
                })
                .collect(),
        }];
        let (p1, _) = net.forward_with_eps(&batch, &zero_eps, HeadScope::Task(1)).unwrap();
        let p2 = net.forward_mean(&batch, HeadScope::Task(1)).unwrap();
        assert_eq!(
            p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mc_mean_is_arithmetic_mean_of_replayed_draws() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        let batch = array![[0.5, 0.5], [-1.0, 2.0], [0.0, 0.0]];
        let mut fwd_rng = ChaCha12Rng::seed_from_u64(99);
        let (mean, trace) = net.forward_mc(&batch, 2, &mut fwd_rng, HeadScope::Task(2)).unwrap();

        let eps0 = NetEps {
            layers: trace.samples[0]
                .layers
                .iter()
                .map(|ls| LayerEps { w: ls.w.eps.clone(), b: ls.b.eps.clone() })
                .collect(),
        };
        let eps1 = NetEps {
            layers: trace.samples[1]
                .layers
                .iter()
                .map(|ls| LayerEps { w: ls.w.eps.clone(), b: ls.b.eps.clone() })
                .collect(),
        };
        let (p0, _) = net.forward_with_eps(&batch, &[eps0], HeadScope::Task(2)).unwrap();
        let (p1, _) = net.forward_with_eps(&batch, &[eps1], HeadScope::Task(2)).unwrap();
        let expect = (&p0 + &p1) / 2.0;
        for (a, b) in mean.iter().zip(expect.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = array![[1.0, 2.0, 3.0], [-100.0, 0.0, 100.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(&z);
        for row in p.rows() {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn log_likelihood_examples() {
        // Perfect prediction: probability 1 on the label.
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(log_likelihood(&probs, &[0, 1]).unwrap(), 0.0);

        // Uniform over C classes, B rows: -B ln C.
        let b = 7;
        let c = 5;
        let probs = Array2::from_elem((b, c), 1.0 / c as f64);
        let labels = vec![3usize; b];
        let got = log_likelihood(&probs, &labels).unwrap();
        assert_relative_eq!(got, -(b as f64) * (c as f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_matches_scalar_reference() {
        let probs: Array2<f64> = array![[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]];
        let labels = [0usize, 1, 1];
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            want += probs[[i, l]].ln();
        }
        assert_relative_eq!(log_likelihood(&probs, &labels).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_rejects_out_of_range_label() {
        let probs = array![[0.5, 0.5]];
        assert!(log_likelihood(&probs, &[2]).is_err());
        assert!(log_likelihood(&probs, &[0, 1]).is_err());
    }

    #[test]
    fn multi_head_prediction_requires_scope() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        let batch = array![[0.0, 0.0]];
        let err = net.predict(&batch, PredictMode::MeanWeights, None, None);
        assert!(err.is_err());
        let ok = net.predict(&batch, PredictMode::MeanWeights, Some(2), None);
        assert!(ok.is_ok());
        assert!(net.predict(&batch, PredictMode::MeanWeights, Some(3), None).is_err());
    }

    #[test]
    fn single_head_scoped_argmax_stays_in_range() {
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![],
            heads: HeadLayout::SingleHead {
                total_classes: 4,
                task_ranges: vec![(0, 2), (2, 4)],
            },
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut net = BayesNetwork::init(spec, &InitConfig::default(), &mut rng).unwrap();
        // Make class 3 dominate globally.
        net.heads[0].weights.mu = vec![0.0; 8];
        net.heads[0].biases.mu = vec![0.0, 1.0, 2.0, 5.0];
        let batch = array![[0.0, 0.0]];
        let global = net.predict(&batch, PredictMode::MeanWeights, None, None).unwrap();
        assert_eq!(global, vec![3]);
        let task1 = net.predict(&batch, PredictMode::MeanWeights, Some(1), None).unwrap();
        assert_eq!(task1, vec![1]); // best within classes {0, 1}
        let task2 = net.predict(&batch, PredictMode::MeanWeights, Some(2), None).unwrap();
        assert_eq!(task2, vec![3]);
    }

    #[test]
    fn seeded_mc_prediction_is_reproducible() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        let batch = array![[0.4, -0.7], [1.0, 1.0]];
        let mode = PredictMode::McAverage { n: 10, seed: 42 };
        let a = net.predict(&batch, mode, Some(1), None).unwrap();
        let b = net.predict(&batch, mode, Some(1), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ucbn");
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        write_checkpoint(&net, &path).unwrap();
        let raw = read_checkpoint(&path).unwrap();
        assert_eq!(raw.len(), net.layer_count());
        let rebuilt = BayesNetwork::from_raw_layers(two_head_spec(), raw).unwrap();
        for i in 0..net.layer_count() {
            let (a, b) = (net.layer(i), rebuilt.layer(i));
            let bits = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weights.mu), bits(&b.weights.mu));
            assert_eq!(bits(&a.weights.rho), bits(&b.weights.rho));
            assert_eq!(bits(&a.biases.mu), bits(&b.biases.mu));
            assert_eq!(bits(&a.biases.rho), bits(&b.biases.rho));
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ucbn");
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        write_checkpoint(&net, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic_path = dir.path().join("bad_magic.ucbn");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&bad_magic_path, &bad).unwrap();
        assert!(matches!(
            read_checkpoint(&bad_magic_path),
            Err(UcbError::Format(_))
        ));

        let trunc_path = dir.path().join("trunc.ucbn");
        std::fs::write(&trunc_path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            read_checkpoint(&trunc_path),
            Err(UcbError::Corruption(_))
        ));
    }

    #[test]
    fn from_raw_layers_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ucbn");
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        write_checkpoint(&net, &path).unwrap();
        let raw = read_checkpoint(&path).unwrap();
        let other_spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![4],
            heads: HeadLayout::MultiHead(vec![
                HeadSpec { task_id: 1, class_count: 2 },
                HeadSpec { task_id: 2, class_count: 2 },
            ]),
        };
        assert!(BayesNetwork::from_raw_layers(other_spec, raw).is_err());
    }

    #[test]
    fn batch_width_is_checked() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let net = BayesNetwork::init(two_head_spec(), &InitConfig::default(), &mut rng).unwrap();
        let batch = array![[1.0, 2.0, 3.0]];
        assert!(net.forward_mean(&batch, HeadScope::Task(1)).is_err());
    }
}
