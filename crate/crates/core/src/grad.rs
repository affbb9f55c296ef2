//! Reverse-mode gradients for the minibatch ELBO.
//!
//! Differentiation uses the reparameterization w = mu + sigma(rho) * eps and
//! works directly on a recorded [`ForwardTrace`], so the exact weight noise
//! that produced the loss is reused. Three closed-form facts keep the pass
//! cheap:
//!
//! - The log-posterior term has zero mu-gradient: the direct dependence on mu
//!   and the pathwise dependence through w cancel for every draw.
//! - Its rho-gradient per draw is -sigma'(rho)/sigma(rho), independent of the
//!   noise.
//! - The prior and likelihood terms are pathwise only, so their mu- and
//!   rho-gradients share one per-parameter accumulator: with
//!   P = d(log prior)/dw + d(log lik)/dw summed over draws, the loss gradients
//!   are -sum(P)/M for mu and -(N sigma'/sigma + sigma' * sum(P*eps))/M for
//!   rho.
//!
//! `finite_diff_check` validates all of it against central differences with
//! frozen noise.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Result, UcbError};
use crate::network::{
    log_softmax_rows, softmax_rows, BayesNetwork, ForwardTrace, HeadScope, NetEps,
};
use crate::variational::{gaussian_log_pdf, ElboTerms, ScaleMixturePrior};

/// Which loss terms participate. Ordinary (non-Bayesian) baselines disable
/// the posterior and prior terms and train on the likelihood alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub posterior: bool,
    pub prior: bool,
    pub likelihood: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        Self { posterior: true, prior: true, likelihood: true }
    }
}

impl TermMask {
    pub fn likelihood_only() -> Self {
        Self { posterior: false, prior: false, likelihood: true }
    }
}

/// Loss under a term mask: (l1 - l2 - l3) / M with disabled terms zeroed.
pub fn masked_loss(terms: &ElboTerms, mask: TermMask) -> Result<f64> {
    if terms.minibatches == 0 {
        return Err(UcbError::InvalidArgument("minibatch count must be positive".into()));
    }
    let l1 = if mask.posterior { terms.l1 } else { 0.0 };
    let l2 = if mask.prior { terms.l2 } else { 0.0 };
    let l3 = if mask.likelihood { terms.l3 } else { 0.0 };
    Ok((l1 - l2 - l3) / terms.minibatches as f64)
}

/// Gradients for one layer, same layout as the parameters.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub d_mu_w: Vec<f64>,
    pub d_rho_w: Vec<f64>,
    pub d_mu_b: Vec<f64>,
    pub d_rho_b: Vec<f64>,
}

/// Gradients for every layer of the network, indexed like
/// `BayesNetwork::layer`. Layers outside the traced scope hold zeros, so
/// applying the set never moves an inactive head.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<BlockGrads>,
}

impl GradientSet {
    pub fn zeros_like(net: &BayesNetwork) -> Self {
        let layers = (0..net.layer_count())
            .map(|i| {
                let l = net.layer(i);
                BlockGrads {
                    d_mu_w: vec![0.0; l.weights.len()],
                    d_rho_w: vec![0.0; l.weights.len()],
                    d_mu_b: vec![0.0; l.biases.len()],
                    d_rho_b: vec![0.0; l.biases.len()],
                }
            })
            .collect();
        Self { layers }
    }

    /// Multiply every gradient by a constant (e.g. 1/N draw averaging).
    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for g in l
                .d_mu_w
                .iter_mut()
                .chain(l.d_rho_w.iter_mut())
                .chain(l.d_mu_b.iter_mut())
                .chain(l.d_rho_b.iter_mut())
            {
                *g *= factor;
            }
        }
    }

    /// Elementwise sum with another set of the same layout; used to combine
    /// per-head contributions of a mixed joint-training batch into one step.
    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(UcbError::ShapeMismatch(
                "gradient sets cover different layer counts".into(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.d_mu_w.len() != b.d_mu_w.len() || a.d_mu_b.len() != b.d_mu_b.len() {
                return Err(UcbError::ShapeMismatch("gradient block size mismatch".into()));
            }
            for (x, y) in a.d_mu_w.iter_mut().zip(&b.d_mu_w) {
                *x += y;
            }
            for (x, y) in a.d_rho_w.iter_mut().zip(&b.d_rho_w) {
                *x += y;
            }
            for (x, y) in a.d_mu_b.iter_mut().zip(&b.d_mu_b) {
                *x += y;
            }
            for (x, y) in a.d_rho_b.iter_mut().zip(&b.d_rho_b) {
                *x += y;
            }
        }
        Ok(())
    }
}

fn validate_trace(net: &BayesNetwork, trace: &ForwardTrace, labels: &[usize]) -> Result<()> {
    if trace.stamp != net.stamp() {
        return Err(UcbError::StaleTrace(
            "forward trace predates a parameter update".into(),
        ));
    }
    if trace.input.nrows() != labels.len() {
        return Err(UcbError::ShapeMismatch(format!(
            "{} traced examples vs {} labels",
            trace.input.nrows(),
            labels.len()
        )));
    }
    if trace.samples.is_empty() {
        return Err(UcbError::InvalidArgument("trace holds no MC draws".into()));
    }
    let classes = trace.samples[0].logits().ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(UcbError::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Softmax cross-entropy backprop for one MC draw: returns the summed
/// log-likelihood and per-layer (dl3/dW, dl3/db) in scoped order.
fn likelihood_backprop(
    trace: &ForwardTrace,
    sample_idx: usize,
    labels: &[usize],
) -> (f64, Vec<(Array2<f64>, Array1<f64>)>) {
    let sample = &trace.samples[sample_idx];
    let logits = sample.logits();
    let ls = log_softmax_rows(logits);
    let mut l3 = 0.0;
    for (row, &lab) in ls.rows().into_iter().zip(labels.iter()) {
        l3 += row[lab];
    }
    // dl3/dlogits = onehot - softmax, summed over the batch downstream.
    let mut dz = softmax_rows(logits);
    dz.mapv_inplace(|v| -v);
    for (b, &lab) in labels.iter().enumerate() {
        dz[[b, lab]] += 1.0;
    }

    let n_layers = trace.layer_indices.len();
    let mut grads_rev = Vec::with_capacity(n_layers);
    for pos in (0..n_layers).rev() {
        let x = if pos == 0 { &trace.input } else { &sample.hidden[pos - 1] };
        let gw = x.t().dot(&dz);
        let gb = dz.sum_axis(Axis(0));
        if pos > 0 {
            let ls = &sample.layers[pos];
            let (rows, cols) = (x.ncols(), dz.ncols());
            let wv = ArrayView2::from_shape((rows, cols), &ls.w.w).expect("weight layout");
            let mut dx = dz.dot(&wv.t());
            // ReLU gate: pre-activations at or below zero pass nothing.
            Zip::from(&mut dx)
                .and(&sample.preacts[pos - 1])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            dz = dx;
        }
        grads_rev.push((gw, gb));
    }
    grads_rev.reverse();
    (l3, grads_rev)
}

/// Gradients of the masked ELBO loss with respect to every (mu, rho) pair,
/// plus the loss terms themselves.
pub fn backward(
    net: &BayesNetwork,
    trace: &ForwardTrace,
    labels: &[usize],
    prior: &ScaleMixturePrior,
    minibatches: u32,
    mask: TermMask,
) -> Result<(GradientSet, ElboTerms)> {
    validate_trace(net, trace, labels)?;
    if minibatches == 0 {
        return Err(UcbError::InvalidArgument("minibatch count must be positive".into()));
    }
    let pre = prior.precompute();
    let m = minibatches as f64;
    let n_draws = trace.samples.len();

    struct Acc {
        h_w: Vec<f64>,
        he_w: Vec<f64>,
        h_b: Vec<f64>,
        he_b: Vec<f64>,
    }
    let mut accs: Vec<Acc> = trace
        .layer_indices
        .iter()
        .map(|&li| {
            let l = net.layer(li);
            Acc {
                h_w: vec![0.0; l.weights.len()],
                he_w: vec![0.0; l.weights.len()],
                h_b: vec![0.0; l.biases.len()],
                he_b: vec![0.0; l.biases.len()],
            }
        })
        .collect();

    let (mut l1, mut l2, mut l3) = (0.0, 0.0, 0.0);
    for si in 0..n_draws {
        let sample = &trace.samples[si];
        let lik = if mask.likelihood {
            let (ll, grads) = likelihood_backprop(trace, si, labels);
            l3 += ll;
            Some(grads)
        } else {
            None
        };
        for (pos, &li) in trace.layer_indices.iter().enumerate() {
            let layer = net.layer(li);
            let sg = &trace.sigmas[pos];
            let ws = &sample.layers[pos];
            let acc = &mut accs[pos];
            let gwb = lik.as_ref().map(|g| &g[pos]);
            for j in 0..layer.weights.len() {
                let w = ws.w.w[j];
                let mut p = 0.0;
                if mask.prior {
                    let (lp, dw) = pre.log_pdf_and_dw(w);
                    l2 += lp;
                    p += dw;
                }
                if let Some((gw, _)) = gwb {
                    p += gw.as_slice().expect("standard layout")[j];
                }
                acc.h_w[j] += p;
                acc.he_w[j] += p * ws.w.eps[j];
                if mask.posterior {
                    l1 += gaussian_log_pdf(w, layer.weights.mu[j], sg.sigma_w[j]);
                }
            }
            for j in 0..layer.biases.len() {
                let b = ws.b.w[j];
                let mut p = 0.0;
                if mask.prior {
                    let (lp, dw) = pre.log_pdf_and_dw(b);
                    l2 += lp;
                    p += dw;
                }
                if let Some((_, gb)) = gwb {
                    p += gb[j];
                }
                acc.h_b[j] += p;
                acc.he_b[j] += p * ws.b.eps[j];
                if mask.posterior {
                    l1 += gaussian_log_pdf(b, layer.biases.mu[j], sg.sigma_b[j]);
                }
            }
        }
    }

    let mut grads = GradientSet::zeros_like(net);
    let nf = n_draws as f64;
    for (pos, &li) in trace.layer_indices.iter().enumerate() {
        let sg = &trace.sigmas[pos];
        let acc = &accs[pos];
        let block = &mut grads.layers[li];
        for j in 0..acc.h_w.len() {
            block.d_mu_w[j] = -acc.h_w[j] / m;
            let post = if mask.posterior { nf * sg.dsigma_w[j] / sg.sigma_w[j] } else { 0.0 };
            block.d_rho_w[j] = -(post + sg.dsigma_w[j] * acc.he_w[j]) / m;
        }
        for j in 0..acc.h_b.len() {
            block.d_mu_b[j] = -acc.h_b[j] / m;
            let post = if mask.posterior { nf * sg.dsigma_b[j] / sg.sigma_b[j] } else { 0.0 };
            block.d_rho_b[j] = -(post + sg.dsigma_b[j] * acc.he_b[j]) / m;
        }
    }

    let terms = ElboTerms { l1, l2, l3, minibatches, draws: n_draws as u32 };
    Ok((grads, terms))
}

/// Loss terms recomputed from a trace alone, with masked terms zeroed.
/// Shares no accumulation code with `backward`, which lets tests cross-check
/// the two.
pub fn elbo_terms_from_trace(
    net: &BayesNetwork,
    trace: &ForwardTrace,
    labels: &[usize],
    prior: &ScaleMixturePrior,
    minibatches: u32,
    mask: TermMask,
) -> Result<ElboTerms> {
    validate_trace(net, trace, labels)?;
    let pre = prior.precompute();
    let (mut l1, mut l2, mut l3) = (0.0, 0.0, 0.0);
    for sample in &trace.samples {
        if mask.likelihood {
            let ls = log_softmax_rows(sample.logits());
            for (row, &lab) in ls.rows().into_iter().zip(labels.iter()) {
                l3 += row[lab];
            }
        }
        for (pos, &li) in trace.layer_indices.iter().enumerate() {
            if !mask.posterior && !mask.prior {
                continue;
            }
            let layer = net.layer(li);
            let sg = &trace.sigmas[pos];
            let ws = &sample.layers[pos];
            for j in 0..layer.weights.len() {
                let w = ws.w.w[j];
                if mask.posterior {
                    l1 += gaussian_log_pdf(w, layer.weights.mu[j], sg.sigma_w[j]);
                }
                if mask.prior {
                    l2 += pre.log_pdf(w);
                }
            }
            for j in 0..layer.biases.len() {
                let b = ws.b.w[j];
                if mask.posterior {
                    l1 += gaussian_log_pdf(b, layer.biases.mu[j], sg.sigma_b[j]);
                }
                if mask.prior {
                    l2 += pre.log_pdf(b);
                }
            }
        }
    }
    Ok(ElboTerms { l1, l2, l3, minibatches, draws: trace.samples.len() as u32 })
}

// ---------------------------------------------------------------------------
// Finite-difference validation
// ---------------------------------------------------------------------------

/// Parameter block kinds, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    MuW,
    RhoW,
    MuB,
    RhoB,
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::MuW => "mu_w",
            BlockKind::RhoW => "rho_w",
            BlockKind::MuB => "mu_b",
            BlockKind::RhoB => "rho_b",
        })
    }
}

/// Worst coordinate of one parameter block under the FD comparison.
#[derive(Debug, Clone)]
pub struct FdGroup {
    /// Global layer index.
    pub layer: usize,
    pub block: BlockKind,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub groups: Vec<FdGroup>,
    pub max_rel_err: f64,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn failing_groups(&self) -> impl Iterator<Item = &FdGroup> {
        let tol = self.tolerance;
        self.groups.iter().filter(move |g| !(g.max_rel_err < tol))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    /// Central-difference half-step h.
    pub step: f64,
    /// Relative-error bound every coordinate must stay under.
    pub tolerance: f64,
    /// Corrupt the analytic gradients before comparing; the check must then
    /// fail. Exercises the checker itself.
    pub inject_fault: bool,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, inject_fault: false }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Compare analytic gradients against central finite differences of the
/// masked loss, reusing one frozen set of weight noise for every evaluation.
/// Only the traced scope is checked; out-of-scope layers have identically
/// zero gradients by construction.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    net: &mut BayesNetwork,
    batch: &Array2<f64>,
    labels: &[usize],
    prior: &ScaleMixturePrior,
    minibatches: u32,
    eps: &[NetEps],
    scope: HeadScope,
    mask: TermMask,
    settings: &FdSettings,
) -> Result<FdReport> {
    if !(settings.step > 0.0 && settings.step.is_finite()) {
        return Err(UcbError::InvalidArgument("step must be a positive finite number".into()));
    }
    if !(settings.tolerance >= 0.0) {
        return Err(UcbError::InvalidArgument("tolerance must be non-negative".into()));
    }

    let (_, trace) = net.forward_with_eps(batch, eps, scope)?;
    let (mut grads, _) = backward(net, &trace, labels, prior, minibatches, mask)?;
    let layer_indices = trace.layer_indices.clone();
    drop(trace);

    if settings.inject_fault {
        // Perturb every tenth coordinate by a relative 10% plus an absolute
        // floor so even near-zero gradients register as wrong.
        for block in &mut grads.layers {
            for v in [&mut block.d_mu_w, &mut block.d_rho_w, &mut block.d_mu_b, &mut block.d_rho_b]
            {
                for (j, g) in v.iter_mut().enumerate() {
                    if j % 10 == 0 {
                        *g = *g * 1.1 + 1e-3;
                    }
                }
            }
        }
    }

    let loss_at = |net: &BayesNetwork| -> Result<f64> {
        let (_, tr) = net.forward_with_eps(batch, eps, scope)?;
        let terms = elbo_terms_from_trace(net, &tr, labels, prior, minibatches, mask)?;
        masked_loss(&terms, mask)
    };

    let h = settings.step;
    let mut groups = Vec::new();
    let mut overall = 0.0f64;
    for &li in &layer_indices {
        let blocks = [
            (BlockKind::MuW, net.layer(li).weights.len()),
            (BlockKind::RhoW, net.layer(li).weights.len()),
            (BlockKind::MuB, net.layer(li).biases.len()),
            (BlockKind::RhoB, net.layer(li).biases.len()),
        ];
        for (kind, len) in blocks {
            let mut worst = FdGroup {
                layer: li,
                block: kind,
                max_rel_err: -1.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for j in 0..len {
                let read = |net: &BayesNetwork| -> f64 {
                    let l = net.layer(li);
                    match kind {
                        BlockKind::MuW => l.weights.mu[j],
                        BlockKind::RhoW => l.weights.rho[j],
                        BlockKind::MuB => l.biases.mu[j],
                        BlockKind::RhoB => l.biases.rho[j],
                    }
                };
                let write = |net: &mut BayesNetwork, v: f64| {
                    let l = net.layer_mut(li);
                    match kind {
                        BlockKind::MuW => l.weights.mu[j] = v,
                        BlockKind::RhoW => l.weights.rho[j] = v,
                        BlockKind::MuB => l.biases.mu[j] = v,
                        BlockKind::RhoB => l.biases.rho[j] = v,
                    }
                };
                let orig = read(net);
                write(net, orig + h);
                let plus = loss_at(net)?;
                write(net, orig - h);
                let minus = loss_at(net)?;
                write(net, orig);
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = {
                    let b = &grads.layers[li];
                    match kind {
                        BlockKind::MuW => b.d_mu_w[j],
                        BlockKind::RhoW => b.d_rho_w[j],
                        BlockKind::MuB => b.d_mu_b[j],
                        BlockKind::RhoB => b.d_rho_b[j],
                    }
                };
                let e = rel_err(analytic, numeric);
                if e > worst.max_rel_err {
                    worst.max_rel_err = e;
                    worst.worst_index = j;
                    worst.analytic = analytic;
                    worst.numeric = numeric;
                }
            }
            overall = overall.max(worst.max_rel_err);
            groups.push(worst);
        }
    }

    Ok(FdReport {
        groups,
        max_rel_err: overall,
        step: h,
        tolerance: settings.tolerance,
        passed: overall < settings.tolerance,
    })
}

/// The standard gradient-check scenario: a 2-3-2 single-head network, eight
/// random inputs with random binary labels, three frozen MC draws, default
/// scale-mixture prior, full loss.
pub fn gradcheck_toy(seed: u64, settings: &FdSettings) -> Result<FdReport> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    use crate::network::{HeadLayout, InitConfig, LayerEps, NetworkSpec};

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let spec = NetworkSpec {
        input_dim: 2,
        hidden_dims: vec![3],
        heads: HeadLayout::SingleHead { total_classes: 2, task_ranges: vec![(0, 2)] },
    };
    let mut net = BayesNetwork::init(spec, &InitConfig::default(), &mut rng)?;

    let n_examples = 8;
    let batch = Array2::from_shape_fn((n_examples, 2), |_| rng.sample(StandardNormal));
    let labels: Vec<usize> = (0..n_examples).map(|_| rng.random_range(0..2)).collect();

    let head = net.head_index(HeadScope::Single)?;
    let scoped = net.scoped_layers(head);
    let eps: Vec<NetEps> = (0..3)
        .map(|_| NetEps {
            layers: scoped
                .iter()
                .map(|&li| LayerEps {
                    w: (0..net.layer(li).weights.len()).map(|_| rng.sample(StandardNormal)).collect(),
                    b: (0..net.layer(li).biases.len()).map(|_| rng.sample(StandardNormal)).collect(),
                })
                .collect(),
        })
        .collect();

    let prior = ScaleMixturePrior::new(0.5, 1.0, (-6.0f64).exp())?;
    finite_diff_check(
        &mut net,
        &batch,
        &labels,
        &prior,
        4,
        &eps,
        HeadScope::Single,
        TermMask::default(),
        settings,
    )
}
