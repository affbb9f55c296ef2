//! Mean-field Gaussian posteriors, the scale-mixture prior, and the ELBO.
//!
//! Every weight is represented by a `(mu, rho)` pair with `sigma = softplus(rho)`,
//! so the standard deviation stays positive for any real `rho`. Sampling uses the
//! reparameterization `w = mu + sigma * eps` with `eps ~ N(0, I)`, which keeps the
//! draw differentiable in both parameters.
//!
//! All math is f64. The mixture prior is evaluated in log space because its
//! narrow component can be as small as `exp(-8)`; both components underflow to
//! zero density well inside the range of trained weights if evaluated naively.

use crate::error::{Result, UcbError};

/// ln(2*pi), used by the Gaussian log-density.
pub const LN_2PI: f64 = 1.8378770664093454;

/// Shape of one variational parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamShape {
    /// A weight matrix, stored row-major as fan_in x fan_out.
    Matrix { rows: usize, cols: usize },
    /// A flat parameter vector (biases).
    Vector { len: usize },
}

impl ParamShape {
    pub fn count(&self) -> usize {
        match *self {
            ParamShape::Matrix { rows, cols } => rows * cols,
            ParamShape::Vector { len } => len,
        }
    }
}

/// One block of mean-field Gaussian parameters.
///
/// `mu` and `rho` always have exactly `shape.count()` entries.
#[derive(Debug, Clone)]
pub struct GaussianVariational {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    shape: ParamShape,
}

impl GaussianVariational {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>, shape: ParamShape) -> Result<Self> {
        if mu.len() != shape.count() || rho.len() != shape.count() {
            return Err(UcbError::ShapeMismatch(format!(
                "parameter block wants {} entries, got mu={} rho={}",
                shape.count(),
                mu.len(),
                rho.len()
            )));
        }
        if !mu.iter().chain(rho.iter()).all(|v| v.is_finite()) {
            return Err(UcbError::InvalidArgument(
                "mu and rho must be finite".into(),
            ));
        }
        Ok(Self { mu, rho, shape })
    }

    pub fn shape(&self) -> ParamShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// sigma = softplus(rho), elementwise.
    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }
}

/// A concrete draw from a parameter block, kept together with the noise that
/// produced it so gradients can be propagated through the draw.
#[derive(Debug, Clone)]
pub struct WeightSample {
    pub w: Vec<f64>,
    pub eps: Vec<f64>,
    pub shape: ParamShape,
}

/// Numerically stable softplus. The branch point keeps `exp` in range on both
/// sides: above 20 the direct form would compute `ln(1 + e^rho)` with a huge
/// exponential, so `rho + log1p(exp(-rho))` is used instead.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid; derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// sigma = softplus(rho) for a whole block. Errors on non-finite input.
pub fn softplus_sigma(rho: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = rho.iter().position(|v| !v.is_finite()) {
        return Err(UcbError::InvalidArgument(format!(
            "rho[{bad}] is not finite"
        )));
    }
    Ok(rho.iter().map(|&r| softplus(r)).collect())
}

/// w = mu + softplus(rho) * eps, elementwise.
pub fn sample_weights(params: &GaussianVariational, eps: &[f64]) -> Result<WeightSample> {
    if eps.len() != params.len() {
        return Err(UcbError::ShapeMismatch(format!(
            "eps has {} entries, parameter block has {}",
            eps.len(),
            params.len()
        )));
    }
    let w = params
        .mu
        .iter()
        .zip(params.rho.iter())
        .zip(eps.iter())
        .map(|((&m, &r), &e)| m + softplus(r) * e)
        .collect();
    Ok(WeightSample {
        w,
        eps: eps.to_vec(),
        shape: params.shape(),
    })
}

/// log N(w | mu, sigma^2) for one coordinate.
pub fn gaussian_log_pdf(w: f64, mu: f64, sigma: f64) -> f64 {
    let z = (w - mu) / sigma;
    -sigma.ln() - 0.5 * LN_2PI - 0.5 * z * z
}

/// l1: sum over the block of log N(w | mu, softplus(rho)^2).
pub fn log_posterior(sample: &WeightSample, params: &GaussianVariational) -> Result<f64> {
    if sample.w.len() != params.len() {
        return Err(UcbError::ShapeMismatch(format!(
            "sample has {} entries, parameter block has {}",
            sample.w.len(),
            params.len()
        )));
    }
    let mut acc = 0.0;
    for ((&w, &m), &r) in sample.w.iter().zip(params.mu.iter()).zip(params.rho.iter()) {
        acc += gaussian_log_pdf(w, m, softplus(r));
    }
    Ok(acc)
}

/// Two-component Gaussian scale mixture centered at zero.
///
/// Invariant: `0 <= pi <= 1` and `sigma1 >= sigma2 > 0` (wide component first).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleMixturePrior {
    pub pi: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl ScaleMixturePrior {
    pub fn new(pi: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(pi.is_finite() && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(UcbError::InvalidArgument("prior values must be finite".into()));
        }
        if !(0.0..=1.0).contains(&pi) {
            return Err(UcbError::InvalidArgument(format!("pi = {pi} outside [0, 1]")));
        }
        if sigma2 <= 0.0 || sigma1 < sigma2 {
            return Err(UcbError::InvalidArgument(format!(
                "need sigma1 >= sigma2 > 0, got sigma1 = {sigma1}, sigma2 = {sigma2}"
            )));
        }
        Ok(Self { pi, sigma1, sigma2 })
    }

    pub(crate) fn precompute(&self) -> MixturePrecomp {
        MixturePrecomp {
            log_pi: self.pi.ln(),
            log_1m_pi: (1.0 - self.pi).ln(),
            log_sigma1: self.sigma1.ln(),
            log_sigma2: self.sigma2.ln(),
            half_inv_var1: 0.5 / (self.sigma1 * self.sigma1),
            half_inv_var2: 0.5 / (self.sigma2 * self.sigma2),
        }
    }
}

/// Per-prior constants hoisted out of the per-weight loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MixturePrecomp {
    log_pi: f64,
    log_1m_pi: f64,
    log_sigma1: f64,
    log_sigma2: f64,
    half_inv_var1: f64,
    half_inv_var2: f64,
}

/// log(exp(a) + exp(b)) without overflow; tolerates -inf in either slot.
fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a >= b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

impl MixturePrecomp {
    /// Log-density of the mixture at one weight.
    #[inline]
    pub(crate) fn log_pdf(&self, w: f64) -> f64 {
        let a1 = self.log_pi - self.log_sigma1 - 0.5 * LN_2PI - w * w * self.half_inv_var1;
        let a2 = self.log_1m_pi - self.log_sigma2 - 0.5 * LN_2PI - w * w * self.half_inv_var2;
        log_sum_exp2(a1, a2)
    }

    /// Log-density and its derivative in w, sharing the responsibility
    /// computation. The derivative is
    /// `-w * (r1 / sigma1^2 + r2 / sigma2^2)` with r the component
    /// responsibilities, evaluated in log space.
    #[inline]
    pub(crate) fn log_pdf_and_dw(&self, w: f64) -> (f64, f64) {
        let a1 = self.log_pi - self.log_sigma1 - 0.5 * LN_2PI - w * w * self.half_inv_var1;
        let a2 = self.log_1m_pi - self.log_sigma2 - 0.5 * LN_2PI - w * w * self.half_inv_var2;
        let lse = log_sum_exp2(a1, a2);
        let r1 = if a1 == f64::NEG_INFINITY { 0.0 } else { (a1 - lse).exp() };
        let r2 = if a2 == f64::NEG_INFINITY { 0.0 } else { (a2 - lse).exp() };
        let dw = -w * (r1 * 2.0 * self.half_inv_var1 + r2 * 2.0 * self.half_inv_var2);
        (lse, dw)
    }
}

/// l2: sum over the block of the mixture log-density.
pub fn log_prior_mixture(sample: &WeightSample, prior: &ScaleMixturePrior) -> f64 {
    let pre = prior.precompute();
    sample.w.iter().map(|&w| pre.log_pdf(w)).sum()
}

/// The three ELBO terms of one minibatch, each already summed over MC draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// Sum over draws of the log variational posterior.
    pub l1: f64,
    /// Sum over draws of the log prior.
    pub l2: f64,
    /// Sum over draws of the data log-likelihood.
    pub l3: f64,
    /// Minibatches per epoch (M).
    pub minibatches: u32,
    /// MC draws per minibatch (N).
    pub draws: u32,
}

/// Minibatch loss: (l1 - l2 - l3) / M.
pub fn elbo_loss(terms: &ElboTerms) -> Result<f64> {
    if terms.minibatches == 0 {
        return Err(UcbError::InvalidArgument(
            "minibatch count must be at least 1".into(),
        ));
    }
    Ok((terms.l1 - terms.l2 - terms.l3) / terms.minibatches as f64)
}
