//! Parameter updates and uncertainty-guided continual learning.
//!
//! Plain SGD runs with a per-parameter learning rate. At task boundaries the
//! rates are rebuilt from per-parameter importance: by default a mean's
//! importance is 1/sigma, so its rate becomes base_lr * sigma and certain
//! (low sigma) weights barely move for later tasks, while rho rates stay at
//! base_lr. Rates are recomputed fresh from the base at every boundary; the
//! compounding variant that rescales the current rates instead sits behind a
//! flag.
//!
//! The pruning path ranks a layer's still-trainable parameters by
//! signal-to-noise |mu|/sigma, permanently freezes the strongest fraction,
//! and re-initializes the rest. Freeze state lives in a [`FreezeMap`] indexed
//! by the canonical parameter order (layers by global index, weights
//! row-major, then biases) and persists to a packed binary file.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, UcbError};
use crate::grad::GradientSet;
use crate::network::{BayesLinearLayer, BayesNetwork, LayerMaskValues, NetMask};
use crate::variational::softplus;

const MASK_MAGIC: &[u8; 4] = b"UCBM";
const MASK_VERSION: u32 = 1;

/// Value released parameters are reset to; matches fresh-network init.
const RELEASE_RHO: f64 = -3.0;

// ---------------------------------------------------------------------------
// Per-parameter learning rates and SGD
// ---------------------------------------------------------------------------

/// Learning rates for one layer, same layout as its parameters.
#[derive(Debug, Clone)]
pub struct LrBlock {
    pub mu_w: Vec<f64>,
    pub rho_w: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub rho_b: Vec<f64>,
}

/// Learning rates for every (mu, rho) coordinate of the network.
#[derive(Debug, Clone)]
pub struct PerParamLR {
    pub layers: Vec<LrBlock>,
}

impl PerParamLR {
    pub fn uniform(net: &BayesNetwork, lr_mu: f64, lr_rho: f64) -> Self {
        let layers = (0..net.layer_count())
            .map(|i| {
                let l = net.layer(i);
                LrBlock {
                    mu_w: vec![lr_mu; l.weights.len()],
                    rho_w: vec![lr_rho; l.weights.len()],
                    mu_b: vec![lr_mu; l.biases.len()],
                    rho_b: vec![lr_rho; l.biases.len()],
                }
            })
            .collect();
        Self { layers }
    }

    /// Scale every rate, mu and rho alike. Used by plateau decay.
    pub fn scale_all(&mut self, factor: f64) {
        for b in &mut self.layers {
            for v in b
                .mu_w
                .iter_mut()
                .chain(b.rho_w.iter_mut())
                .chain(b.mu_b.iter_mut())
                .chain(b.rho_b.iter_mut())
            {
                *v *= factor;
            }
        }
    }
}

/// One SGD step: theta -= lr * grad, coordinate by coordinate. Frozen
/// parameters are skipped outright (neither mu nor rho moves), which keeps
/// their bytes identical rather than relying on a zero rate.
pub fn sgd_step(
    net: &mut BayesNetwork,
    grads: &GradientSet,
    lr: &PerParamLR,
    freeze: &FreezeMap,
) -> Result<()> {
    if grads.layers.len() != net.layer_count() || lr.layers.len() != net.layer_count() {
        return Err(UcbError::ShapeMismatch(
            "gradient or learning-rate layout does not match the network".into(),
        ));
    }
    if freeze.param_count() != net.param_count() {
        return Err(UcbError::ShapeMismatch(format!(
            "freeze map covers {} parameters, network has {}",
            freeze.param_count(),
            net.param_count()
        )));
    }
    let offsets = net.block_offsets();
    for li in 0..net.layer_count() {
        let g = &grads.layers[li];
        let r = &lr.layers[li];
        let (w_off, b_off) = offsets[li];
        let layer = net.layer_mut(li);
        if g.d_mu_w.len() != layer.weights.len() || g.d_mu_b.len() != layer.biases.len() {
            return Err(UcbError::ShapeMismatch(format!(
                "gradient block {li} does not match layer shape"
            )));
        }
        for j in 0..layer.weights.len() {
            if freeze.is_frozen(w_off + j) {
                continue;
            }
            layer.weights.mu[j] -= r.mu_w[j] * g.d_mu_w[j];
            layer.weights.rho[j] -= r.rho_w[j] * g.d_rho_w[j];
        }
        for j in 0..layer.biases.len() {
            if freeze.is_frozen(b_off + j) {
                continue;
            }
            layer.biases.mu[j] -= r.mu_b[j] * g.d_mu_b[j];
            layer.biases.rho[j] -= r.rho_b[j] * g.d_rho_b[j];
        }
    }
    net.touch();
    Ok(())
}

// ---------------------------------------------------------------------------
// Uncertainty-scaled learning rates
// ---------------------------------------------------------------------------

/// How per-parameter importance is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaKind {
    /// Importance 1/sigma: certain parameters get small rates.
    InvSigma,
    /// Importance |mu|/sigma (signal-to-noise).
    Snr,
}

#[derive(Debug, Clone, Copy)]
pub struct ImportanceConfig {
    /// Scale mu rates by importance.
    pub regularize_mu: bool,
    /// Scale rho rates by importance too; off by default, leaving rho at the
    /// base rate.
    pub regularize_rho: bool,
    pub omega: OmegaKind,
    /// Rescale the current rates instead of restarting from the base rate at
    /// each boundary.
    pub compound: bool,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self { regularize_mu: true, regularize_rho: false, omega: OmegaKind::InvSigma, compound: false }
    }
}

/// Floor on importance when dividing, so zero-SNR parameters stay finite.
const OMEGA_FLOOR: f64 = 1e-12;

fn omega_value(kind: OmegaKind, mu: f64, sigma: f64) -> f64 {
    match kind {
        OmegaKind::InvSigma => 1.0 / sigma,
        OmegaKind::Snr => mu.abs() / sigma,
    }
}

/// Per-parameter signal-to-noise ratios of one layer, weights then biases.
pub fn layer_snr(layer: &BayesLinearLayer) -> Vec<f64> {
    layer
        .weights
        .mu
        .iter()
        .zip(layer.weights.rho.iter())
        .chain(layer.biases.mu.iter().zip(layer.biases.rho.iter()))
        .map(|(&m, &r)| m.abs() / softplus(r))
        .collect()
}

/// Rebuild the learning rates at a task boundary: rate = start / max(omega,
/// floor), where start is the base rate (default) or the current rate
/// (compounding variant).
pub fn ucb_lr_update(
    net: &BayesNetwork,
    base_lr: f64,
    cfg: &ImportanceConfig,
    current: Option<&PerParamLR>,
) -> Result<PerParamLR> {
    if !(base_lr > 0.0 && base_lr.is_finite()) {
        return Err(UcbError::InvalidArgument("base learning rate must be positive".into()));
    }
    if cfg.compound {
        if let Some(cur) = current {
            if cur.layers.len() != net.layer_count() {
                return Err(UcbError::ShapeMismatch(
                    "current learning rates do not match the network".into(),
                ));
            }
        }
    }
    let mut out = PerParamLR::uniform(net, base_lr, base_lr);
    for li in 0..net.layer_count() {
        let layer = net.layer(li);
        let start = |mu: bool, j: usize, weights: bool| -> f64 {
            if cfg.compound {
                if let Some(cur) = current {
                    let b = &cur.layers[li];
                    return match (mu, weights) {
                        (true, true) => b.mu_w[j],
                        (false, true) => b.rho_w[j],
                        (true, false) => b.mu_b[j],
                        (false, false) => b.rho_b[j],
                    };
                }
            }
            base_lr
        };
        let block = &mut out.layers[li];
        for j in 0..layer.weights.len() {
            let sigma = softplus(layer.weights.rho[j]);
            let om = omega_value(cfg.omega, layer.weights.mu[j], sigma);
            if cfg.regularize_mu {
                block.mu_w[j] = start(true, j, true) / om.max(OMEGA_FLOOR);
            } else {
                block.mu_w[j] = start(true, j, true);
            }
            if cfg.regularize_rho {
                block.rho_w[j] = start(false, j, true) / om.max(OMEGA_FLOOR);
            } else {
                block.rho_w[j] = start(false, j, true);
            }
        }
        for j in 0..layer.biases.len() {
            let sigma = softplus(layer.biases.rho[j]);
            let om = omega_value(cfg.omega, layer.biases.mu[j], sigma);
            if cfg.regularize_mu {
                block.mu_b[j] = start(true, j, false) / om.max(OMEGA_FLOOR);
            } else {
                block.mu_b[j] = start(true, j, false);
            }
            if cfg.regularize_rho {
                block.rho_b[j] = start(false, j, false) / om.max(OMEGA_FLOOR);
            } else {
                block.rho_b[j] = start(false, j, false);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Freeze map
// ---------------------------------------------------------------------------

/// Which task (1-based) permanently froze each parameter; 0 means trainable.
/// Indexing follows the canonical parameter order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMap {
    frozen_at: Vec<u32>,
    task_count: u32,
}

impl FreezeMap {
    /// A map with nothing frozen and no tasks recorded.
    pub fn none(param_count: usize) -> Self {
        Self { frozen_at: vec![0; param_count], task_count: 0 }
    }

    pub fn from_entries(frozen_at: Vec<u32>, task_count: u32) -> Result<Self> {
        if let Some(&bad) = frozen_at.iter().find(|&&v| v > task_count) {
            return Err(UcbError::InvalidArgument(format!(
                "entry {bad} exceeds task count {task_count}"
            )));
        }
        Ok(Self { frozen_at, task_count })
    }

    pub fn param_count(&self) -> usize {
        self.frozen_at.len()
    }

    pub fn task_count(&self) -> u32 {
        self.task_count
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen_at[idx] != 0
    }

    pub fn frozen_at(&self, idx: usize) -> u32 {
        self.frozen_at[idx]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen_at.iter().filter(|&&v| v != 0).count()
    }

    pub fn entries(&self) -> &[u32] {
        &self.frozen_at
    }

    pub fn set_frozen(&mut self, idx: usize, task: u32) {
        self.frozen_at[idx] = task;
        self.task_count = self.task_count.max(task);
    }

    /// Record that a task boundary passed even if nothing froze; the encoded
    /// entry width depends on the task count.
    pub fn note_task(&mut self, task: u32) {
        self.task_count = self.task_count.max(task);
    }
}

/// Bits needed per entry: ceil(log2(task_count + 1)).
fn bits_per_entry(task_count: u32) -> u8 {
    (32 - task_count.leading_zeros()) as u8
}

fn packed_len(bits: u8, count: usize) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn pack_lsb(values: &[u32], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(bits, values.len())];
    let mut cursor = 0usize;
    for &v in values {
        for b in 0..bits {
            if (v >> b) & 1 == 1 {
                out[cursor >> 3] |= 1 << (cursor & 7);
            }
            cursor += 1;
        }
    }
    out
}

fn unpack_lsb(bytes: &[u8], bits: u8, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for b in 0..bits {
            if (bytes[cursor >> 3] >> (cursor & 7)) & 1 == 1 {
                v |= 1 << b;
            }
            cursor += 1;
        }
        out.push(v);
    }
    out
}

/// Write the freeze map: magic "UCBM", version u32, task count u32,
/// parameter count u64, bits-per-entry u8, the entries packed LSB-first at
/// that width, and a CRC32 of the packed payload.
pub fn write_freeze_map(map: &FreezeMap, path: &Path) -> Result<()> {
    let bits = bits_per_entry(map.task_count);
    let payload = pack_lsb(&map.frozen_at, bits);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    let crc = hasher.finalize();

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MASK_MAGIC)?;
    w.write_u32::<LittleEndian>(MASK_VERSION)?;
    w.write_u32::<LittleEndian>(map.task_count)?;
    w.write_u64::<LittleEndian>(map.frozen_at.len() as u64)?;
    w.write_u8(bits)?;
    w.write_all(&payload)?;
    w.write_u32::<LittleEndian>(crc)?;
    w.flush()?;
    Ok(())
}

pub fn read_freeze_map(path: &Path) -> Result<FreezeMap> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| UcbError::Corruption("mask file truncated".into()))?;
    if &magic != MASK_MAGIC {
        return Err(UcbError::Format(format!(
            "bad mask magic {:02x?}, expected {:02x?}",
            magic, MASK_MAGIC
        )));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| UcbError::Corruption("mask file truncated".into()))?;
    if version != MASK_VERSION {
        return Err(UcbError::Format(format!("unsupported mask version {version}")));
    }
    let task_count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| UcbError::Corruption("mask file truncated".into()))?;
    let param_count = r
        .read_u64::<LittleEndian>()
        .map_err(|_| UcbError::Corruption("mask file truncated".into()))? as usize;
    let bits = r.read_u8().map_err(|_| UcbError::Corruption("mask file truncated".into()))?;
    if bits != bits_per_entry(task_count) {
        return Err(UcbError::Format(format!(
            "mask declares {bits} bits per entry, task count {task_count} requires {}",
            bits_per_entry(task_count)
        )));
    }
    let mut payload = vec![0u8; packed_len(bits, param_count)];
    r.read_exact(&mut payload)
        .map_err(|_| UcbError::Corruption("mask payload truncated".into()))?;
    let stored_crc = r
        .read_u32::<LittleEndian>()
        .map_err(|_| UcbError::Corruption("mask checksum missing".into()))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(UcbError::Corruption("mask file has trailing bytes".into()));
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    if hasher.finalize() != stored_crc {
        return Err(UcbError::Corruption("mask checksum mismatch".into()));
    }
    let entries = unpack_lsb(&payload, bits, param_count);
    if let Some(&bad) = entries.iter().find(|&&v| v > task_count) {
        return Err(UcbError::Corruption(format!(
            "mask entry {bad} exceeds task count {task_count}"
        )));
    }
    FreezeMap::from_entries(entries, task_count)
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// Planned changes for one layer, in local parameter indices (weights
/// row-major, then biases).
#[derive(Debug, Clone)]
pub struct LayerPlan {
    /// Global layer index.
    pub layer: usize,
    pub freeze_local: Vec<usize>,
    pub release_local: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PrunePlan {
    pub ratio: f64,
    pub layers: Vec<LayerPlan>,
}

impl PrunePlan {
    pub fn freeze_count(&self) -> usize {
        self.layers.iter().map(|l| l.freeze_local.len()).sum()
    }

    pub fn release_count(&self) -> usize {
        self.layers.iter().map(|l| l.release_local.len()).sum()
    }
}

/// How many of `free_count` parameters survive a prune at `ratio` (the
/// released fraction): round((1 - ratio) * F), half away from zero.
pub fn freeze_count_for(free_count: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * free_count as f64).round() as usize
}

/// Pick which of the given (index, snr) entries to freeze at `ratio`:
/// the top round((1-ratio)*F) by SNR, ties broken by ascending index.
pub fn select_top_snr(entries: &[(usize, f64)], ratio: f64) -> Vec<usize> {
    let k = freeze_count_for(entries.len(), ratio);
    let mut ranked: Vec<(usize, f64)> = entries.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = ranked.into_iter().take(k).map(|(i, _)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// Plan a prune at `ratio` over the given layers (the trunk plus the active
/// head): per layer, rank the still-trainable parameters by SNR, freeze the
/// top (1 - ratio) fraction, release the rest.
pub fn plan_prune(
    net: &BayesNetwork,
    map: &FreezeMap,
    scoped_layers: &[usize],
    ratio: f64,
) -> Result<PrunePlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(UcbError::InvalidArgument(format!(
            "prune ratio {ratio} outside [0, 1]"
        )));
    }
    if map.param_count() != net.param_count() {
        return Err(UcbError::ShapeMismatch(
            "freeze map does not match the network".into(),
        ));
    }
    let offsets = net.block_offsets();
    let mut layers = Vec::with_capacity(scoped_layers.len());
    for &li in scoped_layers {
        let layer = net.layer(li);
        let snr = layer_snr(layer);
        let (w_off, _) = offsets[li];
        let free: Vec<(usize, f64)> = (0..layer.param_count())
            .filter(|&j| !map.is_frozen(w_off + j))
            .map(|j| (j, snr[j]))
            .collect();
        let freeze_local = select_top_snr(&free, ratio);
        let release_local: Vec<usize> = free
            .iter()
            .map(|&(j, _)| j)
            .filter(|j| freeze_local.binary_search(j).is_err())
            .collect();
        layers.push(LayerPlan { layer: li, freeze_local, release_local });
    }
    Ok(PrunePlan { ratio, layers })
}

/// Execute a plan at the end of `task`: planned parameters freeze with that
/// task id; released ones reset to mu = 0, rho = -3 and stay trainable.
pub fn apply_prune(net: &mut BayesNetwork, map: &mut FreezeMap, plan: &PrunePlan, task: u32) {
    let offsets = net.block_offsets();
    for lp in &plan.layers {
        let (w_off, _) = offsets[lp.layer];
        for &j in &lp.freeze_local {
            map.set_frozen(w_off + j, task);
        }
        let layer = net.layer_mut(lp.layer);
        let wn = layer.weights.len();
        for &j in &lp.release_local {
            if j < wn {
                layer.weights.mu[j] = 0.0;
                layer.weights.rho[j] = RELEASE_RHO;
            } else {
                layer.biases.mu[j - wn] = 0.0;
                layer.biases.rho[j - wn] = RELEASE_RHO;
            }
        }
    }
    map.note_task(task);
    net.touch();
}

/// Inference mask keeping only parameters frozen by tasks 1..=task; all
/// other coordinates (still trainable, or frozen later) are zeroed. Layers
/// are covered in full, so the mask works with any head scope.
pub fn mask_through(net: &BayesNetwork, map: &FreezeMap, task: u32) -> Result<NetMask> {
    if map.param_count() != net.param_count() {
        return Err(UcbError::ShapeMismatch(
            "freeze map does not match the network".into(),
        ));
    }
    let offsets = net.block_offsets();
    let layers = (0..net.layer_count())
        .map(|li| {
            let layer = net.layer(li);
            let (w_off, b_off) = offsets[li];
            let keep = |g: usize| {
                let f = map.frozen_at(g);
                if f != 0 && f <= task {
                    1.0
                } else {
                    0.0
                }
            };
            LayerMaskValues {
                w: (0..layer.weights.len()).map(|j| keep(w_off + j)).collect(),
                b: (0..layer.biases.len()).map(|j| keep(b_off + j)).collect(),
            }
        })
        .collect();
    Ok(NetMask { layers })
}

/// Mask for evaluating a candidate prune before applying it: keeps
/// everything already frozen plus the parameters the plan would freeze.
pub fn candidate_mask(net: &BayesNetwork, map: &FreezeMap, plan: &PrunePlan) -> Result<NetMask> {
    if map.param_count() != net.param_count() {
        return Err(UcbError::ShapeMismatch(
            "freeze map does not match the network".into(),
        ));
    }
    let offsets = net.block_offsets();
    let mut layers: Vec<LayerMaskValues> = (0..net.layer_count())
        .map(|li| {
            let layer = net.layer(li);
            let (w_off, b_off) = offsets[li];
            LayerMaskValues {
                w: (0..layer.weights.len())
                    .map(|j| if map.is_frozen(w_off + j) { 1.0 } else { 0.0 })
                    .collect(),
                b: (0..layer.biases.len())
                    .map(|j| if map.is_frozen(b_off + j) { 1.0 } else { 0.0 })
                    .collect(),
            }
        })
        .collect();
    for lp in &plan.layers {
        let wn = net.layer(lp.layer).weights.len();
        for &j in &lp.freeze_local {
            if j < wn {
                layers[lp.layer].w[j] = 1.0;
            } else {
                layers[lp.layer].b[j - wn] = 1.0;
            }
        }
    }
    Ok(NetMask { layers })
}

/// Choose a prune ratio from candidate (ratio, accuracy drop) pairs: the
/// largest ratio whose drop stays within `threshold` percentage points; if
/// none qualifies, the smallest drop, ties going to the larger ratio.
pub fn select_prune_ratio(candidates: &[(f64, f64)], threshold: f64) -> Result<f64> {
    if candidates.is_empty() {
        return Err(UcbError::InvalidArgument("no prune candidates given".into()));
    }
    let mut best_within: Option<f64> = None;
    for &(ratio, drop) in candidates {
        if drop <= threshold && best_within.map_or(true, |b| ratio > b) {
            best_within = Some(ratio);
        }
    }
    if let Some(r) = best_within {
        return Ok(r);
    }
    let mut best = candidates[0];
    for &(ratio, drop) in &candidates[1..] {
        if drop < best.1 || (drop == best.1 && ratio > best.0) {
            best = (ratio, drop);
        }
    }
    Ok(best.0)
}

/// The candidate released fractions tried at each boundary, ascending.
pub const PRUNE_RATIO_CANDIDATES: [f64; 7] = [0.50, 0.60, 0.70, 0.80, 0.90, 0.95, 1.00];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::GradientSet;
    use crate::network::{HeadLayout, HeadSpec, InitConfig, NetworkSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_net() -> BayesNetwork {
        // 1 input, no hidden layers, one 1-class head: exactly one weight and
        // one bias.
        let spec = NetworkSpec {
            input_dim: 1,
            hidden_dims: vec![],
            heads: HeadLayout::SingleHead { total_classes: 1, task_ranges: vec![(0, 1)] },
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        BayesNetwork::init(spec, &InitConfig::default(), &mut rng).unwrap()
    }

    fn two_head_net(seed: u64) -> BayesNetwork {
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![3],
            heads: HeadLayout::MultiHead(vec![
                HeadSpec { task_id: 1, class_count: 2 },
                HeadSpec { task_id: 2, class_count: 2 },
            ]),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        BayesNetwork::init(spec, &InitConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn sgd_scalar_update_is_exact() {
        let mut net = tiny_net();
        net.layer_mut(0).weights.mu[0] = 1.0;
        let mut grads = GradientSet::zeros_like(&net);
        grads.layers[0].d_mu_w[0] = 2.0;
        let lr = PerParamLR::uniform(&net, 0.1, 0.1);
        let freeze = FreezeMap::none(net.param_count());
        sgd_step(&mut net, &grads, &lr, &freeze).unwrap();
        // 1.0 - 0.1 * 2.0 must land on 0.8 to the last bit.
        assert_eq!(net.layer(0).weights.mu[0].to_bits(), 0.8f64.to_bits());
    }

    #[test]
    fn sgd_skips_frozen_parameters_bitwise() {
        let mut net = two_head_net(1);
        let before_w = net.layer(0).weights.mu[0];
        let before_r = net.layer(0).weights.rho[0];
        let mut grads = GradientSet::zeros_like(&net);
        for b in &mut grads.layers {
            for v in b.d_mu_w.iter_mut().chain(b.d_rho_w.iter_mut()) {
                *v = 1.0;
            }
        }
        let lr = PerParamLR::uniform(&net, 0.05, 0.05);
        let mut freeze = FreezeMap::none(net.param_count());
        freeze.set_frozen(0, 1); // first weight of layer 0
        sgd_step(&mut net, &grads, &lr, &freeze).unwrap();
        assert_eq!(net.layer(0).weights.mu[0].to_bits(), before_w.to_bits());
        assert_eq!(net.layer(0).weights.rho[0].to_bits(), before_r.to_bits());
        // A free neighbor did move.
        assert_ne!(net.layer(0).weights.mu[1].to_bits(), before_w.to_bits());
    }

    #[test]
    fn sgd_bumps_stamp() {
        let mut net = tiny_net();
        let before = net.stamp();
        let grads = GradientSet::zeros_like(&net);
        let lr = PerParamLR::uniform(&net, 0.1, 0.1);
        let freeze = FreezeMap::none(net.param_count());
        sgd_step(&mut net, &grads, &lr, &freeze).unwrap();
        assert!(net.stamp() > before);
    }

    #[test]
    fn inv_sigma_rates_scale_mu_only() {
        let mut net = tiny_net();
        // sigma = 0.5 for the weight, sigma = 1 for the bias.
        net.layer_mut(0).weights.rho[0] = (0.5f64.exp() - 1.0).ln();
        net.layer_mut(0).biases.rho[0] = (1.0f64.exp() - 1.0).ln();
        let lr = ucb_lr_update(&net, 0.01, &ImportanceConfig::default(), None).unwrap();
        assert_relative_eq!(lr.layers[0].mu_w[0], 0.005, max_relative = 1e-12);
        assert_relative_eq!(lr.layers[0].mu_b[0], 0.01, max_relative = 1e-12);
        // rho rates stay at base.
        assert_eq!(lr.layers[0].rho_w[0], 0.01);
        assert_eq!(lr.layers[0].rho_b[0], 0.01);
    }

    #[test]
    fn snr_rates_guard_zero_mu() {
        let mut net = tiny_net();
        net.layer_mut(0).weights.mu[0] = -0.2;
        net.layer_mut(0).weights.rho[0] = (0.1f64.exp() - 1.0).ln();
        net.layer_mut(0).biases.mu[0] = 0.0;
        let cfg = ImportanceConfig { omega: OmegaKind::Snr, ..ImportanceConfig::default() };
        let lr = ucb_lr_update(&net, 0.01, &cfg, None).unwrap();
        // omega = |-0.2| / 0.1 = 2.
        assert_relative_eq!(lr.layers[0].mu_w[0], 0.005, max_relative = 1e-10);
        // omega = 0 hits the floor instead of dividing by zero.
        assert!(lr.layers[0].mu_b[0].is_finite());
        assert_relative_eq!(lr.layers[0].mu_b[0], 0.01 / 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn fresh_rates_do_not_compound_but_the_variant_does() {
        let mut net = tiny_net();
        net.layer_mut(0).weights.rho[0] = (0.5f64.exp() - 1.0).ln();
        let fresh_cfg = ImportanceConfig::default();
        let first = ucb_lr_update(&net, 0.01, &fresh_cfg, None).unwrap();
        let second = ucb_lr_update(&net, 0.01, &fresh_cfg, Some(&first)).unwrap();
        assert_relative_eq!(second.layers[0].mu_w[0], 0.005, max_relative = 1e-12);

        let compound_cfg = ImportanceConfig { compound: true, ..ImportanceConfig::default() };
        let second_c = ucb_lr_update(&net, 0.01, &compound_cfg, Some(&first)).unwrap();
        assert_relative_eq!(second_c.layers[0].mu_w[0], 0.0025, max_relative = 1e-12);
    }

    #[test]
    fn plateau_decay_scales_everything() {
        let net = two_head_net(2);
        let mut lr = PerParamLR::uniform(&net, 0.01, 0.01);
        lr.scale_all(0.3);
        assert_relative_eq!(lr.layers[1].mu_w[3], 0.003, max_relative = 1e-15);
        assert_relative_eq!(lr.layers[2].rho_b[0], 0.003, max_relative = 1e-15);
    }

    #[test]
    fn snr_example_values() {
        let mut net = tiny_net();
        net.layer_mut(0).weights.mu[0] = -0.2;
        net.layer_mut(0).weights.rho[0] = (0.1f64.exp() - 1.0).ln();
        net.layer_mut(0).biases.mu[0] = 0.0;
        let snr = layer_snr(net.layer(0));
        assert_relative_eq!(snr[0], 2.0, max_relative = 1e-10);
        assert_eq!(snr[1], 0.0);
    }

    #[test]
    fn top_snr_selection_example() {
        let entries = [(0, 3.0), (1, 1.0), (2, 2.0), (3, 0.5)];
        let chosen = select_top_snr(&entries, 0.5);
        assert_eq!(chosen, vec![0, 2]);
    }

    #[test]
    fn top_snr_ties_break_by_ascending_index() {
        let entries = [(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)];
        assert_eq!(select_top_snr(&entries, 0.5), vec![0, 1]);
        assert_eq!(select_top_snr(&entries, 0.75), vec![0]);
    }

    #[test]
    fn freeze_count_rounds_half_away_from_zero() {
        assert_eq!(freeze_count_for(4, 0.5), 2);
        assert_eq!(freeze_count_for(5, 0.7), 2); // 1.5 rounds up
        assert_eq!(freeze_count_for(10, 1.0), 0);
        assert_eq!(freeze_count_for(10, 0.0), 10);
    }

    #[test]
    fn select_prune_ratio_examples() {
        // Largest ratio within the threshold wins.
        let c = [(0.5, 0.2), (0.8, 0.8), (0.9, 1.5)];
        assert_eq!(select_prune_ratio(&c, 1.0).unwrap(), 0.8);
        // All drops zero: the largest ratio qualifies.
        let c = [(0.5, 0.0), (0.8, 0.0), (0.9, 0.0)];
        assert_eq!(select_prune_ratio(&c, 1.0).unwrap(), 0.9);
        // None qualify: smallest drop.
        let c = [(0.5, 2.0), (0.8, 3.0), (0.9, 5.0)];
        assert_eq!(select_prune_ratio(&c, 1.0).unwrap(), 0.5);
        // Equal smallest drops: larger ratio.
        let c = [(0.5, 2.0), (0.8, 2.0)];
        assert_eq!(select_prune_ratio(&c, 1.0).unwrap(), 0.8);
        assert!(select_prune_ratio(&[], 1.0).is_err());
    }

    #[test]
    fn prune_freezes_top_and_releases_rest() {
        let mut net = two_head_net(3);
        let mut map = FreezeMap::none(net.param_count());
        let scoped = net.scoped_layers(0); // trunk + head 1
        let plan = plan_prune(&net, &map, &scoped, 0.5).unwrap();
        let planned_freeze = plan.freeze_count();
        let planned_release = plan.release_count();
        assert!(planned_freeze > 0 && planned_release > 0);
        apply_prune(&mut net, &mut map, &plan, 1);
        assert_eq!(map.frozen_count(), planned_freeze);
        assert_eq!(map.task_count(), 1);
        // Released parameters are reset.
        let wn = net.layer(0).weights.len();
        for lp in &plan.layers {
            for &j in &lp.release_local {
                let layer = net.layer(lp.layer);
                let (mu, rho) = if j < wn && lp.layer == 0 {
                    (layer.weights.mu[j], layer.weights.rho[j])
                } else {
                    let wn_l = layer.weights.len();
                    if j < wn_l {
                        (layer.weights.mu[j], layer.weights.rho[j])
                    } else {
                        (layer.biases.mu[j - wn_l], layer.biases.rho[j - wn_l])
                    }
                };
                assert_eq!(mu, 0.0);
                assert_eq!(rho, RELEASE_RHO);
            }
        }
        // The inactive head (layer 2) was left alone entirely.
        let offsets = net.block_offsets();
        let (w_off, _) = offsets[2];
        for j in 0..net.layer(2).param_count() {
            assert!(!map.is_frozen(w_off + j));
        }
    }

    #[test]
    fn second_prune_only_touches_free_parameters() {
        let mut net = two_head_net(4);
        let mut map = FreezeMap::none(net.param_count());
        let scoped = net.scoped_layers(0);
        let plan1 = plan_prune(&net, &map, &scoped, 0.5).unwrap();
        apply_prune(&mut net, &mut map, &plan1, 1);
        let frozen_after_1 = map.frozen_count();
        let scoped2 = net.scoped_layers(1);
        let plan2 = plan_prune(&net, &map, &scoped2, 0.5).unwrap();
        // Nothing already frozen may appear in the new plan.
        let offsets = net.block_offsets();
        for lp in &plan2.layers {
            let (w_off, _) = offsets[lp.layer];
            for &j in lp.freeze_local.iter().chain(lp.release_local.iter()) {
                assert!(!map.is_frozen(w_off + j));
            }
        }
        apply_prune(&mut net, &mut map, &plan2, 2);
        assert!(map.frozen_count() > frozen_after_1);
        for i in 0..map.param_count() {
            assert!(map.frozen_at(i) <= 2);
        }
    }

    #[test]
    fn mask_through_keeps_only_early_freezes() {
        let net = two_head_net(5);
        let mut map = FreezeMap::none(net.param_count());
        map.set_frozen(0, 1);
        map.set_frozen(1, 2);
        let m1 = mask_through(&net, &map, 1).unwrap();
        assert_eq!(m1.layers[0].w[0], 1.0);
        assert_eq!(m1.layers[0].w[1], 0.0);
        assert_eq!(m1.layers[0].w[2], 0.0);
        let m2 = mask_through(&net, &map, 2).unwrap();
        assert_eq!(m2.layers[0].w[0], 1.0);
        assert_eq!(m2.layers[0].w[1], 1.0);
        assert_eq!(m2.layers[0].w[2], 0.0);
    }

    #[test]
    fn candidate_mask_is_frozen_plus_plan() {
        let net = two_head_net(6);
        let mut map = FreezeMap::none(net.param_count());
        map.set_frozen(2, 1);
        let plan = PrunePlan {
            ratio: 0.5,
            layers: vec![LayerPlan { layer: 0, freeze_local: vec![0], release_local: vec![1] }],
        };
        let m = candidate_mask(&net, &map, &plan).unwrap();
        assert_eq!(m.layers[0].w[0], 1.0); // planned
        assert_eq!(m.layers[0].w[1], 0.0); // released
        assert_eq!(m.layers[0].w[2], 1.0); // already frozen
        assert_eq!(m.layers[0].w[3], 0.0);
    }

    #[test]
    fn mask_entry_widths_match_task_count() {
        assert_eq!(bits_per_entry(0), 0);
        assert_eq!(bits_per_entry(1), 1);
        assert_eq!(bits_per_entry(3), 2);
        assert_eq!(bits_per_entry(7), 3);
        assert_eq!(bits_per_entry(8), 4);
    }

    #[test]
    fn freeze_map_file_roundtrip_and_size_budget() {
        let dir = tempfile::tempdir().unwrap();
        for (n, params) in [(1u32, 13usize), (3, 29), (7, 64)] {
            let entries: Vec<u32> = (0..params).map(|i| (i as u32) % (n + 1)).collect();
            let map = FreezeMap::from_entries(entries, n).unwrap();
            let path = dir.path().join(format!("mask_{n}.ucbm"));
            write_freeze_map(&map, &path).unwrap();
            let bits = bits_per_entry(n) as usize;
            let budget = (bits * params).div_ceil(8) + 21 + 4;
            let size = std::fs::metadata(&path).unwrap().len() as usize;
            assert!(size <= budget, "n={n}: {size} bytes exceeds {budget}");
            let back = read_freeze_map(&path).unwrap();
            assert_eq!(back, map);
        }
    }

    #[test]
    fn freeze_map_file_rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        let map = FreezeMap::from_entries(vec![0, 1, 2, 3, 1, 0, 2], 3).unwrap();
        let path = dir.path().join("mask.ucbm");
        write_freeze_map(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.ucbm");
        let mut b = bytes.clone();
        b[0] = b'Z';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(read_freeze_map(&bad_magic), Err(UcbError::Format(_))));

        let flipped = dir.path().join("flip.ucbm");
        let mut b = bytes.clone();
        let payload_start = 21;
        b[payload_start] ^= 0x01;
        std::fs::write(&flipped, &b).unwrap();
        assert!(matches!(read_freeze_map(&flipped), Err(UcbError::Corruption(_))));

        let truncated = dir.path().join("trunc.ucbm");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_freeze_map(&truncated), Err(UcbError::Corruption(_))));

        let trailing = dir.path().join("trail.ucbm");
        let mut b = bytes.clone();
        b.push(0);
        std::fs::write(&trailing, &b).unwrap();
        assert!(matches!(read_freeze_map(&trailing), Err(UcbError::Corruption(_))));
    }

    #[test]
    fn freeze_map_file_rejects_out_of_range_entry() {
        // Hand-build a file claiming task_count = 2 (2-bit entries) holding
        // the value 3.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("range.ucbm");
        let payload = pack_lsb(&[3, 0], 2);
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&payload);
        let crc = hasher.finalize();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"UCBM");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.push(2);
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_freeze_map(&path), Err(UcbError::Corruption(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pack_unpack_roundtrip(
            n in 1u32..9,
            values in proptest::collection::vec(0u32..9, 1..80)
        ) {
            let entries: Vec<u32> = values.iter().map(|&v| v % (n + 1)).collect();
            let bits = bits_per_entry(n);
            let packed = pack_lsb(&entries, bits);
            let back = unpack_lsb(&packed, bits, entries.len());
            prop_assert_eq!(back, entries);
        }

        #[test]
        fn freeze_map_roundtrip_property(
            n in 1u32..9,
            values in proptest::collection::vec(0u32..9, 1..60)
        ) {
            let entries: Vec<u32> = values.iter().map(|&v| v % (n + 1)).collect();
            let map = FreezeMap::from_entries(entries, n).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ucbm");
            write_freeze_map(&map, &path).unwrap();
            prop_assert_eq!(read_freeze_map(&path).unwrap(), map);
        }

        #[test]
        fn selection_size_matches_rounding(ratio in 0.0f64..=1.0, f in 0usize..40) {
            let entries: Vec<(usize, f64)> = (0..f).map(|i| (i, i as f64 * 0.1)).collect();
            let chosen = select_top_snr(&entries, ratio);
            prop_assert_eq!(chosen.len(), freeze_count_for(f, ratio));
        }
    }
}
