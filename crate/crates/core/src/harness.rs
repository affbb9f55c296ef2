//! Sequential task training with the full set of continual-learning modes.
//!
//! [`run_sequence`] trains a network through a task sequence and fills the
//! accuracy matrix. What happens at task boundaries depends on the mode:
//!
//! * `ucb`      - per-parameter learning rates rebuilt from uncertainty
//! * `ucb_p`    - prune: freeze high signal-to-noise weights, release the rest
//! * `bbb_ft`   - plain fine-tuning, uniform rates every task
//! * `bbb_fe`   - trunk frozen after the first task, only heads keep training
//! * `bbb_jt`   - joint training on the union of all tasks (upper reference)
//! * `ord_*`    - the same three baselines on an ordinary (point-weight)
//!   network: no sampling, likelihood-only loss, widened to match the
//!   Bayesian trainable-parameter budget
//!
//! Within a task, plain SGD runs on shuffled minibatches; a validation-loss
//! plateau first decays the learning rates and on its second trigger ends
//! the task. Every random stream (init, shuffling, MC draws, evaluation)
//! derives from the run seed, so a run is reproducible bit for bit; in
//! particular, evaluation seeds depend only on the evaluated task and batch
//! index, never on when the evaluation happens. That makes frozen-extractor
//! backward transfer exactly zero and lets pruned-mask evaluations reproduce
//! recorded accuracies exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{mix_seed, Dataset, TaskData, TaskSequence};
use crate::error::{Result, UcbError};
use crate::grad::{backward, masked_loss, GradientSet, TermMask};
use crate::metrics::{bwt_acc, write_metrics_json, write_rmatrix_csv, RMatrix, RunMetrics};
use crate::network::{
    nll_mean, write_checkpoint, BayesNetwork, HeadLayout, HeadScope, HeadSpec, InitConfig,
    LayerEps, NetEps, NetMask, NetworkSpec, PredictMode,
};
use crate::optim::{
    apply_prune, candidate_mask, mask_through, plan_prune, select_prune_ratio, sgd_step,
    ucb_lr_update, write_freeze_map, FreezeMap, ImportanceConfig, OmegaKind, PerParamLR,
    PRUNE_RATIO_CANDIDATES,
};
use crate::variational::ScaleMixturePrior;

// Seed-derivation tags. Evaluation seeds must depend only on the evaluated
// task and batch index so repeated evaluations of unchanged parameters are
// bit-identical.
const SEED_INIT: u64 = 0x01;
const SEED_TRAIN: u64 = 0x7A50;
const SEED_EVAL: u64 = 0xE7A0;

const EVAL_BATCH: usize = 512;

/// Continual-learning strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ucb,
    UcbP,
    BbbFt,
    BbbFe,
    BbbJt,
    OrdFt,
    OrdFe,
    OrdJt,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Ucb,
        Mode::UcbP,
        Mode::BbbFt,
        Mode::BbbFe,
        Mode::BbbJt,
        Mode::OrdFt,
        Mode::OrdFe,
        Mode::OrdJt,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                UcbError::InvalidArgument(format!(
                    "unknown mode {s:?}, expected one of {}",
                    names.join(", ")
                ))
            })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ucb => "ucb",
            Mode::UcbP => "ucb_p",
            Mode::BbbFt => "bbb_ft",
            Mode::BbbFe => "bbb_fe",
            Mode::BbbJt => "bbb_jt",
            Mode::OrdFt => "ord_ft",
            Mode::OrdFe => "ord_fe",
            Mode::OrdJt => "ord_jt",
        }
    }

    /// Ordinary point-weight baseline: no sampling, likelihood-only loss.
    pub fn is_ordinary(&self) -> bool {
        matches!(self, Mode::OrdFt | Mode::OrdFe | Mode::OrdJt)
    }

    /// Trains on the union of all tasks at once.
    pub fn is_joint(&self) -> bool {
        matches!(self, Mode::BbbJt | Mode::OrdJt)
    }

    /// Keeps a freeze map worth persisting.
    fn writes_masks(&self) -> bool {
        matches!(self, Mode::UcbP | Mode::BbbFe | Mode::OrdFe)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Output layer arrangement for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Multi,
    Single,
}

impl HeadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multi_head" => Ok(HeadMode::Multi),
            "single_head" => Ok(HeadMode::Single),
            other => Err(UcbError::InvalidArgument(format!(
                "unknown head mode {other:?}, expected multi_head or single_head"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadMode::Multi => "multi_head",
            HeadMode::Single => "single_head",
        }
    }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    pub head_mode: HeadMode,
    pub hidden_dims: Vec<usize>,
    pub prior: ScaleMixturePrior,
    pub base_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// MC draws per training minibatch.
    pub train_draws: usize,
    /// MC draws per evaluation batch.
    pub eval_draws: usize,
    /// Average the summed-over-draws gradient by the draw count instead of
    /// leaving the plain sum.
    pub average_draws: bool,
    pub seed: u64,
    /// A validation-loss improvement below this is a plateau epoch.
    pub plateau_tolerance: f64,
    /// Consecutive plateau epochs before acting.
    pub plateau_patience: usize,
    /// Multiplier applied to all rates on the first plateau; the second
    /// plateau ends the task.
    pub lr_decay: f64,
    /// Rescale current rates at boundaries instead of restarting from base.
    pub compound_lr: bool,
    pub omega: OmegaKind,
    /// Scale rho rates by importance too (off: rho stays at the base rate).
    pub regularize_rho: bool,
    /// Accepted post-prune accuracy drop, in percentage points.
    pub prune_threshold: f64,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ucb,
            head_mode: HeadMode::Multi,
            hidden_dims: vec![1200, 1200],
            prior: ScaleMixturePrior::new(0.5, 1.0, (-6.0f64).exp())
                .expect("default prior parameters are valid"),
            base_lr: 0.01,
            batch_size: 64,
            max_epochs: 50,
            train_draws: 10,
            eval_draws: 10,
            average_draws: false,
            seed: 1,
            plateau_tolerance: 1e-3,
            plateau_patience: 5,
            lr_decay: 0.3,
            compound_lr: false,
            omega: OmegaKind::InvSigma,
            regularize_rho: false,
            prune_threshold: 1.0,
            init: InitConfig::default(),
        }
    }
}

/// Per-task training record. Joint training produces a single record with
/// `task_id` 0.
#[derive(Debug, Clone)]
pub struct TaskStats {
    pub task_id: usize,
    pub epochs: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Epochs (0-based) at which the plateau decayed the rates.
    pub decay_epochs: Vec<usize>,
}

/// What pruning did at one task boundary. Drops are percentage points of
/// the current task's test accuracy relative to the live network.
#[derive(Debug, Clone)]
pub struct PruneReport {
    pub task_id: usize,
    pub ratio: f64,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub candidates: Vec<(f64, f64)>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub rmatrix: RMatrix,
    /// Same layout as `rmatrix` on the validation splits; cells stay empty
    /// for tasks without validation data. Used as the tuning objective.
    pub val_matrix: RMatrix,
    pub metrics: RunMetrics,
    pub task_stats: Vec<TaskStats>,
    pub prune_reports: Vec<PruneReport>,
}

// ---------------------------------------------------------------------------
// Network sizing
// ---------------------------------------------------------------------------

fn scalar_count(input_dim: usize, hidden: &[usize], head_dims: &[usize]) -> usize {
    let mut total = 0;
    let mut prev = input_dim;
    for &h in hidden {
        total += prev * h + h;
        prev = h;
    }
    for &c in head_dims {
        total += prev * c + c;
    }
    total
}

/// Hidden widths for an ordinary network whose single-scalar parameter count
/// matches the Bayesian network's trainable scalars (two per weight) on the
/// same trunk shape. Scaling every hidden width by s makes the count
/// quadratic in s; solve and round.
pub fn matched_hidden_dims(input_dim: usize, hidden: &[usize], head_dims: &[usize]) -> Vec<usize> {
    if hidden.is_empty() {
        return Vec::new();
    }
    let target = (2 * scalar_count(input_dim, hidden, head_dims)) as f64;
    let head_total: f64 = head_dims.iter().sum::<usize>() as f64;
    let mut a = 0.0;
    for w in hidden.windows(2) {
        a += (w[0] * w[1]) as f64;
    }
    let b = (input_dim * hidden[0]) as f64
        + hidden.iter().sum::<usize>() as f64
        + hidden[hidden.len() - 1] as f64 * head_total;
    let c = head_total;
    let s = if a > 0.0 {
        (-b + (b * b + 4.0 * a * (target - c)).sqrt()) / (2.0 * a)
    } else {
        (target - c) / b
    };
    hidden
        .iter()
        .map(|&h| ((h as f64 * s).round() as usize).max(1))
        .collect()
}

fn network_spec_for(cfg: &TrainConfig, seq: &TaskSequence) -> Result<NetworkSpec> {
    let head_dims: Vec<usize> = match cfg.head_mode {
        HeadMode::Multi => seq
            .tasks
            .iter()
            .map(|t| t.class_range.1 - t.class_range.0)
            .collect(),
        HeadMode::Single => vec![seq.total_classes()],
    };
    let hidden = if cfg.mode.is_ordinary() {
        matched_hidden_dims(seq.input_dim(), &cfg.hidden_dims, &head_dims)
    } else {
        cfg.hidden_dims.clone()
    };
    let heads = match cfg.head_mode {
        HeadMode::Multi => HeadLayout::MultiHead(
            seq.tasks
                .iter()
                .map(|t| HeadSpec {
                    task_id: t.task_id,
                    class_count: t.class_range.1 - t.class_range.0,
                })
                .collect(),
        ),
        HeadMode::Single => HeadLayout::SingleHead {
            total_classes: seq.total_classes(),
            task_ranges: seq.tasks.iter().map(|t| t.class_range).collect(),
        },
    };
    let spec = NetworkSpec { input_dim: seq.input_dim(), hidden_dims: hidden, heads };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn eval_seed(cfg_seed: u64, task_id: usize, batch_idx: usize) -> u64 {
    mix_seed(mix_seed(cfg_seed, SEED_EVAL + task_id as u64), batch_idx as u64)
}

/// Accuracy (percent) on one split of one task. Single-head networks compare
/// global class indices, multi-head networks local ones.
fn eval_split(
    net: &BayesNetwork,
    cfg: &TrainConfig,
    data: &Dataset,
    task_id: usize,
    class_lo: usize,
    mask: Option<&NetMask>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(UcbError::InvalidArgument(format!(
            "task {task_id} has no examples to evaluate"
        )));
    }
    let single_head = matches!(net.spec().heads, HeadLayout::SingleHead { .. });
    let offset = if single_head { class_lo } else { 0 };
    let mut correct = 0usize;
    for (b, start) in (0..data.len()).step_by(EVAL_BATCH).enumerate() {
        let end = (start + EVAL_BATCH).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.select(&idx);
        let mode = if cfg.mode.is_ordinary() {
            PredictMode::MeanWeights
        } else {
            PredictMode::McAverage { n: cfg.eval_draws, seed: eval_seed(cfg.seed, task_id, b) }
        };
        let preds = net.predict(&sub.images, mode, Some(task_id), mask)?;
        correct += preds
            .iter()
            .zip(&sub.labels)
            .filter(|(&p, &l)| p == offset + l)
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Accuracy with the argmax unrestricted over every class the network knows,
/// on the union of all test sets. Only meaningful for single-head networks.
/// Shares the per-task evaluation seeds, so each example sees the very same
/// forward pass as its task-scoped evaluation.
pub fn generalized_accuracy(
    net: &BayesNetwork,
    cfg: &TrainConfig,
    seq: &TaskSequence,
) -> Result<f64> {
    if matches!(net.spec().heads, HeadLayout::MultiHead(_)) {
        return Err(UcbError::InvalidArgument(
            "generalized accuracy needs a single-head network".into(),
        ));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for task in &seq.tasks {
        total += task.test.len();
        for (b, start) in (0..task.test.len()).step_by(EVAL_BATCH).enumerate() {
            let end = (start + EVAL_BATCH).min(task.test.len());
            let idx: Vec<usize> = (start..end).collect();
            let sub = task.test.select(&idx);
            let mode = if cfg.mode.is_ordinary() {
                PredictMode::MeanWeights
            } else {
                PredictMode::McAverage {
                    n: cfg.eval_draws,
                    seed: eval_seed(cfg.seed, task.task_id, b),
                }
            };
            let preds = net.predict(&sub.images, mode, None, None)?;
            correct += preds
                .iter()
                .zip(&sub.labels)
                .filter(|(&p, &l)| p == task.class_range.0 + l)
                .count();
        }
    }
    if total == 0 {
        return Err(UcbError::InvalidArgument("no test examples".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Mean cross-entropy per example at the posterior means; None when the
/// split is empty. This is the quantity the plateau controller watches.
fn mean_weight_nll(
    net: &BayesNetwork,
    data: &Dataset,
    task_id: usize,
    label_offset: usize,
) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.select(&idx);
        let labels: Vec<usize> = sub.labels.iter().map(|&l| l + label_offset).collect();
        let logits = net.forward_mean_logits(&sub.images, HeadScope::Task(task_id))?;
        total += nll_mean(&logits, &labels)? * idx.len() as f64;
    }
    Ok(Some(total / data.len() as f64))
}

// ---------------------------------------------------------------------------
// Plateau control
// ---------------------------------------------------------------------------

enum PlateauAction {
    Continue,
    Decay,
    Stop,
}

/// Watches validation loss. An epoch whose improvement over the best seen so
/// far stays below the tolerance extends the current plateau streak; a full
/// streak first decays the rates and the second time ends the task.
struct Plateau {
    best: f64,
    streak: usize,
    triggers: usize,
}

impl Plateau {
    fn new() -> Self {
        Self { best: f64::INFINITY, streak: 0, triggers: 0 }
    }

    fn observe(&mut self, val: f64, tolerance: f64, patience: usize) -> PlateauAction {
        if self.best - val > tolerance {
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        if val < self.best {
            self.best = val;
        }
        if patience > 0 && self.streak >= patience {
            self.streak = 0;
            self.triggers += 1;
            if self.triggers == 1 {
                return PlateauAction::Decay;
            }
            return PlateauAction::Stop;
        }
        PlateauAction::Continue
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn zero_eps(net: &BayesNetwork, head_idx: usize) -> Vec<NetEps> {
    let layers = net
        .scoped_layers(head_idx)
        .into_iter()
        .map(|li| {
            let l = net.layer(li);
            LayerEps { w: vec![0.0; l.weights.len()], b: vec![0.0; l.biases.len()] }
        })
        .collect();
    vec![NetEps { layers }]
}

fn label_offset_for(net: &BayesNetwork, class_lo: usize) -> usize {
    match net.spec().heads {
        HeadLayout::SingleHead { .. } => class_lo,
        HeadLayout::MultiHead(_) => 0,
    }
}

struct EpochOutcome {
    mean_loss: f64,
}

/// One epoch over one task's shuffled minibatches.
fn run_epoch(
    net: &mut BayesNetwork,
    cfg: &TrainConfig,
    task: &TaskData,
    order: &[usize],
    lr: &PerParamLR,
    freeze: &FreezeMap,
    term_mask: TermMask,
    rng: &mut ChaCha12Rng,
    epoch: usize,
) -> Result<EpochOutcome> {
    let offset = label_offset_for(net, task.class_range.0);
    let scope = HeadScope::Task(task.task_id);
    let head_idx = net.head_index(scope)?;
    let minibatches = order.len().div_ceil(cfg.batch_size) as u32;
    let frozen_noise = if cfg.mode.is_ordinary() { Some(zero_eps(net, head_idx)) } else { None };
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let sub = task.train.select(chunk);
        let labels: Vec<usize> = sub.labels.iter().map(|&l| l + offset).collect();
        let trace = match &frozen_noise {
            Some(eps) => net.forward_with_eps(&sub.images, eps, scope)?.1,
            None => net.forward_mc(&sub.images, cfg.train_draws, rng, scope)?.1,
        };
        let draws = trace.samples.len() as f64;
        let (mut grads, terms) = backward(net, &trace, &labels, &cfg.prior, minibatches, term_mask)?;
        let mut loss = masked_loss(&terms, term_mask)?;
        if cfg.average_draws {
            grads.scale(1.0 / draws);
            loss /= draws;
        }
        if !loss.is_finite() {
            return Err(UcbError::Divergence(format!(
                "task {}, epoch {epoch}: non-finite training loss",
                task.task_id
            )));
        }
        sgd_step(net, &grads, lr, freeze)?;
        loss_sum += loss;
        batches += 1;
    }
    Ok(EpochOutcome { mean_loss: loss_sum / batches as f64 })
}

fn train_single_task(
    net: &mut BayesNetwork,
    cfg: &TrainConfig,
    task: &TaskData,
    lr: &mut PerParamLR,
    freeze: &FreezeMap,
    term_mask: TermMask,
) -> Result<TaskStats> {
    if task.train.is_empty() {
        return Err(UcbError::InvalidArgument(format!(
            "task {} has no training examples",
            task.task_id
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, SEED_TRAIN + task.task_id as u64));
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let offset = label_offset_for(net, task.class_range.0);
    let mut stats = TaskStats {
        task_id: task.task_id,
        epochs: 0,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        decay_epochs: Vec::new(),
    };
    let mut plateau = Plateau::new();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let out = run_epoch(net, cfg, task, &order, lr, freeze, term_mask, &mut rng, epoch)?;
        stats.train_losses.push(out.mean_loss);
        stats.epochs = epoch + 1;
        if let Some(v) = mean_weight_nll(net, &task.val, task.task_id, offset)? {
            stats.val_losses.push(v);
            match plateau.observe(v, cfg.plateau_tolerance, cfg.plateau_patience) {
                PlateauAction::Continue => {}
                PlateauAction::Decay => {
                    lr.scale_all(cfg.lr_decay);
                    stats.decay_epochs.push(epoch);
                }
                PlateauAction::Stop => break,
            }
        }
    }
    Ok(stats)
}

/// Joint training on the union of all tasks. Each shuffled chunk is split by
/// task, every group runs its own forward/backward through its head, and the
/// summed gradients apply in a single step.
fn train_joint(
    net: &mut BayesNetwork,
    cfg: &TrainConfig,
    seq: &TaskSequence,
    lr: &mut PerParamLR,
    freeze: &FreezeMap,
    term_mask: TermMask,
) -> Result<TaskStats> {
    let mut union: Vec<(usize, usize)> = Vec::new();
    for (ti, task) in seq.tasks.iter().enumerate() {
        for row in 0..task.train.len() {
            union.push((ti, row));
        }
    }
    if union.is_empty() {
        return Err(UcbError::InvalidArgument("no training examples in the sequence".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, SEED_TRAIN));
    let minibatches = union.len().div_ceil(cfg.batch_size) as u32;
    let mut stats = TaskStats {
        task_id: 0,
        epochs: 0,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        decay_epochs: Vec::new(),
    };
    let mut plateau = Plateau::new();
    for epoch in 0..cfg.max_epochs {
        union.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in union.chunks(cfg.batch_size) {
            // Group the chunk by task, ascending, so the draw order is
            // deterministic.
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for &(ti, row) in chunk {
                match groups.iter_mut().find(|(t, _)| *t == ti) {
                    Some((_, rows)) => rows.push(row),
                    None => groups.push((ti, vec![row])),
                }
            }
            groups.sort_by_key(|(t, _)| *t);
            let mut total = GradientSet::zeros_like(net);
            let mut chunk_loss = 0.0;
            for (ti, rows) in &groups {
                let task = &seq.tasks[*ti];
                let offset = label_offset_for(net, task.class_range.0);
                let scope = HeadScope::Task(task.task_id);
                let sub = task.train.select(rows);
                let labels: Vec<usize> = sub.labels.iter().map(|&l| l + offset).collect();
                let trace = if cfg.mode.is_ordinary() {
                    let eps = zero_eps(net, net.head_index(scope)?);
                    net.forward_with_eps(&sub.images, &eps, scope)?.1
                } else {
                    net.forward_mc(&sub.images, cfg.train_draws, &mut rng, scope)?.1
                };
                let draws = trace.samples.len() as f64;
                let (mut grads, terms) =
                    backward(net, &trace, &labels, &cfg.prior, minibatches, term_mask)?;
                let mut loss = masked_loss(&terms, term_mask)?;
                if cfg.average_draws {
                    grads.scale(1.0 / draws);
                    loss /= draws;
                }
                total.accumulate(&grads)?;
                chunk_loss += loss;
            }
            if !chunk_loss.is_finite() {
                return Err(UcbError::Divergence(format!(
                    "joint training, epoch {epoch}: non-finite training loss"
                )));
            }
            sgd_step(net, &total, lr, freeze)?;
            loss_sum += chunk_loss;
            batches += 1;
        }
        stats.train_losses.push(loss_sum / batches as f64);
        stats.epochs = epoch + 1;

        // Union validation loss: example-weighted mean over the tasks.
        let mut vl_sum = 0.0;
        let mut vl_count = 0usize;
        for task in &seq.tasks {
            let offset = label_offset_for(net, task.class_range.0);
            if let Some(v) = mean_weight_nll(net, &task.val, task.task_id, offset)? {
                vl_sum += v * task.val.len() as f64;
                vl_count += task.val.len();
            }
        }
        if vl_count > 0 {
            let v = vl_sum / vl_count as f64;
            stats.val_losses.push(v);
            match plateau.observe(v, cfg.plateau_tolerance, cfg.plateau_patience) {
                PlateauAction::Continue => {}
                PlateauAction::Decay => {
                    lr.scale_all(cfg.lr_decay);
                    stats.decay_epochs.push(epoch);
                }
                PlateauAction::Stop => break,
            }
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// The run driver
// ---------------------------------------------------------------------------

fn validate_config(cfg: &TrainConfig, seq: &TaskSequence) -> Result<()> {
    if seq.n_tasks() == 0 {
        return Err(UcbError::InvalidArgument("task sequence is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.train_draws == 0 || cfg.eval_draws == 0 {
        return Err(UcbError::InvalidArgument(
            "batch size, epochs and draw counts must be positive".into(),
        ));
    }
    if !(cfg.base_lr > 0.0 && cfg.base_lr.is_finite()) {
        return Err(UcbError::InvalidArgument("base learning rate must be positive".into()));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(UcbError::InvalidArgument("lr decay must lie in (0, 1]".into()));
    }
    if !(cfg.prune_threshold >= 0.0 && cfg.prune_threshold.is_finite()) {
        return Err(UcbError::InvalidArgument("prune threshold must be non-negative".into()));
    }
    Ok(())
}

fn freeze_whole_trunk(net: &BayesNetwork, freeze: &mut FreezeMap) {
    let offsets = net.block_offsets();
    for li in 0..net.trunk().len() {
        let (w_off, _) = offsets[li];
        for j in 0..net.layer(li).param_count() {
            freeze.set_frozen(w_off + j, 1);
        }
    }
}

/// Train through the sequence and fill the accuracy matrices. With an output
/// directory, artifacts are written as the run progresses: a checkpoint per
/// task (and a freeze-map file for modes that freeze), then the accuracy
/// matrix CSV and summary metrics JSON at the end.
pub fn run_sequence(
    cfg: &TrainConfig,
    seq: &TaskSequence,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    validate_config(cfg, seq)?;
    let spec = network_spec_for(cfg, seq)?;
    let mut init_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, SEED_INIT));
    let mut net = BayesNetwork::init(spec, &cfg.init, &mut init_rng)?;
    let mut freeze = FreezeMap::none(net.param_count());
    let ordinary = cfg.mode.is_ordinary();
    let rho_lr = if ordinary { 0.0 } else { cfg.base_lr };
    let mut lr = PerParamLR::uniform(&net, cfg.base_lr, rho_lr);
    let term_mask = if ordinary { TermMask::likelihood_only() } else { TermMask::default() };
    let n = seq.n_tasks();
    let mut rmatrix = RMatrix::new(n);
    let mut val_matrix = RMatrix::new(n);
    let mut task_stats = Vec::new();
    let mut prune_reports: Vec<PruneReport> = Vec::new();

    if cfg.mode.is_joint() {
        task_stats.push(train_joint(&mut net, cfg, seq, &mut lr, &freeze, term_mask)?);
        // Joint training has no sequence position: only the final column is
        // real, and the diagonal is defined to equal it.
        for task in &seq.tasks {
            let i = task.task_id;
            let acc = eval_split(&net, cfg, &task.test, i, task.class_range.0, None)?;
            rmatrix.set(i, n, acc)?;
            rmatrix.set(i, i, acc)?;
            if !task.val.is_empty() {
                let va = eval_split(&net, cfg, &task.val, i, task.class_range.0, None)?;
                val_matrix.set(i, n, va)?;
                val_matrix.set(i, i, va)?;
            }
        }
        if let Some(dir) = out_dir {
            write_checkpoint(&net, &dir.join(format!("checkpoint_task{n}.ucbn")))?;
        }
    } else {
        for task in &seq.tasks {
            let t = task.task_id;
            task_stats.push(train_single_task(&mut net, cfg, task, &mut lr, &freeze, term_mask)?);

            if cfg.mode == Mode::UcbP {
                // Diagonal entries are the live network before pruning.
                let pre = eval_split(&net, cfg, &task.test, t, task.class_range.0, None)?;
                rmatrix.set(t, t, pre)?;
                if !task.val.is_empty() {
                    let va = eval_split(&net, cfg, &task.val, t, task.class_range.0, None)?;
                    val_matrix.set(t, t, va)?;
                }
                // Candidate released fractions, scored by how much of the
                // live accuracy survives under the would-be mask.
                let head_idx = net.head_index(HeadScope::Task(t))?;
                let scoped = net.scoped_layers(head_idx);
                let mut cands = Vec::with_capacity(PRUNE_RATIO_CANDIDATES.len());
                for &ratio in PRUNE_RATIO_CANDIDATES.iter() {
                    let plan = plan_prune(&net, &freeze, &scoped, ratio)?;
                    let cmask = candidate_mask(&net, &freeze, &plan)?;
                    let acc =
                        eval_split(&net, cfg, &task.test, t, task.class_range.0, Some(&cmask))?;
                    cands.push((ratio, pre - acc));
                }
                let chosen = select_prune_ratio(&cands, cfg.prune_threshold)?;
                let plan = plan_prune(&net, &freeze, &scoped, chosen)?;
                apply_prune(&mut net, &mut freeze, &plan, t as u32);
                let mt = mask_through(&net, &freeze, t as u32)?;
                let post = eval_split(&net, cfg, &task.test, t, task.class_range.0, Some(&mt))?;
                prune_reports.push(PruneReport {
                    task_id: t,
                    ratio: chosen,
                    pre_accuracy: pre,
                    post_accuracy: post,
                    candidates: cands,
                });
                // Earlier tasks are always read through their historical
                // masks; parameters frozen through task i never change, so
                // these reproduce the accuracies recorded back then.
                for prev in &seq.tasks[..t - 1] {
                    let i = prev.task_id;
                    let mi = mask_through(&net, &freeze, i as u32)?;
                    let acc =
                        eval_split(&net, cfg, &prev.test, i, prev.class_range.0, Some(&mi))?;
                    rmatrix.set(i, t, acc)?;
                    if !prev.val.is_empty() {
                        let va =
                            eval_split(&net, cfg, &prev.val, i, prev.class_range.0, Some(&mi))?;
                        val_matrix.set(i, t, va)?;
                    }
                }
                lr = PerParamLR::uniform(&net, cfg.base_lr, rho_lr);
            } else {
                for prev in &seq.tasks[..t] {
                    let i = prev.task_id;
                    let acc = eval_split(&net, cfg, &prev.test, i, prev.class_range.0, None)?;
                    rmatrix.set(i, t, acc)?;
                    if !prev.val.is_empty() {
                        let va = eval_split(&net, cfg, &prev.val, i, prev.class_range.0, None)?;
                        val_matrix.set(i, t, va)?;
                    }
                }
                match cfg.mode {
                    Mode::Ucb => {
                        let icfg = ImportanceConfig {
                            regularize_mu: true,
                            regularize_rho: cfg.regularize_rho,
                            omega: cfg.omega,
                            compound: cfg.compound_lr,
                        };
                        lr = ucb_lr_update(&net, cfg.base_lr, &icfg, Some(&lr))?;
                    }
                    Mode::BbbFe | Mode::OrdFe => {
                        if t == 1 {
                            freeze_whole_trunk(&net, &mut freeze);
                        }
                        lr = PerParamLR::uniform(&net, cfg.base_lr, rho_lr);
                    }
                    Mode::BbbFt | Mode::OrdFt => {
                        lr = PerParamLR::uniform(&net, cfg.base_lr, rho_lr);
                    }
                    _ => {}
                }
            }

            if let Some(dir) = out_dir {
                write_checkpoint(&net, &dir.join(format!("checkpoint_task{t}.ucbn")))?;
                if cfg.mode.writes_masks() {
                    write_freeze_map(&freeze, &dir.join(format!("mask_task{t}.ucbm")))?;
                }
            }
        }
    }

    let (bwt, acc) = bwt_acc(&rmatrix)?;
    let generalized = match cfg.head_mode {
        HeadMode::Single => Some(generalized_accuracy(&net, cfg, seq)?),
        HeadMode::Multi => None,
    };
    // Trainable scalars: mu and rho for Bayesian modes, mu only for the
    // ordinary baselines (rho is inert there).
    let param_count = if ordinary { net.param_count() } else { 2 * net.param_count() };
    let metrics = RunMetrics {
        mode: cfg.mode.as_str().to_owned(),
        param_count,
        n_tasks: n,
        acc,
        bwt,
        generalized_acc: generalized,
        prune_ratios: prune_reports.iter().map(|p| (p.task_id, p.ratio)).collect(),
    };
    if let Some(dir) = out_dir {
        write_rmatrix_csv(&rmatrix, &dir.join("rmatrix.csv"))?;
        write_metrics_json(&metrics, &dir.join("metrics.json"))?;
    }
    Ok(RunOutput { rmatrix, val_matrix, metrics, task_stats, prune_reports })
}

// ---------------------------------------------------------------------------
// Hyperparameter search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub prior: ScaleMixturePrior,
    /// Mean final validation accuracy over the probe tasks.
    pub objective: f64,
}

/// The standard 27-point prior grid, iterated with -log10 sigma1 outermost
/// in {0, 1, 2}, then -log10 sigma2 in {6, 7, 8}, then pi in
/// {0.25, 0.5, 0.75} innermost.
pub fn default_prior_grid() -> Vec<ScaleMixturePrior> {
    let mut grid = Vec::with_capacity(27);
    for nls1 in [0.0f64, 1.0, 2.0] {
        for nls2 in [6.0f64, 7.0, 8.0] {
            for pi in [0.25, 0.5, 0.75] {
                grid.push(
                    ScaleMixturePrior::new(pi, (-nls1).exp(), (-nls2).exp())
                        .expect("grid prior parameters are valid"),
                );
            }
        }
    }
    grid
}

/// Pick a prior by running the first two tasks (or the single task) of the
/// sequence per candidate and comparing the mean final validation accuracy.
/// Strictly-greater comparison keeps the first candidate on ties.
pub fn tune_hyperparams(
    base: &TrainConfig,
    seq: &TaskSequence,
    candidates: &[ScaleMixturePrior],
) -> Result<(ScaleMixturePrior, Vec<TuneResult>)> {
    if candidates.is_empty() {
        return Err(UcbError::InvalidArgument("no prior candidates to try".into()));
    }
    let probe = TaskSequence {
        tasks: seq.tasks[..seq.n_tasks().min(2)].to_vec(),
        kind: seq.kind,
    };
    let pn = probe.n_tasks();
    let mut results = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (ci, cand) in candidates.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.prior = *cand;
        let out = run_sequence(&cfg, &probe, None)?;
        let mut sum = 0.0;
        for i in 1..=pn {
            sum += out.val_matrix.get(i, pn)?.ok_or_else(|| {
                UcbError::InvalidState(format!(
                    "tuning needs validation data, task {i} has none"
                ))
            })?;
        }
        let objective = sum / pn as f64;
        results.push(TuneResult { prior: *cand, objective });
        if best.map_or(true, |(_, b)| objective > b) {
            best = Some((ci, objective));
        }
    }
    let (bi, _) = best.expect("candidates are non-empty");
    Ok((candidates[bi], results))
}
