//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment line, blank lines are
//! ignored. Every key must be known and appear at most once; an unknown key
//! is an error naming it, so typos never silently fall back to a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ucb_core::{
    load_idx_pair, make_permuted_tasks, make_synthetic_blobs, split_by_classes, HeadMode,
    InitConfig, Mode, OmegaKind, ScaleMixturePrior, SyntheticSpec, TaskSequence, TrainConfig,
};

/// Which dataset a run trains on.
#[derive(Debug, Clone)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    SplitMnist { dir: Option<PathBuf>, n_tasks: usize, val_fraction: f64, seed: u64 },
    PermutedMnist { dir: Option<PathBuf>, n_tasks: usize, val_fraction: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSpec,
    pub out_dir: Option<PathBuf>,
}

/// Parse assignments from the file text, rejecting malformed lines and
/// duplicate keys.
fn parse_assignments(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", ln + 1))?;
        let key = key.trim().to_owned();
        let value = value.trim().to_owned();
        if key.is_empty() {
            bail!("line {}: empty key", ln + 1);
        }
        if map.insert(key.clone(), value).is_some() {
            bail!("line {}: duplicate key {key:?}", ln + 1);
        }
    }
    Ok(map)
}

/// Reads typed values out of the assignment map, consuming keys so that
/// whatever remains at the end is unknown.
struct KeyReader {
    map: BTreeMap<String, String>,
}

impl KeyReader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|e| anyhow!("config key {key}: cannot parse {v:?}: {e}")),
        }
    }

    fn parse_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(anyhow!("config key {key}: expected true or false, got {other:?}")),
            },
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            bail!("unknown config key: {key}");
        }
        Ok(())
    }
}

fn parse_hidden(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<usize>()
                .map_err(|e| anyhow!("config key hidden: bad width {p:?}: {e}"))
        })
        .collect()
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut r = KeyReader { map: parse_assignments(text)? };

    let defaults = TrainConfig::default();
    let mode = match r.take("mode") {
        Some(v) => Mode::parse(&v)?,
        None => defaults.mode,
    };
    let head_mode = match r.take("heads") {
        Some(v) => HeadMode::parse(&v)?,
        None => defaults.head_mode,
    };
    let hidden_dims = match r.take("hidden") {
        Some(v) => parse_hidden(&v)?,
        None => defaults.hidden_dims.clone(),
    };
    let omega = match r.take("omega") {
        Some(v) => match v.as_str() {
            "inv_sigma" => OmegaKind::InvSigma,
            "snr" => OmegaKind::Snr,
            other => bail!("config key omega: expected inv_sigma or snr, got {other:?}"),
        },
        None => defaults.omega,
    };
    let prior = ScaleMixturePrior::new(
        r.parse("pi", defaults.prior.pi)?,
        r.parse("sigma1", defaults.prior.sigma1)?,
        r.parse("sigma2", defaults.prior.sigma2)?,
    )?;
    let train = TrainConfig {
        mode,
        head_mode,
        hidden_dims,
        prior,
        base_lr: r.parse("base_lr", defaults.base_lr)?,
        batch_size: r.parse("batch_size", defaults.batch_size)?,
        max_epochs: r.parse("max_epochs", defaults.max_epochs)?,
        train_draws: r.parse("train_draws", defaults.train_draws)?,
        eval_draws: r.parse("eval_draws", defaults.eval_draws)?,
        average_draws: r.parse_bool("average_draws", defaults.average_draws)?,
        seed: r.parse("seed", defaults.seed)?,
        plateau_tolerance: r.parse("plateau_tolerance", defaults.plateau_tolerance)?,
        plateau_patience: r.parse("plateau_patience", defaults.plateau_patience)?,
        lr_decay: r.parse("lr_decay", defaults.lr_decay)?,
        compound_lr: r.parse_bool("compound_lr", defaults.compound_lr)?,
        omega,
        regularize_rho: r.parse_bool("regularize_rho", defaults.regularize_rho)?,
        prune_threshold: r.parse("prune_threshold", defaults.prune_threshold)?,
        init: InitConfig {
            mu_std: r.parse("mu_std", InitConfig::default().mu_std)?,
            rho_init: r.parse("rho_init", InitConfig::default().rho_init)?,
        },
    };

    let out_dir = r.take("out_dir").map(PathBuf::from);
    let data_kind = r.take("data").unwrap_or_else(|| "synthetic".to_owned());
    let data_seed: u64 = r.parse("data_seed", 1)?;
    let data = match data_kind.as_str() {
        "synthetic" => {
            let d = SyntheticSpec::default();
            DataSpec::Synthetic(SyntheticSpec {
                n_tasks: r.parse("n_tasks", d.n_tasks)?,
                classes_per_task: r.parse("classes_per_task", d.classes_per_task)?,
                examples_per_class: r.parse("examples_per_class", d.examples_per_class)?,
                dim: r.parse("dim", d.dim)?,
                radius: r.parse("radius", d.radius)?,
                noise: r.parse("noise", d.noise)?,
                val_fraction: r.parse("val_fraction", d.val_fraction)?,
                seed: data_seed,
            })
        }
        "split_mnist" => DataSpec::SplitMnist {
            dir: r.take("mnist_dir").map(PathBuf::from),
            n_tasks: r.parse("n_tasks", 5)?,
            val_fraction: r.parse("val_fraction", 0.1)?,
            seed: data_seed,
        },
        "permuted_mnist" => DataSpec::PermutedMnist {
            dir: r.take("mnist_dir").map(PathBuf::from),
            n_tasks: r.parse("n_tasks", 10)?,
            val_fraction: r.parse("val_fraction", 0.1)?,
            seed: data_seed,
        },
        other => bail!(
            "config key data: expected synthetic, split_mnist or permuted_mnist, got {other:?}"
        ),
    };

    r.finish()?;
    Ok(RunConfig { train, data, out_dir })
}

/// MNIST directory resolution order: explicit config key, then the
/// UCB_MNIST_DIR environment variable, then ./data/mnist.
pub fn resolve_mnist_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_owned();
    }
    if let Ok(env) = std::env::var("UCB_MNIST_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("data/mnist")
}

type LabeledImages = (ucb_core::ndarray::Array2<f64>, Vec<usize>);

fn load_mnist(dir: &Path) -> Result<(LabeledImages, LabeledImages)> {
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .with_context(|| format!("loading MNIST training files from {}", dir.display()))?;
    let test = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .with_context(|| format!("loading MNIST test files from {}", dir.display()))?;
    Ok((train, test))
}

pub fn load_sequence(data: &DataSpec) -> Result<TaskSequence> {
    match data {
        DataSpec::Synthetic(spec) => Ok(make_synthetic_blobs(spec)?),
        DataSpec::SplitMnist { dir, n_tasks, val_fraction, seed } => {
            let dir = resolve_mnist_dir(dir.as_deref());
            let ((tri, trl), (tei, tel)) = load_mnist(&dir)?;
            if *n_tasks == 0 || 10 % n_tasks != 0 {
                bail!("split_mnist needs n_tasks dividing 10, got {n_tasks}");
            }
            let per = 10 / n_tasks;
            let groups: Vec<Vec<usize>> =
                (0..*n_tasks).map(|t| (t * per..(t + 1) * per).collect()).collect();
            Ok(split_by_classes(&tri, &trl, &tei, &tel, &groups, *val_fraction, *seed)?)
        }
        DataSpec::PermutedMnist { dir, n_tasks, val_fraction, seed } => {
            let dir = resolve_mnist_dir(dir.as_deref());
            let ((tri, trl), (tei, tel)) = load_mnist(&dir)?;
            Ok(make_permuted_tasks(&tri, &trl, &tei, &tel, 10, *n_tasks, *val_fraction, *seed)?)
        }
    }
}
