//! Task sequences and the data that feeds them.
//!
//! Three generators produce [`TaskSequence`]s: class splits of a labeled
//! image set (task t sees only its class group, labels remapped to be local),
//! pixel permutations (every task is the full set under a fixed random
//! permutation, the first being the identity), and synthetic Gaussian blobs
//! for fast end-to-end runs. All of them carve a stratified validation set
//! out of the training data with seeded shuffles, so a (data, seed) pair
//! always yields the same sequence.
//!
//! Image inputs arrive in the big-endian IDX format; pixels are scaled to
//! [0, 1] on load.

use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, UcbError};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Mix a base seed with a tag into an independent stream seed (splitmix64
/// finalizer). Every derived RNG in the crate goes through this, so seeds
/// never collide by accident.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Examples with labels local to their task: every label is in
/// 0..class_count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(UcbError::Inconsistency(format!(
                "{} images vs {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(UcbError::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let cols = self.images.ncols();
        let mut images = Array2::zeros((indices.len(), cols));
        let mut labels = Vec::with_capacity(indices.len());
        for (out_row, &i) in indices.iter().enumerate() {
            images.row_mut(out_row).assign(&self.images.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, class_count: self.class_count }
    }
}

/// One task of a continual sequence. `class_range` places the task's local
/// labels in the global class numbering: global = class_range.0 + local.
#[derive(Debug, Clone)]
pub struct TaskData {
    /// 1-based position in the sequence.
    pub task_id: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub class_range: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    Split,
    Permuted,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub kind: SequenceKind,
}

impl TaskSequence {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Size of the global class numbering (one more than the largest global
    /// class id any task can produce).
    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.class_range.1).max().unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map(|t| t.train.images.ncols()).unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// IDX loading
// ---------------------------------------------------------------------------

fn truncated(what: &str) -> UcbError {
    UcbError::Corruption(format!("{what} file truncated"))
}

/// Load an IDX image file: big-endian magic 0x00000803, then count, rows,
/// cols as u32, then one byte per pixel. Pixels are scaled by 1/255.
pub fn load_idx_images(path: &Path) -> Result<Array2<f64>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let magic = r.read_u32::<BigEndian>().map_err(|_| truncated("image"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(UcbError::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = r.read_u32::<BigEndian>().map_err(|_| truncated("image"))? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(|_| truncated("image"))? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(|_| truncated("image"))? as usize;
    let pixels = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| UcbError::Format("image dimensions overflow".into()))?;
    let mut bytes = vec![0u8; pixels];
    r.read_exact(&mut bytes).map_err(|_| truncated("image"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(UcbError::Corruption("image file has trailing bytes".into()));
    }
    let data: Vec<f64> = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
    Array2::from_shape_vec((count, rows * cols), data)
        .map_err(|e| UcbError::Format(format!("image shape: {e}")))
}

/// Load an IDX label file: big-endian magic 0x00000801, count u32, then one
/// byte per label.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let magic = r.read_u32::<BigEndian>().map_err(|_| truncated("label"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(UcbError::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = r.read_u32::<BigEndian>().map_err(|_| truncated("label"))? as usize;
    let mut bytes = vec![0u8; count];
    r.read_exact(&mut bytes).map_err(|_| truncated("label"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(UcbError::Corruption("label file has trailing bytes".into()));
    }
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

/// Load a matched image/label pair, checking the counts agree.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    let imgs = load_idx_images(images)?;
    let labs = load_idx_labels(labels)?;
    if imgs.nrows() != labs.len() {
        return Err(UcbError::Inconsistency(format!(
            "{} images vs {} labels",
            imgs.nrows(),
            labs.len()
        )));
    }
    Ok((imgs, labs))
}

// ---------------------------------------------------------------------------
// Stratified validation carve
// ---------------------------------------------------------------------------

/// Split a dataset into (train, val) by taking `fraction` of each class,
/// rounded, after a seeded per-class shuffle. Every class keeps at least one
/// training example.
fn stratified_split(data: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count];
    for (i, &l) in data.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (c, indices) in per_class.iter_mut().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, c as u64));
        indices.shuffle(&mut rng);
        let n = indices.len();
        let mut n_val = (n as f64 * fraction).round() as usize;
        if n_val >= n && n > 0 {
            n_val = n - 1;
        }
        val_idx.extend_from_slice(&indices[..n_val]);
        train_idx.extend_from_slice(&indices[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    (data.select(&train_idx), data.select(&val_idx))
}

// ---------------------------------------------------------------------------
// Class-split sequences
// ---------------------------------------------------------------------------

/// Build a split sequence: task t holds the examples whose original label is
/// in `groups[t-1]`, with labels remapped to positions within the group.
/// Global class ranges are contiguous in task order. `val_fraction` of each
/// class is carved from the training rows (stratified, seeded).
pub fn split_by_classes(
    train_images: &Array2<f64>,
    train_labels: &[usize],
    test_images: &Array2<f64>,
    test_labels: &[usize],
    groups: &[Vec<usize>],
    val_fraction: f64,
    split_seed: u64,
) -> Result<TaskSequence> {
    if train_images.nrows() != train_labels.len() || test_images.nrows() != test_labels.len() {
        return Err(UcbError::Inconsistency("image and label counts differ".into()));
    }
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(UcbError::InvalidArgument("every task needs at least one class".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(UcbError::InvalidArgument(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for g in groups {
        for &c in g {
            if !seen.insert(c) {
                return Err(UcbError::InvalidArgument(format!(
                    "class {c} appears in more than one task"
                )));
            }
        }
    }

    let mut tasks = Vec::with_capacity(groups.len());
    let mut range_start = 0usize;
    for (ti, group) in groups.iter().enumerate() {
        let task_id = ti + 1;
        let local_of = |orig: usize| group.iter().position(|&c| c == orig);
        let gather = |images: &Array2<f64>, labels: &[usize]| -> Dataset {
            let mut idx = Vec::new();
            let mut local = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                if let Some(pos) = local_of(l) {
                    idx.push(i);
                    local.push(pos);
                }
            }
            let cols = images.ncols();
            let mut out = Array2::zeros((idx.len(), cols));
            for (row, &i) in idx.iter().enumerate() {
                out.row_mut(row).assign(&images.row(i));
            }
            Dataset { images: out, labels: local, class_count: group.len() }
        };
        let pool = gather(train_images, train_labels);
        let test = gather(test_images, test_labels);
        let (train, val) = stratified_split(&pool, val_fraction, mix_seed(split_seed, task_id as u64));
        let class_range = (range_start, range_start + group.len());
        range_start += group.len();
        tasks.push(TaskData { task_id, train, val, test, class_range });
    }
    Ok(TaskSequence { tasks, kind: SequenceKind::Split })
}

// ---------------------------------------------------------------------------
// Permuted sequences
// ---------------------------------------------------------------------------

/// The pixel permutation of task k (1-based): identity for the first task,
/// then a seeded Fisher-Yates shuffle per task.
pub fn task_permutation(dim: usize, master_seed: u64, task_id: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if task_id > 1 {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(master_seed, task_id as u64));
        perm.shuffle(&mut rng);
    }
    perm
}

/// Apply a pixel permutation to every row: out[i][j] = img[i][perm[j]].
pub fn apply_permutation(images: &Array2<f64>, perm: &[usize]) -> Result<Array2<f64>> {
    if perm.len() != images.ncols() {
        return Err(UcbError::ShapeMismatch(format!(
            "permutation over {} pixels, images have {}",
            perm.len(),
            images.ncols()
        )));
    }
    let mut out = Array2::zeros(images.raw_dim());
    for (mut orow, irow) in out.rows_mut().into_iter().zip(images.rows()) {
        for (j, &p) in perm.iter().enumerate() {
            orow[j] = irow[p];
        }
    }
    Ok(out)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Build a permuted sequence: every task is the full dataset under its own
/// fixed pixel permutation, sharing one global class range. The validation
/// set is carved once from the unpermuted training data and then permuted
/// along with the rest, so tasks agree on which examples are held out.
pub fn make_permuted_tasks(
    train_images: &Array2<f64>,
    train_labels: &[usize],
    test_images: &Array2<f64>,
    test_labels: &[usize],
    class_count: usize,
    n_tasks: usize,
    val_fraction: f64,
    master_seed: u64,
) -> Result<TaskSequence> {
    if n_tasks == 0 {
        return Err(UcbError::InvalidArgument("need at least one task".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(UcbError::InvalidArgument(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let pool = Dataset::new(train_images.clone(), train_labels.to_vec(), class_count)?;
    let test = Dataset::new(test_images.clone(), test_labels.to_vec(), class_count)?;
    let (train_base, val_base) = stratified_split(&pool, val_fraction, mix_seed(master_seed, 0));

    let dim = train_images.ncols();
    let mut tasks = Vec::with_capacity(n_tasks);
    for task_id in 1..=n_tasks {
        let perm = task_permutation(dim, master_seed, task_id);
        let permute = |d: &Dataset| -> Result<Dataset> {
            Ok(Dataset {
                images: apply_permutation(&d.images, &perm)?,
                labels: d.labels.clone(),
                class_count: d.class_count,
            })
        };
        tasks.push(TaskData {
            task_id,
            train: permute(&train_base)?,
            val: permute(&val_base)?,
            test: permute(&test)?,
            class_range: (0, class_count),
        });
    }
    Ok(TaskSequence { tasks, kind: SequenceKind::Permuted })
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

/// Parameters for synthetic Gaussian-blob sequences. Class centers sit
/// evenly on a circle of the given radius in the first two input dimensions;
/// every coordinate gets independent Gaussian noise.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    /// Examples drawn per class for the training pool and again for the test
    /// set; validation is carved out of the training pool.
    pub examples_per_class: usize,
    pub dim: usize,
    pub radius: f64,
    pub noise: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            classes_per_task: 2,
            examples_per_class: 200,
            dim: 2,
            radius: 3.0,
            noise: 0.5,
            val_fraction: 0.15,
            seed: 1,
        }
    }
}

/// Generate a synthetic blob sequence with disjoint global class ranges.
pub fn make_synthetic_blobs(spec: &SyntheticSpec) -> Result<TaskSequence> {
    if spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.examples_per_class == 0 {
        return Err(UcbError::InvalidArgument(
            "tasks, classes per task and examples per class must be positive".into(),
        ));
    }
    if spec.dim < 2 {
        return Err(UcbError::InvalidArgument("blob inputs need at least 2 dimensions".into()));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(UcbError::InvalidArgument(format!(
            "validation fraction {} outside [0, 1)",
            spec.val_fraction
        )));
    }
    let total_classes = spec.n_tasks * spec.classes_per_task;
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for task_id in 1..=spec.n_tasks {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.seed, task_id as u64));
        let draw_set = |rng: &mut ChaCha12Rng| -> Dataset {
            let rows = spec.classes_per_task * spec.examples_per_class;
            let mut images = Array2::zeros((rows, spec.dim));
            let mut labels = Vec::with_capacity(rows);
            let mut row = 0;
            for local in 0..spec.classes_per_task {
                let global = (task_id - 1) * spec.classes_per_task + local;
                let theta = 2.0 * std::f64::consts::PI * global as f64 / total_classes as f64;
                let (cx, cy) = (spec.radius * theta.cos(), spec.radius * theta.sin());
                for _ in 0..spec.examples_per_class {
                    for d in 0..spec.dim {
                        let center = match d {
                            0 => cx,
                            1 => cy,
                            _ => 0.0,
                        };
                        let n: f64 = rng.sample(StandardNormal);
                        images[[row, d]] = center + spec.noise * n;
                    }
                    labels.push(local);
                    row += 1;
                }
            }
            Dataset { images, labels, class_count: spec.classes_per_task }
        };
        let pool = draw_set(&mut rng);
        let test = draw_set(&mut rng);
        let (train, val) =
            stratified_split(&pool, spec.val_fraction, mix_seed(spec.seed, 0x5eed ^ task_id as u64));
        let lo = (task_id - 1) * spec.classes_per_task;
        tasks.push(TaskData {
            task_id,
            train,
            val,
            test,
            class_range: (lo, lo + spec.classes_per_task),
        });
    }
    Ok(TaskSequence { tasks, kind: SequenceKind::Synthetic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, count: u32, rows: u32, cols: u32, pixels: &[u8]) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn idx_loading_scales_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx_images(&ip, 2, 2, 2, &[0, 51, 102, 255, 255, 204, 153, 0]);
        write_idx_labels(&lp, &[3, 7]);
        let (imgs, labs) = load_idx_pair(&ip, &lp).unwrap();
        assert_eq!(imgs.shape(), &[2, 4]);
        assert_relative_eq!(imgs[[0, 1]], 0.2, max_relative = 1e-12);
        assert_eq!(imgs[[0, 3]], 1.0);
        assert_eq!(imgs[[1, 3]], 0.0);
        assert_eq!(labs, vec![3, 7]);
    }

    #[test]
    fn idx_rejects_bad_magic_truncation_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx_images(&ip, 2, 2, 2, &[0; 8]);
        write_idx_labels(&lp, &[0, 1, 0]);
        // Counts disagree: 2 images vs 3 labels.
        assert!(matches!(load_idx_pair(&ip, &lp), Err(UcbError::Inconsistency(_))));

        let bad = dir.path().join("bad");
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_idx_images(&bad), Err(UcbError::Format(_))));

        let trunc = dir.path().join("trunc");
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&trunc, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_idx_images(&trunc), Err(UcbError::Corruption(_))));

        let trail = dir.path().join("trail");
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.push(0);
        std::fs::write(&trail, &bytes).unwrap();
        assert!(matches!(load_idx_images(&trail), Err(UcbError::Corruption(_))));
    }

    fn toy_labeled_set(per_class: usize, classes: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let rows = per_class * classes;
        let images = Array2::from_shape_fn((rows, 3), |_| rng.sample(StandardNormal));
        let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
        (images, labels)
    }

    #[test]
    fn split_partitions_and_remaps() {
        let (ti, tl) = toy_labeled_set(20, 6, 1);
        let (si, sl) = toy_labeled_set(10, 6, 2);
        let groups = vec![vec![0, 1], vec![4, 3]];
        let seq = split_by_classes(&ti, &tl, &si, &sl, &groups, 0.15, 7).unwrap();
        assert_eq!(seq.n_tasks(), 2);
        assert_eq!(seq.total_classes(), 4);
        let t1 = &seq.tasks[0];
        assert_eq!(t1.class_range, (0, 2));
        // 20 per class, val = round(0.15 * 20) = 3 per class.
        assert_eq!(t1.val.len(), 6);
        assert_eq!(t1.train.len(), 34);
        assert_eq!(t1.test.len(), 20);
        assert!(t1.train.labels.iter().all(|&l| l < 2));
        // Group order defines the local mapping: original 4 -> 0, 3 -> 1.
        let t2 = &seq.tasks[1];
        assert_eq!(t2.class_range, (2, 4));
        assert_eq!(t2.train.class_count, 2);
        // Classes 2 and 5 appear nowhere.
        let total = t1.train.len() + t1.val.len() + t2.train.len() + t2.val.len();
        assert_eq!(total, 80);
    }

    #[test]
    fn split_rejects_overlapping_groups() {
        let (ti, tl) = toy_labeled_set(5, 4, 1);
        let groups = vec![vec![0, 1], vec![1, 2]];
        let got = split_by_classes(&ti, &tl, &ti, &tl, &groups, 0.1, 1);
        assert!(matches!(got, Err(UcbError::InvalidArgument(_))));
    }

    #[test]
    fn split_is_deterministic_in_the_seed() {
        let (ti, tl) = toy_labeled_set(12, 4, 3);
        let groups = vec![vec![0, 1], vec![2, 3]];
        let a = split_by_classes(&ti, &tl, &ti, &tl, &groups, 0.25, 9).unwrap();
        let b = split_by_classes(&ti, &tl, &ti, &tl, &groups, 0.25, 9).unwrap();
        assert_eq!(a.tasks[0].val.labels, b.tasks[0].val.labels);
        assert_eq!(
            a.tasks[0].val.images.iter().collect::<Vec<_>>(),
            b.tasks[0].val.images.iter().collect::<Vec<_>>()
        );
        let c = split_by_classes(&ti, &tl, &ti, &tl, &groups, 0.25, 10).unwrap();
        // A different seed shuffles differently (almost surely).
        assert_ne!(
            a.tasks[0].val.images.iter().collect::<Vec<_>>(),
            c.tasks[0].val.images.iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn first_permutation_is_identity() {
        let (ti, tl) = toy_labeled_set(6, 2, 4);
        let seq = make_permuted_tasks(&ti, &tl, &ti, &tl, 2, 3, 0.2, 11).unwrap();
        // Task 1 test images match the originals exactly.
        for (a, b) in seq.tasks[0].test.images.iter().zip(ti.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Later tasks share the class range and differ in pixel order.
        assert_eq!(seq.tasks[1].class_range, (0, 2));
        assert_eq!(seq.tasks[2].class_range, (0, 2));
        assert_ne!(
            seq.tasks[1].test.images.iter().collect::<Vec<_>>(),
            seq.tasks[0].test.images.iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn permutation_roundtrips_through_inverse() {
        let perm = task_permutation(50, 99, 4);
        let inv = invert_permutation(&perm);
        let (imgs, _) = toy_labeled_set(3, 2, 5);
        let wide = {
            let mut rng = ChaCha12Rng::seed_from_u64(8);
            Array2::from_shape_fn((4, 50), |_| rng.sample::<f64, _>(StandardNormal))
        };
        let there = apply_permutation(&wide, &perm).unwrap();
        let back = apply_permutation(&there, &inv).unwrap();
        for (a, b) in back.iter().zip(wide.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        drop(imgs);
    }

    #[test]
    fn equal_master_seeds_give_identical_sequences() {
        let (ti, tl) = toy_labeled_set(8, 2, 6);
        let a = make_permuted_tasks(&ti, &tl, &ti, &tl, 2, 3, 0.2, 42).unwrap();
        let b = make_permuted_tasks(&ti, &tl, &ti, &tl, 2, 3, 0.2, 42).unwrap();
        for (ta, tb) in a.tasks.iter().zip(b.tasks.iter()) {
            for (x, y) in ta.train.images.iter().zip(tb.train.images.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(ta.train.labels, tb.train.labels);
        }
    }

    #[test]
    fn permuted_validation_is_shared_across_tasks() {
        let (ti, tl) = toy_labeled_set(10, 2, 7);
        let seq = make_permuted_tasks(&ti, &tl, &ti, &tl, 2, 2, 0.2, 13).unwrap();
        // Same labels in the same order: the carve happened once.
        assert_eq!(seq.tasks[0].val.labels, seq.tasks[1].val.labels);
        assert_eq!(seq.tasks[0].train.len() + seq.tasks[0].val.len(), 20);
    }

    #[test]
    fn blobs_have_expected_counts_and_ranges() {
        let spec = SyntheticSpec { examples_per_class: 20, ..SyntheticSpec::default() };
        let seq = make_synthetic_blobs(&spec).unwrap();
        assert_eq!(seq.n_tasks(), 3);
        assert_eq!(seq.total_classes(), 6);
        for (i, t) in seq.tasks.iter().enumerate() {
            assert_eq!(t.class_range, (2 * i, 2 * i + 2));
            assert_eq!(t.test.len(), 40);
            // val = round(0.15 * 20) = 3 per class.
            assert_eq!(t.val.len(), 6);
            assert_eq!(t.train.len(), 34);
        }
    }

    #[test]
    fn one_example_per_class_gives_class_sized_sets() {
        let spec = SyntheticSpec { examples_per_class: 1, ..SyntheticSpec::default() };
        let seq = make_synthetic_blobs(&spec).unwrap();
        for t in &seq.tasks {
            assert_eq!(t.train.len(), spec.classes_per_task);
            assert_eq!(t.test.len(), spec.classes_per_task);
            assert_eq!(t.val.len(), 0);
        }
    }

    #[test]
    fn blob_means_sit_near_their_centers() {
        let spec = SyntheticSpec { examples_per_class: 500, ..SyntheticSpec::default() };
        let seq = make_synthetic_blobs(&spec).unwrap();
        let t = &seq.tasks[0];
        // Class 0 center is at angle 0: (radius, 0).
        let rows: Vec<usize> =
            (0..t.test.len()).filter(|&i| t.test.labels[i] == 0).collect();
        let mean_x: f64 =
            rows.iter().map(|&i| t.test.images[[i, 0]]).sum::<f64>() / rows.len() as f64;
        let mean_y: f64 =
            rows.iter().map(|&i| t.test.images[[i, 1]]).sum::<f64>() / rows.len() as f64;
        // Standard error is noise/sqrt(500) ~ 0.022; allow 5 of them.
        assert!((mean_x - spec.radius).abs() < 0.12, "mean_x {mean_x}");
        assert!(mean_y.abs() < 0.12, "mean_y {mean_y}");
    }

    #[test]
    fn blob_generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = make_synthetic_blobs(&spec).unwrap();
        let b = make_synthetic_blobs(&spec).unwrap();
        for (ta, tb) in a.tasks.iter().zip(b.tasks.iter()) {
            for (x, y) in ta.train.images.iter().zip(tb.train.images.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn permutation_is_a_bijection(dim in 1usize..200, seed in 0u64..50, task in 1usize..6) {
            let perm = task_permutation(dim, seed, task);
            let mut seen = vec![false; dim];
            for &p in &perm {
                prop_assert!(!seen[p]);
                seen[p] = true;
            }
            if task == 1 {
                prop_assert!(perm.iter().enumerate().all(|(i, &p)| i == p));
            }
        }

        #[test]
        fn stratified_carve_conserves_examples(
            per_class in 1usize..30,
            fraction in 0.0f64..0.9,
            seed in 0u64..20
        ) {
            let (ti, tl) = toy_labeled_set(per_class, 3, seed);
            let data = Dataset::new(ti, tl, 3).unwrap();
            let (train, val) = stratified_split(&data, fraction, seed);
            prop_assert_eq!(train.len() + val.len(), data.len());
            // Each class keeps at least one training example.
            for c in 0..3 {
                prop_assert!(train.labels.iter().any(|&l| l == c));
            }
        }
    }
}
