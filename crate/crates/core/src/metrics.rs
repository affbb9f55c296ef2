//! Continual-learning metrics and run artifacts.
//!
//! The central object is the task accuracy matrix R: R[i][j] is the accuracy
//! on task i's test set after training through task j, so only cells with
//! i <= j are ever populated. Backward transfer averages the final-column
//! drop against the diagonal; overall accuracy averages the final column.
//!
//! The matrix persists as CSV with shortest-round-trip float formatting, so
//! a written matrix reloads to bitwise-identical numbers and recomputed
//! metrics match exactly. Summary metrics persist as a flat JSON object.

use std::path::Path;

use crate::error::{Result, UcbError};

/// Task accuracy matrix with 1-based task indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RMatrix {
    n: usize,
    cells: Vec<Option<f64>>,
}

impl RMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self { n: n_tasks, cells: vec![None; n_tasks * n_tasks] }
    }

    pub fn n_tasks(&self) -> usize {
        self.n
    }

    fn idx(&self, task: usize, after: usize) -> Result<usize> {
        if task < 1 || task > self.n || after < 1 || after > self.n {
            return Err(UcbError::InvalidArgument(format!(
                "cell ({task}, {after}) outside a {n}-task matrix",
                n = self.n
            )));
        }
        Ok((task - 1) * self.n + (after - 1))
    }

    pub fn set(&mut self, task: usize, after: usize, accuracy: f64) -> Result<()> {
        let i = self.idx(task, after)?;
        self.cells[i] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Result<Option<f64>> {
        Ok(self.cells[self.idx(task, after)?])
    }

    fn require(&self, task: usize, after: usize) -> Result<f64> {
        self.get(task, after)?.ok_or_else(|| {
            UcbError::InvalidState(format!(
                "matrix cell ({task}, {after}) was never populated"
            ))
        })
    }
}

/// Backward transfer and final accuracy:
/// BWT = mean over tasks of (final-column accuracy - diagonal accuracy),
/// ACC = mean of the final column. A single task gives BWT = 0 by
/// construction. Needs the diagonal and final column populated.
pub fn bwt_acc(r: &RMatrix) -> Result<(f64, f64)> {
    let n = r.n_tasks();
    if n == 0 {
        return Err(UcbError::InvalidArgument("empty accuracy matrix".into()));
    }
    let mut bwt = 0.0;
    let mut acc = 0.0;
    for i in 1..=n {
        let last = r.require(i, n)?;
        let diag = r.require(i, i)?;
        bwt += last - diag;
        acc += last;
    }
    Ok((bwt / n as f64, acc / n as f64))
}

/// Percentage of predictions matching the labels.
pub fn accuracy_percent(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(UcbError::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(UcbError::InvalidArgument("no predictions to score".into()));
    }
    let correct = predictions.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

/// Write the matrix as CSV: header `task,1,...,n`, one row per task, empty
/// fields for unpopulated cells. Floats use Rust's shortest round-trip
/// format, so reading the file back reproduces the exact bits.
pub fn write_rmatrix_csv(r: &RMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("task");
    for j in 1..=r.n_tasks() {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for i in 1..=r.n_tasks() {
        out.push_str(&i.to_string());
        for j in 1..=r.n_tasks() {
            out.push(',');
            if let Some(v) = r.get(i, j)? {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_rmatrix_csv(path: &Path) -> Result<RMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| UcbError::Format("empty accuracy matrix file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"task") || cols.len() < 2 {
        return Err(UcbError::Format(format!("bad matrix header: {header}")));
    }
    let n = cols.len() - 1;
    for (j, c) in cols[1..].iter().enumerate() {
        if c.parse::<usize>().ok() != Some(j + 1) {
            return Err(UcbError::Format(format!("bad matrix header column: {c}")));
        }
    }
    let mut r = RMatrix::new(n);
    let mut rows = 0;
    for (li, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 {
            return Err(UcbError::Format(format!(
                "matrix row {} has {} fields, expected {}",
                li + 2,
                fields.len(),
                n + 1
            )));
        }
        let task: usize = fields[0]
            .parse()
            .map_err(|_| UcbError::Format(format!("bad task id: {}", fields[0])))?;
        if task != li + 1 {
            return Err(UcbError::Format(format!(
                "matrix rows out of order: found task {task} at row {}",
                li + 2
            )));
        }
        for (j, f) in fields[1..].iter().enumerate() {
            if f.is_empty() {
                continue;
            }
            let v: f64 = f
                .parse()
                .map_err(|_| UcbError::Format(format!("bad accuracy value: {f}")))?;
            r.set(task, j + 1, v)?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(UcbError::Format(format!("matrix has {rows} rows, expected {n}")));
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Summary metrics
// ---------------------------------------------------------------------------

/// Summary of a finished run, persisted as a flat JSON object.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub mode: String,
    /// Trainable scalar count: mu and rho both count for Bayesian modes, mu
    /// only for the ordinary baselines.
    pub param_count: usize,
    pub n_tasks: usize,
    pub acc: f64,
    pub bwt: f64,
    /// Single-head runs only: accuracy with the argmax unrestricted over
    /// every class the network knows.
    pub generalized_acc: Option<f64>,
    /// (task, chosen released fraction) per pruned boundary.
    pub prune_ratios: Vec<(usize, f64)>,
}

pub fn write_metrics_json(m: &RunMetrics, path: &Path) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("mode".into(), serde_json::Value::String(m.mode.clone()));
    obj.insert("param_count".into(), serde_json::Value::from(m.param_count));
    obj.insert("n_tasks".into(), serde_json::Value::from(m.n_tasks));
    obj.insert("acc".into(), serde_json::Value::from(m.acc));
    obj.insert("bwt".into(), serde_json::Value::from(m.bwt));
    if let Some(g) = m.generalized_acc {
        obj.insert("generalized_acc".into(), serde_json::Value::from(g));
    }
    for &(task, ratio) in &m.prune_ratios {
        obj.insert(format!("prune_ratio_task{task}"), serde_json::Value::from(ratio));
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))
        .map_err(|e| UcbError::Format(format!("metrics serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics_json(path: &Path) -> Result<RunMetrics> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| UcbError::Format(format!("metrics parse: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| UcbError::Format("metrics file is not a JSON object".into()))?;
    let str_field = |k: &str| -> Result<String> {
        obj.get(k)
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| UcbError::Format(format!("metrics missing string field {k}")))
    };
    let num_field = |k: &str| -> Result<f64> {
        obj.get(k)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| UcbError::Format(format!("metrics missing numeric field {k}")))
    };
    let int_field = |k: &str| -> Result<usize> {
        obj.get(k)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| UcbError::Format(format!("metrics missing integer field {k}")))
    };
    let mut prune_ratios = Vec::new();
    for (k, v) in obj {
        if let Some(rest) = k.strip_prefix("prune_ratio_task") {
            let task: usize = rest
                .parse()
                .map_err(|_| UcbError::Format(format!("bad prune ratio key {k}")))?;
            let ratio = v
                .as_f64()
                .ok_or_else(|| UcbError::Format(format!("bad prune ratio value for {k}")))?;
            prune_ratios.push((task, ratio));
        }
    }
    prune_ratios.sort_by_key(|&(t, _)| t);
    Ok(RunMetrics {
        mode: str_field("mode")?,
        param_count: int_field("param_count")?,
        n_tasks: int_field("n_tasks")?,
        acc: num_field("acc")?,
        bwt: num_field("bwt")?,
        generalized_acc: obj.get("generalized_acc").and_then(|v| v.as_f64()),
        prune_ratios,
    })
}
