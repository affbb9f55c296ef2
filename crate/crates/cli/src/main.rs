//! `ucb`: train and evaluate Bayesian continual-learning runs.
//!
//! Subcommands: `run` trains a configured task sequence and writes artifacts,
//! `gradcheck` verifies analytic gradients against finite differences,
//! `table` summarizes metrics across finished run directories and `tune`
//! grid-searches the prior. Exit codes: 0 success, 1 configuration or usage
//! errors, 2 training divergence.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ucb_core::{
    default_prior_grid, gradcheck_toy, read_metrics_json, run_sequence, tune_hyperparams,
    FdSettings, RunMetrics, UcbError,
};

use config::{load_sequence, parse_run_config};

#[derive(Parser)]
#[command(
    name = "ucb",
    version,
    about = "Bayesian neural networks with uncertainty-guided continual learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the task sequence described by a config file
    Run {
        /// Flat key = value config file
        config: PathBuf,
    },
    /// Check analytic gradients against central finite differences
    Gradcheck {
        /// Seed for the toy network, data and noise draws
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Deliberately corrupt the analytic gradients first
        #[arg(long)]
        inject_fault: bool,
    },
    /// Summarize metrics.json files from finished run directories
    Table {
        /// Run directories to read
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the rows as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Grid-search the prior on the first tasks of the configured data
    Tune {
        /// Flat key = value config file
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's default exit code for usage errors is 2, which this tool
            // reserves for divergence; usage problems map to 1 instead.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let diverged = err
                .downcast_ref::<UcbError>()
                .is_some_and(|e| matches!(e, UcbError::Divergence(_)));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { config } => cmd_run(&config),
        Cmd::Gradcheck { seed, step, tolerance, inject_fault } => {
            cmd_gradcheck(seed, step, tolerance, inject_fault)
        }
        Cmd::Table { dirs, csv } => cmd_table(&dirs, csv.as_deref()),
        Cmd::Tune { config } => cmd_tune(&config),
    }
}

fn read_config(path: &Path) -> Result<(config::RunConfig, String)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg = parse_run_config(&text).with_context(|| format!("config {}", path.display()))?;
    Ok((cfg, text))
}

fn cmd_run(path: &Path) -> Result<ExitCode> {
    let (cfg, text) = read_config(path)?;
    let seq = load_sequence(&cfg.data)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        // Snapshot the config verbatim next to the artifacts.
        std::fs::write(dir.join("config.txt"), &text)?;
    }
    let out = run_sequence(&cfg.train, &seq, cfg.out_dir.as_deref())?;
    let m = &out.metrics;
    println!("mode={} ACC={:.2} BWT={:.2}", m.mode, m.acc, m.bwt);
    if let Some(g) = m.generalized_acc {
        println!("generalized_acc={g:.2}");
    }
    for p in &out.prune_reports {
        println!(
            "prune task={} ratio={} pre={:.2} post={:.2}",
            p.task_id, p.ratio, p.pre_accuracy, p.post_accuracy
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, step: f64, tolerance: f64, inject_fault: bool) -> Result<ExitCode> {
    let settings = FdSettings { step, tolerance, inject_fault };
    let report = gradcheck_toy(seed, &settings)?;
    for g in report.failing_groups() {
        println!(
            "FAIL layer {} {}: rel err {:.3e} at index {} (analytic {:.6e}, numeric {:.6e})",
            g.layer, g.block, g.max_rel_err, g.worst_index, g.analytic, g.numeric
        );
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!(
        "gradcheck: {verdict} max_rel_err={:.6e} step={:e} tolerance={:e}",
        report.max_rel_err, report.step, report.tolerance
    );
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn format_ratios(m: &RunMetrics) -> String {
    if m.prune_ratios.is_empty() {
        return "-".to_owned();
    }
    m.prune_ratios
        .iter()
        .map(|(_, r)| format!("{r}"))
        .collect::<Vec<_>>()
        .join("/")
}

fn cmd_table(dirs: &[PathBuf], csv: Option<&Path>) -> Result<ExitCode> {
    let mut rows: Vec<(String, RunMetrics)> = Vec::new();
    for dir in dirs {
        let path = dir.join("metrics.json");
        match read_metrics_json(&path) {
            Ok(m) => rows.push((dir.display().to_string(), m)),
            Err(e) => eprintln!("warning: skipping {}: {e}", dir.display()),
        }
    }
    if rows.is_empty() {
        eprintln!("error: no readable metrics under the given directories");
        return Ok(ExitCode::from(1));
    }

    let header = ["run", "mode", "tasks", "params", "ACC", "BWT", "gen_acc", "prune_ratios"];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|(name, m)| {
            [
                name.clone(),
                m.mode.clone(),
                m.n_tasks.to_string(),
                m.param_count.to_string(),
                format!("{:.2}", m.acc),
                format!("{:.2}", m.bwt),
                m.generalized_acc.map_or("-".to_owned(), |g| format!("{g:.2}")),
                format_ratios(m),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(c.len());
        }
    }
    let print_row = |cols: &[String]| {
        let line = cols
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<width$}", width = *w))
            .collect::<Vec<_>>()
            .join("  ");
        println!("{}", line.trim_end());
    };
    print_row(&header.map(str::to_owned));
    for row in &cells {
        print_row(row);
    }

    if let Some(path) = csv {
        let mut out = String::from("run,mode,n_tasks,param_count,acc,bwt,generalized_acc,prune_ratios\n");
        for (name, m) in &rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                name,
                m.mode,
                m.n_tasks,
                m.param_count,
                m.acc,
                m.bwt,
                m.generalized_acc.map_or(String::new(), |g| format!("{g}")),
                format_ratios(m).replace('-', "")
            ));
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_tune(path: &Path) -> Result<ExitCode> {
    let (cfg, _) = read_config(path)?;
    let seq = load_sequence(&cfg.data)?;
    let grid = default_prior_grid();
    let (best, results) = tune_hyperparams(&cfg.train, &seq, &grid)?;
    for r in &results {
        println!(
            "pi={} sigma1={} sigma2={} objective={:.2}",
            r.prior.pi, r.prior.sigma1, r.prior.sigma2, r.objective
        );
    }
    println!("best: pi={} sigma1={} sigma2={}", best.pi, best.sigma1, best.sigma2);
    Ok(ExitCode::SUCCESS)
}
