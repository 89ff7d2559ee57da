//! Run descriptors, result tables and aggregation.
//!
//! CSV is the canonical persistence format: one row per `(problem, lambda,
//! start)` cell with a fixed header. Markdown and JSON renderings carry the
//! same formatted numbers. Aggregation reproduces the threshold-count table
//! layout (iterations, time, unit terminal step, small inner gap) per
//! penalty value.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::library::{GeneratorParams, Registry};
use crate::problem::Iterate;
use crate::solver::{default_start, lambda_sweep, SolveReport, SolverConfig};
use crate::{Error, Result};

pub const CSV_HEADER: &str =
    "problem,lambda,start_index,status,f_hat,phi_norm,iterations,time_s,sigma_gap,newton_steps,gradient_steps,final_alpha";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Md,
    Json,
}

fn default_lambdas() -> Vec<f64> {
    crate::solver::default_lambda_grid()
}

/// Explicit starting point override.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartOverride {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Everything one run needs; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDescriptor {
    pub problem: String,
    #[serde(default)]
    pub t: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub start_index: usize,
    #[serde(default)]
    pub start: Option<StartOverride>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub config: SolverConfig,
    #[serde(default)]
    pub format: OutputFormat,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunDescriptor {
    pub fn new(problem: impl Into<String>) -> Self {
        RunDescriptor {
            problem: problem.into(),
            t: None,
            seed: 0,
            start_index: 0,
            start: None,
            lambdas: default_lambdas(),
            config: SolverConfig::default(),
            format: OutputFormat::Csv,
            output: None,
        }
    }
}

/// One result row of the canonical table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub problem: String,
    pub lambda: f64,
    pub start_index: usize,
    pub status: String,
    pub f_hat: f64,
    pub phi_norm: f64,
    pub iterations: usize,
    pub time_s: f64,
    pub sigma_gap: f64,
    pub newton_steps: usize,
    pub gradient_steps: usize,
    pub final_alpha: f64,
}

impl RunRow {
    pub fn from_report(problem: &str, lambda: f64, start_index: usize, r: &SolveReport) -> Self {
        RunRow {
            problem: problem.to_string(),
            lambda,
            start_index,
            status: r.status.to_string(),
            f_hat: r.f_hat,
            phi_norm: r.phi_norm,
            iterations: r.iterations,
            time_s: r.wall_time,
            sigma_gap: r.varsigma_gap,
            newton_steps: r.newton_steps,
            gradient_steps: r.gradient_steps,
            final_alpha: r.final_alpha,
        }
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.problem.clone(),
            format!("{}", self.lambda),
            format!("{}", self.start_index),
            self.status.clone(),
            format!("{:.6}", self.f_hat),
            format!("{:.3e}", self.phi_norm),
            format!("{}", self.iterations),
            format!("{:.4}", self.time_s),
            format!("{:.6}", self.sigma_gap),
            format!("{}", self.newton_steps),
            format!("{}", self.gradient_steps),
            format!("{:.6}", self.final_alpha),
        ]
    }
}

/// Outcome of one `cmd_solve`-style run.
#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<RunRow>,
    pub reports: Vec<(f64, usize, Option<SolveReport>)>,
    pub all_acceptable: bool,
}

/// Execute a descriptor against the registry: instantiate the problem,
/// resolve the start, sweep the penalty list.
pub fn run_descriptor(registry: &Registry, desc: &RunDescriptor) -> Result<RunOutcome> {
    if desc.lambdas.is_empty() {
        return Err(Error::Config("lambda list must not be empty".into()));
    }
    desc.config.validate()?;
    let params = GeneratorParams { t: desc.t, seed: desc.seed };
    let entry = registry.instantiate(&desc.problem, &params)?;
    let start: Iterate = if let Some(ov) = &desc.start {
        let x = nalgebra::DVector::from_vec(ov.x.clone());
        let y = nalgebra::DVector::from_vec(ov.y.clone());
        if x.len() != entry.def.dims.n || y.len() != entry.def.dims.m {
            return Err(Error::Dim("start override does not match problem dims".into()));
        }
        default_start(&entry.def, Some((&x, &y)))
    } else if let Some((x0, y0)) = entry.starts.get(desc.start_index) {
        default_start(&entry.def, Some((x0, y0)))
    } else {
        default_start(&entry.def, None)
    };

    let cells = lambda_sweep(&entry.def, &desc.lambdas, &desc.config, &[start]);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut all_acceptable = true;
    for cell in cells {
        match &cell.report {
            Some(r) => {
                all_acceptable &= r.is_acceptable();
                rows.push(RunRow::from_report(&entry.name, cell.lambda, desc.start_index, r));
            }
            None => {
                all_acceptable = false;
                // keep the status cell comma-free for the plain CSV format
                let detail = cell
                    .error
                    .as_deref()
                    .unwrap_or("unknown")
                    .replace(',', ";");
                rows.push(RunRow {
                    problem: entry.name.clone(),
                    lambda: cell.lambda,
                    start_index: desc.start_index,
                    status: format!("error: {detail}"),
                    f_hat: f64::NAN,
                    phi_norm: f64::NAN,
                    iterations: 0,
                    time_s: 0.0,
                    sigma_gap: f64::NAN,
                    newton_steps: 0,
                    gradient_steps: 0,
                    final_alpha: 0.0,
                });
            }
        }
        reports.push((cell.lambda, cell.start_index, cell.report));
    }
    Ok(RunOutcome { rows, reports, all_acceptable })
}

pub fn write_csv<W: Write>(mut out: W, rows: &[RunRow]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.fields().join(","))?;
    }
    Ok(())
}

pub fn write_md<W: Write>(mut out: W, rows: &[RunRow]) -> std::io::Result<()> {
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    writeln!(out, "| {} |", header.join(" | "))?;
    writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"))?;
    for r in rows {
        writeln!(out, "| {} |", r.fields().join(" | "))?;
    }
    Ok(())
}

pub fn write_json<W: Write>(out: W, rows: &[RunRow]) -> std::io::Result<()> {
    serde_json::to_writer_pretty(out, rows).map_err(std::io::Error::other)
}

/// Fixed-width console summary in the result-table layout.
pub fn summary_table(rows: &[RunRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<18} {:>10} {:>12} {:>10} {:>6} {:>8} {:>12} {:>10}\n",
        "problem", "lambda", "F_hat", "|Phi|", "iters", "time_s", "status", "sigma_gap"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>10} {:>12.4} {:>10.2e} {:>6} {:>8.3} {:>12} {:>10.4}\n",
            r.problem,
            format!("{:.4}", r.lambda),
            r.f_hat,
            r.phi_norm,
            r.iterations,
            r.time_s,
            r.status,
            r.sigma_gap
        ));
    }
    s
}

/// Parse the canonical CSV back into rows; malformed lines are skipped and
/// reported through the returned warning list.
pub fn parse_csv(content: &str) -> (Vec<RunRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 {
            if line.trim() != CSV_HEADER {
                warnings.push("line 1: unexpected header".to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            warnings.push(format!("line {}: expected 12 fields, got {}", i + 1, f.len()));
            continue;
        }
        let parsed = (|| -> Option<RunRow> {
            Some(RunRow {
                problem: f[0].to_string(),
                lambda: f[1].parse().ok()?,
                start_index: f[2].parse().ok()?,
                status: f[3].to_string(),
                f_hat: f[4].parse().ok()?,
                phi_norm: f[5].parse().ok()?,
                iterations: f[6].parse().ok()?,
                time_s: f[7].parse().ok()?,
                sigma_gap: f[8].parse().ok()?,
                newton_steps: f[9].parse().ok()?,
                gradient_steps: f[10].parse().ok()?,
                final_alpha: f[11].parse().ok()?,
            })
        })();
        match parsed {
            Some(r) => rows.push(r),
            None => warnings.push(format!("line {}: unparsable numeric field", i + 1)),
        }
    }
    (rows, warnings)
}

/// Threshold-count aggregation per penalty value.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateTable {
    pub lambdas: Vec<f64>,
    /// (row label, one count per lambda)
    pub counts: Vec<(String, Vec<usize>)>,
    pub total_runs: Vec<usize>,
}

pub fn aggregate(rows: &[RunRow]) -> AggregateTable {
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lambdas.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let metrics: Vec<(&str, Box<dyn Fn(&RunRow) -> bool>)> = vec![
        ("iterations < 100", Box::new(|r: &RunRow| r.iterations < 100)),
        ("iterations < 200", Box::new(|r: &RunRow| r.iterations < 200)),
        ("time < 0.1 s", Box::new(|r: &RunRow| r.time_s < 0.1)),
        ("time < 0.5 s", Box::new(|r: &RunRow| r.time_s < 0.5)),
        ("alpha = 1 at stop", Box::new(|r: &RunRow| (r.final_alpha - 1.0).abs() < 1e-12)),
        ("sigma_gap < 0.05", Box::new(|r: &RunRow| r.sigma_gap < 0.05)),
    ];

    let mut counts = Vec::new();
    for (label, pred) in &metrics {
        let per_lambda: Vec<usize> = lambdas
            .iter()
            .map(|&l| {
                rows.iter()
                    .filter(|r| (r.lambda - l).abs() < 1e-15 && pred(r))
                    .count()
            })
            .collect();
        counts.push((label.to_string(), per_lambda));
    }
    let total_runs: Vec<usize> = lambdas
        .iter()
        .map(|&l| rows.iter().filter(|r| (r.lambda - l).abs() < 1e-15).count())
        .collect();
    AggregateTable { lambdas, counts, total_runs }
}

pub fn render_aggregate(t: &AggregateTable) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<22}", ""));
    for l in &t.lambdas {
        s.push_str(&format!("{:>12}", format!("l={l:.4}")));
    }
    s.push('\n');
    for (label, row) in &t.counts {
        s.push_str(&format!("{label:<22}"));
        for c in row {
            s.push_str(&format!("{c:>12}"));
        }
        s.push('\n');
    }
    s.push_str(&format!("{:<22}", "runs"));
    for c in &t.total_runs {
        s.push_str(&format!("{c:>12}"));
    }
    s.push('\n');
    s
}
