//! Command-line front end: single solves, penalty sweeps, regularity
//! diagnostics, stability analysis and result-table aggregation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Deserialize;

use opqvi::bench::{
    aggregate, parse_csv, render_aggregate, run_descriptor, summary_table, write_csv, write_json,
    write_md, OutputFormat, RunDescriptor,
};
use opqvi::library::{builtin_registry, GeneratorParams};
use opqvi::problem::Iterate;
use opqvi::stability::{check_stab_cq, lip_bound_estimate, value_function, LipBound};
use opqvi::{cd_regularity_report, RegularityReport};

#[derive(Parser)]
#[command(name = "opqvi", version, about = "Semismooth Newton solver for QVI-constrained optimization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one problem over the descriptor's penalty list.
    Solve(RunArgs),
    /// Sweep the default penalty grid (or an explicit list).
    Sweep(RunArgs),
    /// Regularity diagnostics at an iterate (or at a fresh solve).
    Diagnose(DiagnoseArgs),
    /// Inner value function, qualification check and Lipschitz estimate.
    Stability(StabilityArgs),
    /// List registered problems.
    ListProblems,
    /// Aggregate result CSVs into the threshold-count table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
    Json,
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Md => OutputFormat::Md,
            FormatArg::Json => OutputFormat::Json,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON run descriptor; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// Penalty values (comma separated or repeated).
    #[arg(long = "lambda", value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Generator size parameter (boc).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    start_index: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// JSON run descriptor selecting the problem and solver settings.
    #[arg(long)]
    config: PathBuf,
    /// JSON iterate file; omitted: diagnose the solve at the first penalty.
    #[arg(long)]
    iterate: Option<PathBuf>,
    /// Activity tolerance override.
    #[arg(long)]
    tau_act: Option<f64>,
    /// Write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    problem: String,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON point file with fields x, y and optional varsigma.
    #[arg(long)]
    point: PathBuf,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 531441)]
    max_patterns: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSV files produced by solve/sweep.
    files: Vec<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Deserialize)]
struct IterateFile {
    x: Vec<f64>,
    y: Vec<f64>,
    #[serde(default)]
    varsigma: Option<Vec<f64>>,
    #[serde(default)]
    u: Option<Vec<f64>>,
    #[serde(default)]
    v: Option<Vec<f64>>,
    #[serde(default)]
    w: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct PointFile {
    x: Vec<f64>,
    y: Vec<f64>,
    #[serde(default)]
    varsigma: Option<Vec<f64>>,
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("OPQVI_OUT_DIR") {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_descriptor(args: &RunArgs, force_default_grid: bool) -> anyhow::Result<RunDescriptor> {
    let mut desc = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading descriptor {}", path.display()))?;
            serde_json::from_str::<RunDescriptor>(&text)
                .with_context(|| format!("parsing descriptor {}", path.display()))?
        }
        None => {
            let name = args
                .problem
                .clone()
                .ok_or_else(|| anyhow!("either --config or --problem is required"))?;
            RunDescriptor::new(name)
        }
    };
    if let Some(p) = &args.problem {
        desc.problem = p.clone();
    }
    if !args.lambdas.is_empty() {
        desc.lambdas = args.lambdas.clone();
    } else if force_default_grid && args.config.is_none() {
        desc.lambdas = opqvi::solver::default_lambda_grid();
    }
    if let Some(t) = args.t {
        desc.t = Some(t);
    }
    if let Some(s) = args.seed {
        desc.seed = s;
    }
    if let Some(si) = args.start_index {
        desc.start_index = si;
    }
    if let Some(eps) = args.eps {
        desc.config.eps = eps;
    }
    if let Some(mi) = args.max_iter {
        desc.config.max_iter = mi;
    }
    if let Some(f) = args.format {
        desc.format = f.into();
    }
    if let Some(o) = &args.output {
        desc.output = Some(o.clone());
    }
    Ok(desc)
}

fn cmd_run(args: &RunArgs, force_default_grid: bool) -> anyhow::Result<u8> {
    let desc = load_descriptor(args, force_default_grid)?;
    let registry = builtin_registry();
    let outcome = run_descriptor(&registry, &desc).map_err(|e| anyhow!("{e}"))?;

    if let Some(path) = &desc.output {
        let path = out_path(path);
        let file = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        match desc.format {
            OutputFormat::Csv => write_csv(file, &outcome.rows)?,
            OutputFormat::Md => write_md(file, &outcome.rows)?,
            OutputFormat::Json => write_json(file, &outcome.rows)?,
        }
        eprintln!("wrote {}", path.display());
    }
    print!("{}", summary_table(&outcome.rows));
    Ok(if outcome.all_acceptable { 0 } else { 2 })
}

fn render_regularity(rep: &RegularityReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("kkt residual       {:.3e}\n", rep.kkt_residual_norm));
    s.push_str(&format!(
        "licq (upper)       {:?} (rank {}/{} active rows)\n",
        rep.licq_upper.verdict, rep.licq_upper.rank, rep.licq_upper.active_rows
    ));
    s.push_str(&format!(
        "licq (inner)       {:?} (rank {}/{} active rows)\n",
        rep.licq_lower.verdict, rep.licq_lower.rank, rep.licq_lower.active_rows
    ));
    s.push_str(&format!("strict compl.      {:?}\n", rep.scc));
    s.push_str(&format!(
        "second order       {:?} (min eig {}, subspace dim {})\n",
        rep.sossc.verdict,
        rep.sossc
            .min_eigenvalue
            .map(|e| format!("{e:.3e}"))
            .unwrap_or_else(|| "n/a".into()),
        rep.sossc.subspace_dim
    ));
    s.push_str(&format!("inner-copy gap     {:.3e}\n", rep.varsigma_gap));
    s.push_str(&format!("cd-regular         {:?}\n", rep.cd_regular));
    s
}

fn cmd_diagnose(args: &DiagnoseArgs) -> anyhow::Result<u8> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading descriptor {}", args.config.display()))?;
    let desc: RunDescriptor = serde_json::from_str(&text)?;
    let registry = builtin_registry();
    let params = GeneratorParams { t: desc.t, seed: desc.seed };
    let entry = registry.instantiate(&desc.problem, &params).map_err(|e| anyhow!("{e}"))?;
    let lambda = *desc.lambdas.first().ok_or_else(|| anyhow!("empty lambda list"))?;

    let iterate = match &args.iterate {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading iterate {}", path.display()))?;
            let f: IterateFile = serde_json::from_str(&text)?;
            let d = entry.def.dims;
            let y = DVector::from_vec(f.y.clone());
            Iterate {
                x: DVector::from_vec(f.x),
                varsigma: f
                    .varsigma
                    .map(DVector::from_vec)
                    .unwrap_or_else(|| y.clone()),
                y,
                u: f.u.map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(d.p)),
                v: f.v.map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(d.q)),
                w: f.w.map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(d.q)),
            }
        }
        None => {
            let mut cfg = desc.config.clone();
            cfg.lambda = lambda;
            let start = entry
                .starts
                .get(desc.start_index)
                .map(|(x, y)| opqvi::default_start(&entry.def, Some((x, y))));
            let rep = opqvi::solve(&entry.def, &cfg, start.as_ref()).map_err(|e| anyhow!("{e}"))?;
            eprintln!("solved first: status {}, |Phi| = {:.3e}", rep.status, rep.phi_norm);
            rep.final_iterate.ok_or_else(|| anyhow!("solver returned no iterate"))?
        }
    };

    let tau = args.tau_act.unwrap_or(desc.config.tau_act);
    let rep = cd_regularity_report(&entry.def, &iterate, lambda, tau).map_err(|e| anyhow!("{e}"))?;
    print!("{}", render_regularity(&rep));
    if let Some(path) = &args.output {
        let path = out_path(path);
        let file = std::fs::File::create(&path)?;
        serde_json::to_writer_pretty(file, &rep)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_stability(args: &StabilityArgs) -> anyhow::Result<u8> {
    let registry = builtin_registry();
    let params = GeneratorParams { t: args.t, seed: args.seed };
    let entry = registry.instantiate(&args.problem, &params).map_err(|e| anyhow!("{e}"))?;
    let text = std::fs::read_to_string(&args.point)
        .with_context(|| format!("reading point {}", args.point.display()))?;
    let pf: PointFile = serde_json::from_str(&text)?;
    let x = DVector::from_vec(pf.x);
    let y = DVector::from_vec(pf.y);

    let vf = value_function(&entry.def, &x, &y).map_err(|e| anyhow!("{e}"))?;
    let varsigma = pf
        .varsigma
        .map(DVector::from_vec)
        .unwrap_or_else(|| vf.minimizer.clone());
    let cq = check_stab_cq(&entry.def, &x, &y, &varsigma, args.max_patterns)
        .map_err(|e| anyhow!("{e}"))?;
    let lip = lip_bound_estimate(&entry.def, &x, &y, &varsigma, args.samples)
        .map_err(|e| anyhow!("{e}"))?;

    println!("phi                {:.9}", vf.phi);
    println!(
        "inner minimizer    [{}]",
        vf.minimizer.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")
    );
    println!(
        "inner multipliers  [{}]",
        vf.multipliers.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")
    );
    println!("qualification      {cq:?}");
    match &lip {
        LipBound::Estimate(b) => println!("lip estimate       {b:.6}"),
        LipBound::Unbounded => println!("lip estimate       unbounded"),
    }

    if let Some(path) = &args.output {
        let path = out_path(path);
        let report = serde_json::json!({
            "phi": vf.phi,
            "minimizer": vf.minimizer.as_slice(),
            "multipliers": vf.multipliers.as_slice(),
            "qualification": format!("{cq:?}"),
            "lip_estimate": match &lip {
                LipBound::Estimate(b) => serde_json::json!(b),
                LipBound::Unbounded => serde_json::json!("unbounded"),
            },
        });
        let file = std::fs::File::create(&path)?;
        serde_json::to_writer_pretty(file, &report)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<u8> {
    if args.files.is_empty() {
        return Err(anyhow!("at least one result file is required"));
    }
    let mut rows = Vec::new();
    for f in &args.files {
        match std::fs::read_to_string(f) {
            Ok(text) => {
                let (mut parsed, warnings) = parse_csv(&text);
                for w in warnings {
                    eprintln!("warning: {}: {w}", f.display());
                }
                rows.append(&mut parsed);
            }
            Err(e) => eprintln!("warning: skipping {}: {e}", f.display()),
        }
    }
    let table = aggregate(&rows);
    let rendered = render_aggregate(&table);
    print!("{rendered}");
    if let Some(path) = &args.output {
        let path = out_path(path);
        let mut file = std::fs::File::create(&path)?;
        file.write_all(rendered.as_bytes())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Solve(a) => cmd_run(a, false),
        Cmd::Sweep(a) => cmd_run(a, true),
        Cmd::Diagnose(a) => cmd_diagnose(a),
        Cmd::Stability(a) => cmd_stability(a),
        Cmd::ListProblems => {
            for name in builtin_registry().names() {
                println!("{name}");
            }
            Ok(0)
        }
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            // configuration and input errors exit with 3
            ExitCode::from(3)
        }
    }
}
