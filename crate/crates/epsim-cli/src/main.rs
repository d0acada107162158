//! Command-line harness: runs (path x schedule) experiment matrices over
//! seeded workloads, sweeps shape axes, writes fixed-schema CSV/JSON result
//! rows, and exposes the built-in verification battery.
//!
//! Exit codes: 0 on success, 1 when a differential check or property fails
//! (or a run/write fails at runtime), 2 for configuration errors.

mod experiment;
mod runner;

use std::path::PathBuf;
use std::process;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use experiment::{expand_cells, CellSpec, Experiment, OneOrMany, Patch};
use runner::{execute_cell, write_csv, write_json, ResultRow};

#[derive(Parser)]
#[command(
    name = "epsim",
    version,
    about = "Deterministic simulator for expert-parallel token exchange over pooled symmetric \
             memory"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment matrix at a single shape.
    Run(MatrixArgs),
    /// Sweep shape axes; ranks/tokens/hidden/top-k accept comma lists.
    Sweep(MatrixArgs),
    /// Run the built-in verification battery and print a pass/fail table.
    Selftest,
}

#[derive(Args, Default)]
struct MatrixArgs {
    /// Named starting point: ex1, small, or paper-shape.
    #[arg(long)]
    preset: Option<String>,
    /// Flat JSON config file; keys mirror these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// World size (comma list in sweep).
    #[arg(long)]
    ranks: Option<String>,
    /// Total expert count; must divide evenly across ranks.
    #[arg(long)]
    experts: Option<usize>,
    /// Tokens per rank (comma list in sweep).
    #[arg(long)]
    tokens: Option<String>,
    /// Model width per token (comma list in sweep).
    #[arg(long)]
    hidden: Option<String>,
    /// Routed experts per token (comma list in sweep).
    #[arg(long = "top-k")]
    top_k: Option<String>,
    /// Base RNG seed; repetitions advance it.
    #[arg(long)]
    seed: Option<u64>,
    /// Move payload rows as int8 with per-token scales.
    #[arg(long)]
    quant: Option<bool>,
    /// relayfree, baseline, or both.
    #[arg(long)]
    path: Option<String>,
    /// prefill, decode, or both.
    #[arg(long)]
    schedule: Option<String>,
    /// Decode address resolution: handshake or cached.
    #[arg(long = "combine-mode")]
    combine_mode: Option<String>,
    /// Decode rows per expert: a count, or `auto` for statistical sizing.
    #[arg(long)]
    capacity: Option<String>,
    /// Repetitions per cell.
    #[arg(long)]
    reps: Option<usize>,
    /// threaded or roundrobin.
    #[arg(long)]
    exec: Option<String>,
    /// csv or json.
    #[arg(long)]
    format: Option<String>,
    /// Result file name (default results.csv / results.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output directory (default $EPSIM_OUT_DIR, then the working dir).
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Refuse matrices larger than this many cells.
    #[arg(long = "max-cells")]
    max_cells: Option<usize>,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type AppResult<T> = Result<T, Failure>;

fn config_err(e: anyhow::Error) -> Failure {
    Failure::Config(e)
}

fn runtime_err(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run(args) => run_matrix(&args, true),
        Cmd::Sweep(args) => run_matrix(&args, false),
        Cmd::Selftest => Ok(selftest()),
    };
    match code {
        Ok(c) => process::exit(c),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            process::exit(2);
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            process::exit(1);
        }
    }
}

fn flags_patch(args: &MatrixArgs) -> anyhow::Result<Patch> {
    let mut p = Patch::default();
    if let Some(s) = &args.ranks {
        p.ranks = Some(OneOrMany::parse_list(s).context("--ranks")?);
    }
    p.experts = args.experts;
    if let Some(s) = &args.tokens {
        p.tokens = Some(OneOrMany::parse_list(s).context("--tokens")?);
    }
    if let Some(s) = &args.hidden {
        p.hidden = Some(OneOrMany::parse_list(s).context("--hidden")?);
    }
    if let Some(s) = &args.top_k {
        p.top_k = Some(OneOrMany::parse_list(s).context("--top-k")?);
    }
    p.seed = args.seed;
    p.quant = args.quant;
    p.path = args.path.clone();
    p.schedule = args.schedule.clone();
    p.combine_mode = args.combine_mode.clone();
    if let Some(s) = &args.capacity {
        p.capacity = Some(match s.parse::<usize>() {
            Ok(n) => experiment::CapacityKey::Rows(n),
            Err(_) => experiment::CapacityKey::Word(s.clone()),
        });
    }
    p.reps = args.reps;
    p.exec = args.exec.clone();
    p.format = args.format.clone();
    p.out = args.out.clone();
    p.out_dir = args.out_dir.clone();
    p.max_cells = args.max_cells;
    Ok(p)
}

fn resolve(args: &MatrixArgs) -> anyhow::Result<Experiment> {
    let mut exp = Experiment::default();
    if let Some(name) = &args.preset {
        let mut p = Patch::default();
        p.preset = Some(name.clone());
        exp.apply(&p)?;
    }
    if let Some(file) = &args.config {
        exp.apply(&Experiment::load_file(file)?)?;
    }
    exp.apply(&flags_patch(args)?)?;
    Ok(exp)
}

fn out_path(exp: &Experiment) -> PathBuf {
    let dir = exp
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("EPSIM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let name = exp
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("results.{}", exp.format.extension())));
    if name.is_absolute() {
        name
    } else {
        dir.join(name)
    }
}

fn run_matrix(args: &MatrixArgs, single_shape: bool) -> AppResult<i32> {
    let exp = resolve(args).map_err(config_err)?;
    let cells = expand_cells(&exp, single_shape).map_err(config_err)?;

    let mut rows: Vec<ResultRow> = Vec::with_capacity(cells.len());
    let mut mismatches = 0usize;
    for (idx, cell) in cells.iter().enumerate() {
        let row = execute_cell(cell, format!("{idx:04}")).map_err(runtime_err)?;
        println!("{}", describe(cell, &row));
        if !row.oracle_match {
            mismatches += 1;
        }
        rows.push(row);
    }

    let path = out_path(&exp);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(runtime_err)?;
        }
    }
    match exp.format {
        experiment::OutFormat::Csv => write_csv(&rows, &path).map_err(runtime_err)?,
        experiment::OutFormat::Json => write_json(&rows, &path).map_err(runtime_err)?,
    }
    println!("wrote {} rows to {}", rows.len(), path.display());

    if mismatches > 0 {
        eprintln!("{mismatches} of {} cells diverged from the dense reference", rows.len());
        Ok(1)
    } else {
        Ok(0)
    }
}

fn describe(cell: &CellSpec, row: &ResultRow) -> String {
    let verdict = if row.oracle_match { "ok" } else { "MISMATCH" };
    format!(
        "[{}] {}/{} R={} E={} T={} H={} k={} quant={} seed={} -> {} (w={}B r={}B err={})",
        row.run_id,
        cell.path,
        cell.sched,
        row.ranks,
        row.experts,
        row.tokens,
        row.hidden,
        row.k,
        row.quant,
        row.seed,
        verdict,
        row.write_bytes,
        row.read_bytes,
        row.max_abs_err,
    )
}

fn selftest() -> i32 {
    let report = epsim_core::run_selftest();
    for c in &report.checks {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        println!("{:<30} {:<4} {}", c.name, verdict, c.detail);
    }
    println!(
        "selftest: {} checks, {} failures",
        report.checks.len(),
        report.failures()
    );
    if report.all_passed() {
        0
    } else {
        1
    }
}
