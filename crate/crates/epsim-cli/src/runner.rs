//! Cell execution and result serialization: each cell runs one exchange
//! pipeline over a seeded (or pinned) workload, checks the combined outputs
//! against the dense single-process reference, and becomes one result row.
//! Rows serialize to CSV or JSON with a fixed column set.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use epsim_core::fixtures::worked_instance;
use epsim_core::quant::quantize_row;
use epsim_core::{
    dense_oracle, generate_workload, rounding_error_bound, run_baseline, run_decode, run_prefill,
    AffineExperts, CombineMode, DecodeOptions, ExecMode, Matrix, MetricsReport, PathOptions,
    Phase, SimConfig, Workload,
};

use crate::experiment::{CellSpec, CombineSel, ExecSel, PathSel, SchedSel};

/// One output row. Field order is the column order.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub path: String,
    pub schedule: String,
    pub quant: bool,
    pub combine_mode: String,
    #[serde(rename = "R")]
    pub ranks: usize,
    #[serde(rename = "E")]
    pub experts: usize,
    #[serde(rename = "T")]
    pub tokens: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    pub k: usize,
    pub phase: String,
    pub class: String,
    pub write_bytes: u64,
    pub read_bytes: u64,
    pub sync_events: u64,
    pub handshake_events: u64,
    pub relay_peak_bytes: u64,
    pub oracle_match: bool,
    pub max_abs_err: f64,
}

fn exec_mode(sel: ExecSel) -> ExecMode {
    match sel {
        ExecSel::Threaded => ExecMode::threaded_default(),
        ExecSel::RoundRobin => ExecMode::RoundRobin,
    }
}

fn cell_workload(cell: &CellSpec) -> Result<Workload> {
    if cell.pinned_workload {
        Ok(worked_instance().1)
    } else {
        Ok(generate_workload(&cell.cfg)?)
    }
}

/// Compare a path's outputs to the dense reference. Exact transport must
/// match bitwise; quantized transport must stay within the per-token
/// analytic rounding bound.
fn differential(
    cfg: &SimConfig,
    wl: &Workload,
    experts: &AffineExperts,
    y: &[Matrix<f32>],
    oracle: &[Matrix<f32>],
) -> (bool, f64) {
    let mut max_err = 0f64;
    let mut within = true;
    for rank in 0..cfg.num_ranks {
        for t in 0..cfg.tokens_per_rank {
            let bound = if cfg.quant_enabled {
                let scale = quantize_row(wl.ranks[rank].hidden.row(t)).scale;
                rounding_error_bound(&wl.ranks[rank].routing, experts, t, scale) + 1e-6
            } else {
                0.0
            };
            for i in 0..cfg.hidden_dim {
                let d = (*y[rank].at(t, i) as f64 - *oracle[rank].at(t, i) as f64).abs();
                max_err = max_err.max(d);
                if d > bound {
                    within = false;
                }
            }
        }
    }
    (within, max_err)
}

/// Run one cell and produce its row.
pub fn execute_cell(cell: &CellSpec, run_id: String) -> Result<ResultRow> {
    let cfg = &cell.cfg;
    let wl = cell_workload(cell)?;
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let oracle = dense_oracle(cfg, &wl, &experts)?;

    let path_opts = PathOptions {
        exec: exec_mode(cell.exec),
        checked: true,
        capture_windows: false,
    };
    let (y, report, combine_mode): (Vec<Matrix<f32>>, MetricsReport, String) =
        match (cell.path, cell.sched) {
            (PathSel::Relayfree, SchedSel::Prefill) => {
                let run = run_prefill(cfg, &wl, &experts, &path_opts)?;
                (run.y, run.report, "-".into())
            }
            (PathSel::Baseline, SchedSel::Prefill) => {
                let run = run_baseline(cfg, &wl, &experts, &path_opts)?;
                (run.y, run.report, "-".into())
            }
            (PathSel::Relayfree, SchedSel::Decode) => {
                let opts = DecodeOptions {
                    combine_mode: match cell.combine_mode {
                        CombineSel::Handshake => CombineMode::Handshake,
                        CombineSel::Cached => CombineMode::Cached,
                    },
                    capacity_per_expert: cell.capacity,
                    exec: exec_mode(cell.exec),
                    checked: true,
                };
                let mut run = run_decode(cfg, std::slice::from_ref(&wl), &experts, &opts)?;
                let step = run.steps.pop().expect("one step per cell");
                (step.y, run.report, cell.combine_mode.to_string())
            }
            (PathSel::Baseline, SchedSel::Decode) => {
                unreachable!("rejected during matrix expansion")
            }
        };

    let (oracle_match, max_abs_err) = differential(cfg, &wl, &experts, &y, &oracle);
    Ok(ResultRow {
        run_id,
        seed: cfg.seed,
        path: cell.path.to_string(),
        schedule: cell.sched.to_string(),
        quant: cfg.quant_enabled,
        combine_mode,
        ranks: cfg.num_ranks,
        experts: cfg.num_experts(),
        tokens: cfg.tokens_per_rank,
        hidden: cfg.hidden_dim,
        k: cfg.top_k,
        phase: "all".into(),
        class: "all".into(),
        write_bytes: report.total_write_bytes(),
        read_bytes: report.total_read_bytes(),
        sync_events: report.sync_events_total(),
        handshake_events: report.handshake_events(Phase::Combine),
        relay_peak_bytes: report.relay_peak_max(),
        oracle_match,
        max_abs_err,
    })
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().with_context(|| format!("flushing {}", path.display()))?;
    Ok(())
}

pub fn write_json(rows: &[ResultRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, rows)
        .with_context(|| format!("writing {}", path.display()))?;
    use std::io::Write;
    writeln!(w)?;
    Ok(())
}
