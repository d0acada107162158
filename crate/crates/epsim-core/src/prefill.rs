//! Direct-placement exchange for the throughput schedule.
//!
//! One run walks five phases. Layout derives counts and stream offsets from
//! the local routing table alone. Notify publishes each rank's per-expert
//! count row to every peer, turning the gathered count matrix into prefix
//! offsets, receive totals, and expert window bases — control words only.
//! Dispatch then writes every routed row straight into its destination
//! expert window at `expert_base + offset + stream`, Expert transforms the
//! received rows in place, and Combine reads the transformed rows back from
//! the hosts' windows with direct remote reads and reduces them token-side.
//! No intermediate staging region holds payload bytes at any point.
//!
//! The layout/notify stage helpers are shared with the staged-relay
//! comparison path, which differs only in how payload rows travel.

use crate::config::SimConfig;
use crate::error::{Result, SimError};
use crate::matrix::Matrix;
use crate::metrics::{MetricsReport, Phase, TrafficClass};
use crate::model::{accumulate_weighted, ExpertFunction, RankWorkload, Workload};
use crate::plan::{global_plan, local_plan, GlobalPlan, LocalPlan};
use crate::quant::quantize_row_into;
use crate::sched::run_ranks;
use crate::symmem::{rows, ExecMode, PoolOptions, SymbolSpec, SymmetricPool};

/// Execution knobs shared by the exchange drivers.
#[derive(Debug, Clone)]
pub struct PathOptions {
    pub exec: ExecMode,
    /// Validate visibility ordering and single-writer discipline per row.
    pub checked: bool,
    /// Snapshot the expert window contents into the run result (test aid).
    pub capture_windows: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            exec: ExecMode::threaded_default(),
            checked: true,
            capture_windows: false,
        }
    }
}

/// Raw bytes of one rank's expert windows after a run (optional test aid).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowDump {
    pub input: Vec<u8>,
    pub output: Vec<u8>,
    pub scales: Vec<u8>,
}

/// Everything a finished exchange run reports back.
#[derive(Debug)]
pub struct ExchangeRun {
    /// Per rank: T x H combined outputs.
    pub y: Vec<Matrix<f32>>,
    /// Per rank: T x k expert-local destination rows (offset + stream).
    pub placement_rows: Vec<Matrix<u32>>,
    /// Per rank: the counts/stream table derived during layout.
    pub locals: Vec<LocalPlan>,
    /// The shared offset tables (identical on every rank).
    pub global: GlobalPlan,
    pub report: MetricsReport,
    /// Registered symbol names with their traffic classes.
    pub state_symbols: Vec<(String, TrafficClass)>,
    /// Per rank, per token: the row scale used for quantized dispatch.
    pub token_scales: Option<Vec<Vec<f32>>>,
    /// Per rank window bytes, when capture was requested.
    pub window_dumps: Option<Vec<WindowDump>>,
}

pub(crate) fn sym(prefix: &str, name: &str) -> String {
    format!("{prefix}{name}")
}

/// Bytes of one dispatched payload row: f32 scalars, or one byte per scalar
/// when rows travel quantized.
pub(crate) fn payload_row_bytes(cfg: &SimConfig) -> usize {
    if cfg.quant_enabled {
        cfg.hidden_dim
    } else {
        cfg.hidden_dim * cfg.payload_width
    }
}

/// Bytes of one expert output row (always full-width scalars).
pub(crate) fn output_row_bytes(cfg: &SimConfig) -> usize {
    cfg.hidden_dim * cfg.payload_width
}

/// The control-region layout both exchange paths register at bootstrap:
/// per-rank counts, per-expert counts, the stream table, the gathered count
/// matrix, prefix offsets, and the two receive summaries.
pub(crate) fn state_symbol_specs(cfg: &SimConfig, prefix: &str) -> Vec<SymbolSpec> {
    let r = cfg.num_ranks;
    let e = cfg.num_experts();
    let er = cfg.experts_per_rank;
    let tk = cfg.tokens_per_rank * cfg.top_k;
    let c = TrafficClass::Control;
    vec![
        SymbolSpec::new(&sym(prefix, "per_rank_counts"), r * 4, r * 4, c),
        SymbolSpec::new(&sym(prefix, "per_expert_counts"), e * 4, e * 4, c),
        SymbolSpec::new(&sym(prefix, "stream_idx"), tk * 4, (tk * 4).max(4), c),
        SymbolSpec::new(&sym(prefix, "count_matrix"), r * e * 4, e * 4, c),
        SymbolSpec::new(&sym(prefix, "put_offsets"), e * r * 4, e * r * 4, c),
        SymbolSpec::new(&sym(prefix, "recv_total"), 4, 4, c),
        SymbolSpec::new(&sym(prefix, "recv_per_expert"), er * 4, er * 4, c),
    ]
}

/// Slice budget covering `sizes` with per-symbol alignment plus slack.
pub(crate) fn budget_for(sizes: &[usize]) -> usize {
    sizes.iter().map(|b| b.div_ceil(64) * 64).sum::<usize>() + 4096
}

fn spec_sizes(specs: &[SymbolSpec]) -> Vec<usize> {
    specs.iter().map(|s| s.bytes).collect()
}

/// Phase 1: derive counts and stream offsets from the local routing table
/// and store them into this rank's control region. Purely local.
pub(crate) fn layout_stage(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    rw: &RankWorkload,
    prefix: &str,
) -> Result<LocalPlan> {
    pool.begin_phase(rank, Phase::Layout);
    let local = local_plan(cfg, &rw.routing)?;

    let w = pool.window(&sym(prefix, "per_rank_counts"), rank)?;
    let mut buf = vec![0u8; w.row_bytes];
    rows::u32s_to_bytes(&local.per_rank_counts, &mut buf);
    pool.local_write(rank, &w, 0, &buf)?;

    let w = pool.window(&sym(prefix, "per_expert_counts"), rank)?;
    let mut buf = vec![0u8; w.row_bytes];
    rows::u32s_to_bytes(&local.per_expert_counts, &mut buf);
    pool.local_write(rank, &w, 0, &buf)?;

    let w = pool.window(&sym(prefix, "stream_idx"), rank)?;
    if w.bytes > 0 {
        let mut buf = vec![0u8; w.row_bytes];
        rows::u32s_to_bytes(local.stream_idx.as_slice(), &mut buf);
        pool.local_write(rank, &w, 0, &buf)?;
    }
    Ok(local)
}

/// Phase 2: publish this rank's count row into every peer's count matrix,
/// gather the full matrix after the barrier, and derive the offset tables.
/// Moves exactly R*E count words per rank, all control class.
pub(crate) fn notify_stage(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    local: &LocalPlan,
    prefix: &str,
) -> Result<GlobalPlan> {
    pool.begin_phase(rank, Phase::Notify);
    let e = cfg.num_experts();
    let name = sym(prefix, "count_matrix");

    let mut buf = vec![0u8; e * 4];
    rows::u32s_to_bytes(&local.per_expert_counts, &mut buf);
    for dst in 0..cfg.num_ranks {
        let w = pool.window(&name, dst)?;
        pool.remote_write(rank, &w, rank, &buf)?;
    }
    pool.barrier(rank)?;

    let w = pool.window(&name, rank)?;
    let mut counts = Matrix::zeros(cfg.num_ranks, e);
    let mut row = vec![0u8; e * 4];
    for src in 0..cfg.num_ranks {
        pool.local_read(rank, &w, src, &mut row)?;
        rows::bytes_to_u32s(&row, counts.row_mut(src));
    }
    let global = global_plan(cfg, counts)?;

    let w = pool.window(&sym(prefix, "put_offsets"), rank)?;
    let mut buf = vec![0u8; w.row_bytes];
    rows::u32s_to_bytes(global.offsets.as_slice(), &mut buf);
    pool.local_write(rank, &w, 0, &buf)?;

    let w = pool.window(&sym(prefix, "recv_total"), rank)?;
    pool.local_write(rank, &w, 0, &rows::u32_to_bytes(global.recv_per_rank[rank]))?;

    let w = pool.window(&sym(prefix, "recv_per_expert"), rank)?;
    let mut buf = vec![0u8; w.row_bytes];
    let locals: Vec<u32> = (0..cfg.experts_per_rank)
        .map(|l| global.recv_per_expert[rank * cfg.experts_per_rank + l])
        .collect();
    rows::u32s_to_bytes(&locals, &mut buf);
    pool.local_write(rank, &w, 0, &buf)?;

    Ok(global)
}

/// Allocate the expert input/output (and scale) windows symmetrically. Every
/// rank's symbol is sized to the largest receive total so the collective
/// call sees identical arguments; each rank only ever touches its own first
/// `recv_per_rank[rank]` rows, carved per expert from the count matrix.
pub(crate) fn alloc_exchange_windows(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    global: &GlobalPlan,
    prefix: &str,
) -> Result<()> {
    let max_rows = global.recv_per_rank.iter().copied().max().unwrap_or(0) as usize;
    let in_row = payload_row_bytes(cfg);
    let out_row = output_row_bytes(cfg);
    pool.collective_alloc(
        rank,
        &sym(prefix, "expert_in"),
        max_rows * in_row,
        in_row,
        TrafficClass::Payload,
    )?;
    pool.collective_alloc(
        rank,
        &sym(prefix, "expert_out"),
        max_rows * out_row,
        out_row,
        TrafficClass::Payload,
    )?;
    if cfg.quant_enabled {
        pool.collective_alloc(
            rank,
            &sym(prefix, "expert_scale"),
            max_rows * 4,
            4,
            TrafficClass::Payload,
        )?;
    }
    Ok(())
}

/// Encode token `t`'s payload row once: full-width scalars, or a quantized
/// row whose scale is returned for the parallel scale window.
pub(crate) fn encode_token_row(
    cfg: &SimConfig,
    rw: &RankWorkload,
    t: usize,
    qbuf: &mut [i8],
    out: &mut [u8],
) -> Option<f32> {
    let x = rw.hidden.row(t);
    if cfg.quant_enabled {
        let scale = quantize_row_into(x, qbuf);
        rows::i8s_to_bytes(qbuf, out);
        Some(scale)
    } else {
        rows::f32s_to_bytes(x, out);
        None
    }
}

/// Phase 3 (direct): write each routed row straight into its destination
/// expert window; quantized runs write the row scale beside it. Ends with a
/// barrier so hosts see every placed row.
fn direct_dispatch_stage(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    rw: &RankWorkload,
    local: &LocalPlan,
    global: &GlobalPlan,
    prefix: &str,
) -> Result<(Matrix<u32>, Option<Vec<f32>>)> {
    pool.begin_phase(rank, Phase::Dispatch);
    let in_name = sym(prefix, "expert_in");
    let scale_name = sym(prefix, "expert_scale");
    let mut placement = Matrix::zeros(cfg.tokens_per_rank, cfg.top_k);
    let mut scales = cfg.quant_enabled.then(Vec::new);
    let mut qbuf = vec![0i8; cfg.hidden_dim];
    let mut buf = vec![0u8; payload_row_bytes(cfg)];
    for t in 0..cfg.tokens_per_rank {
        let scale = encode_token_row(cfg, rw, t, &mut qbuf, &mut buf);
        if let (Some(list), Some(s)) = (scales.as_mut(), scale) {
            list.push(s);
        }
        for j in 0..cfg.top_k {
            let e = *rw.routing.experts.at(t, j) as usize;
            let dst = cfg.host_rank(e);
            let local_row = global.branch_row(local, rank, t, j, e);
            *placement.at_mut(t, j) = local_row;
            let abs = (global.expert_base[e] + local_row) as usize;
            let win = pool.window(&in_name, dst)?;
            pool.remote_write(rank, &win, abs, &buf)?;
            if let Some(s) = scale {
                let sw = pool.window(&scale_name, dst)?;
                pool.remote_write(rank, &sw, abs, &s.to_le_bytes())?;
            }
        }
    }
    pool.barrier(rank)?;
    Ok((placement, scales))
}

/// Phase 4: transform every received row with its expert's function, in
/// place next to the inputs, then raise this rank's completion flag.
/// Quantized inputs are dequantized with their row scale first.
pub(crate) fn expert_stage(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    expert_base: &[u32],
    recv_per_expert: &[u32],
    experts: &dyn ExpertFunction,
    prefix: &str,
    step: u64,
) -> Result<()> {
    pool.begin_phase(rank, Phase::Expert);
    let in_w = pool.window(&sym(prefix, "expert_in"), rank)?;
    let out_w = pool.window(&sym(prefix, "expert_out"), rank)?;
    let scale_w = if cfg.quant_enabled {
        Some(pool.window(&sym(prefix, "expert_scale"), rank)?)
    } else {
        None
    };
    let mut raw = vec![0u8; in_w.row_bytes];
    let mut qbuf = vec![0i8; cfg.hidden_dim];
    let mut row = vec![0f32; cfg.hidden_dim];
    let mut out = vec![0u8; out_w.row_bytes];
    for l in 0..cfg.experts_per_rank {
        let e = rank * cfg.experts_per_rank + l;
        let base = expert_base[e] as usize;
        let n = recv_per_expert[e] as usize;
        for r in base..base + n {
            pool.local_read(rank, &in_w, r, &mut raw)?;
            if let Some(sw) = &scale_w {
                let mut sb = [0u8; 4];
                pool.local_read(rank, sw, r, &mut sb)?;
                let scale = f32::from_le_bytes(sb);
                rows::bytes_to_i8s(&raw, &mut qbuf);
                crate::quant::dequantize_into(&qbuf, scale, &mut row);
            } else {
                rows::bytes_to_f32s(&raw, &mut row);
            }
            experts.apply(e, &mut row);
            rows::f32s_to_bytes(&row, &mut out);
            pool.local_write(rank, &out_w, r, &out)?;
        }
    }
    pool.set_flag(rank, rank, &sym(prefix, "expert_done"), step)?;
    Ok(())
}

/// Phase 5 (direct): recompute each branch's destination row from this
/// rank's own layout/notify state, read the transformed row back from the
/// host's window, and reduce with the gate weights in ascending branch
/// order. Waits once on each remote host's completion flag.
fn direct_combine_stage(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    rw: &RankWorkload,
    local: &LocalPlan,
    global: &GlobalPlan,
    prefix: &str,
    step: u64,
) -> Result<Matrix<f32>> {
    pool.begin_phase(rank, Phase::Combine);
    let mut needs = vec![false; cfg.num_ranks];
    for t in 0..cfg.tokens_per_rank {
        for j in 0..cfg.top_k {
            needs[cfg.host_rank(*rw.routing.experts.at(t, j) as usize)] = true;
        }
    }
    let flag = sym(prefix, "expert_done");
    for (h, needed) in needs.iter().enumerate() {
        if *needed && h != rank {
            pool.wait_flag(rank, h, &flag, step)?;
        }
    }

    let out_name = sym(prefix, "expert_out");
    let mut y = Matrix::zeros(cfg.tokens_per_rank, cfg.hidden_dim);
    let mut raw = vec![0u8; output_row_bytes(cfg)];
    let mut row = vec![0f32; cfg.hidden_dim];
    for t in 0..cfg.tokens_per_rank {
        for j in 0..cfg.top_k {
            let e = *rw.routing.experts.at(t, j) as usize;
            let w = *rw.routing.weights.at(t, j);
            let h = cfg.host_rank(e);
            let q = (global.expert_base[e] + global.branch_row(local, rank, t, j, e)) as usize;
            let win = pool.window(&out_name, h)?;
            pool.remote_read(rank, &win, q, &mut raw)?;
            rows::bytes_to_f32s(&raw, &mut row);
            accumulate_weighted(y.row_mut(t), w, &row);
        }
    }
    Ok(y)
}

/// Snapshot this rank's used expert window rows (test aid; uncounted reads).
pub(crate) fn capture_windows(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    global: &GlobalPlan,
    prefix: &str,
) -> Result<WindowDump> {
    let used = global.recv_per_rank[rank] as usize;
    let mut dump = WindowDump {
        input: Vec::new(),
        output: Vec::new(),
        scales: Vec::new(),
    };
    let in_w = pool.window(&sym(prefix, "expert_in"), rank)?;
    let out_w = pool.window(&sym(prefix, "expert_out"), rank)?;
    let mut buf = vec![0u8; in_w.row_bytes];
    for r in 0..used {
        pool.local_read(rank, &in_w, r, &mut buf)?;
        dump.input.extend_from_slice(&buf);
    }
    let mut buf = vec![0u8; out_w.row_bytes];
    for r in 0..used {
        pool.local_read(rank, &out_w, r, &mut buf)?;
        dump.output.extend_from_slice(&buf);
    }
    if cfg.quant_enabled {
        let sw = pool.window(&sym(prefix, "expert_scale"), rank)?;
        let mut sb = [0u8; 4];
        for r in 0..used {
            pool.local_read(rank, &sw, r, &mut sb)?;
            dump.scales.extend_from_slice(&sb);
        }
    }
    Ok(dump)
}

type RankOutcome = (
    Matrix<f32>,
    Matrix<u32>,
    LocalPlan,
    GlobalPlan,
    Option<Vec<f32>>,
    Option<WindowDump>,
);

pub(crate) fn assemble_run(
    pool: &SymmetricPool,
    results: Vec<RankOutcome>,
) -> Result<ExchangeRun> {
    let mut y = Vec::new();
    let mut placement_rows = Vec::new();
    let mut locals = Vec::new();
    let mut global = None;
    let mut token_scales: Option<Vec<Vec<f32>>> = None;
    let mut window_dumps: Option<Vec<WindowDump>> = None;
    for (yy, pl, lo, gl, sc, dump) in results {
        y.push(yy);
        placement_rows.push(pl);
        locals.push(lo);
        match &global {
            None => global = Some(gl),
            Some(g) => {
                if *g != gl {
                    return Err(SimError::InvalidConfig(
                        "ranks derived different offset tables from the same counts".into(),
                    ));
                }
            }
        }
        if let Some(s) = sc {
            token_scales.get_or_insert_with(Vec::new).push(s);
        }
        if let Some(d) = dump {
            window_dumps.get_or_insert_with(Vec::new).push(d);
        }
    }
    Ok(ExchangeRun {
        y,
        placement_rows,
        locals,
        global: global.expect("world size is at least one"),
        report: pool.snapshot_metrics(),
        state_symbols: pool.registered_symbols(),
        token_scales,
        window_dumps,
    })
}

/// Run the full direct-placement exchange over one workload.
pub fn run_prefill(
    cfg: &SimConfig,
    wl: &Workload,
    experts: &dyn ExpertFunction,
    opts: &PathOptions,
) -> Result<ExchangeRun> {
    cfg.validate()?;
    wl.validate(cfg)?;
    let prefix = "pf.";
    let specs = state_symbol_specs(cfg, prefix);
    let worst_rows = cfg.num_ranks * cfg.tokens_per_rank * cfg.top_k;
    let mut sizes = spec_sizes(&specs);
    sizes.push(worst_rows * payload_row_bytes(cfg));
    sizes.push(worst_rows * output_row_bytes(cfg));
    if cfg.quant_enabled {
        sizes.push(worst_rows * 4);
    }
    let pool = SymmetricPool::bootstrap(
        PoolOptions {
            num_ranks: cfg.num_ranks,
            slice_budget: budget_for(&sizes),
            exec: opts.exec,
            checked: opts.checked,
        },
        &specs,
    )?;
    let step = pool.begin_step();
    let results = run_ranks(&pool, |rank| {
        let rw = &wl.ranks[rank];
        let local = layout_stage(&pool, rank, cfg, rw, prefix)?;
        let global = notify_stage(&pool, rank, cfg, &local, prefix)?;
        alloc_exchange_windows(&pool, rank, cfg, &global, prefix)?;
        let (placement, scales) =
            direct_dispatch_stage(&pool, rank, cfg, rw, &local, &global, prefix)?;
        expert_stage(
            &pool,
            rank,
            cfg,
            &global.expert_base,
            &global.recv_per_expert,
            experts,
            prefix,
            step,
        )?;
        let y = direct_combine_stage(&pool, rank, cfg, rw, &local, &global, prefix, step)?;
        let dump = if opts.capture_windows {
            Some(capture_windows(&pool, rank, cfg, &global, prefix)?)
        } else {
            None
        };
        Ok((y, placement, local, global, scales, dump))
    })?;
    assemble_run(&pool, results)
}
