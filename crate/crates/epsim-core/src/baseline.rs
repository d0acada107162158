//! Staged-relay comparison path: the conventional pack → transfer → restore
//! pipeline for both exchange directions.
//!
//! Planning (layout/notify) is shared with the direct path so the two differ
//! only in payload movement. Dispatch packs routed rows into a local send
//! stage grouped by destination rank, transfers each group into the
//! destination's relay region, and restores from the relay into the expert
//! windows — three touches per row instead of one. Combine mirrors it:
//! hosts pack expert outputs per consumer, transfer into consumer relay
//! regions, and consumers restore to token order before reducing. Transfer
//! and restore writes are tagged relay traffic; pack writes are local
//! staging. The relay regions also feed a per-rank occupancy tracker whose
//! in-flight peak is reported per phase.

use crate::config::SimConfig;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::metrics::{Phase, TrafficClass};
use crate::model::{accumulate_weighted, ExpertFunction, RankWorkload, Workload};
use crate::plan::{GlobalPlan, LocalPlan};
use crate::prefill::{
    alloc_exchange_windows, assemble_run, budget_for, capture_windows, encode_token_row,
    expert_stage, layout_stage, notify_stage, output_row_bytes, payload_row_bytes,
    state_symbol_specs, sym, ExchangeRun, PathOptions,
};
use crate::sched::run_ranks;
use crate::symmem::{rows, PoolOptions, SymmetricPool};

/// Bytes of one row in the dispatch-side relay: the payload row plus, in
/// quantized runs, the row scale fused beside it.
fn relay_row_bytes(cfg: &SimConfig) -> usize {
    if cfg.quant_enabled {
        payload_row_bytes(cfg) + 4
    } else {
        payload_row_bytes(cfg)
    }
}

/// Per-source packing base: rows this rank stages before destination `dst`.
fn rank_bases(per_rank_counts: &[u32]) -> Vec<u32> {
    let mut bases = Vec::with_capacity(per_rank_counts.len());
    let mut acc = 0;
    for &c in per_rank_counts {
        bases.push(acc);
        acc += c;
    }
    bases
}

/// Within a destination rank's pack block, rows this rank stages for
/// earlier experts of that same host (experts ascending, streams ascending).
fn expert_pack_bases(cfg: &SimConfig, per_expert_counts: &[u32]) -> Vec<u32> {
    let mut bases = vec![0u32; cfg.num_experts()];
    for h in 0..cfg.num_ranks {
        let mut acc = 0;
        for l in 0..cfg.experts_per_rank {
            let e = h * cfg.experts_per_rank + l;
            bases[e] = acc;
            acc += per_expert_counts[e];
        }
    }
    bases
}

/// Allocate the relay-side regions next to the shared expert windows. Sizes
/// come from the count matrix, identically derived on every rank.
fn alloc_relay_regions(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    global: &GlobalPlan,
    prefix: &str,
) -> Result<()> {
    let tk = cfg.tokens_per_rank * cfg.top_k;
    let max_recv = global.recv_per_rank.iter().copied().max().unwrap_or(0) as usize;
    let fused = relay_row_bytes(cfg);
    let out_row = output_row_bytes(cfg);
    pool.collective_alloc(
        rank,
        &sym(prefix, "send_stage"),
        tk * fused,
        fused,
        TrafficClass::LocalStaging,
    )?;
    pool.collective_alloc(
        rank,
        &sym(prefix, "recv_relay"),
        max_recv * fused,
        fused,
        TrafficClass::Relay,
    )?;
    // The producer packs one output row per branch it received, so the
    // combine stage is sized like the receive side, not the token side.
    pool.collective_alloc(
        rank,
        &sym(prefix, "comb_stage"),
        max_recv * out_row,
        out_row,
        TrafficClass::LocalStaging,
    )?;
    pool.collective_alloc(
        rank,
        &sym(prefix, "comb_relay"),
        tk * out_row,
        out_row,
        TrafficClass::Relay,
    )?;
    pool.collective_alloc(
        rank,
        &sym(prefix, "reorder"),
        tk * out_row,
        out_row,
        TrafficClass::Relay,
    )?;
    Ok(())
}

/// Staged dispatch: pack rows by destination, transfer each destination's
/// block into its relay region, then restore from the relay into the expert
/// windows at the same rows the direct path computes.
fn staged_dispatch_stage(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    rw: &RankWorkload,
    local: &LocalPlan,
    global: &GlobalPlan,
    prefix: &str,
) -> Result<(Matrix<u32>, Option<Vec<f32>>)> {
    pool.begin_phase(rank, Phase::Dispatch);
    let fused = relay_row_bytes(cfg);
    let in_row = payload_row_bytes(cfg);
    let bases = rank_bases(&local.per_rank_counts);
    let pack_bases = expert_pack_bases(cfg, &local.per_expert_counts);

    // Pack: one fused row per branch, grouped destination-major then expert
    // then stream order. Local staging writes, counted as such.
    let stage_w = pool.window(&sym(prefix, "send_stage"), rank)?;
    let mut placement = Matrix::zeros(cfg.tokens_per_rank, cfg.top_k);
    let mut scales = cfg.quant_enabled.then(Vec::new);
    let mut qbuf = vec![0i8; cfg.hidden_dim];
    let mut payload = vec![0u8; in_row];
    let mut fused_buf = vec![0u8; fused];
    for t in 0..cfg.tokens_per_rank {
        let scale = encode_token_row(cfg, rw, t, &mut qbuf, &mut payload);
        if let (Some(list), Some(s)) = (scales.as_mut(), scale) {
            list.push(s);
        }
        fused_buf[..in_row].copy_from_slice(&payload);
        if let Some(s) = scale {
            fused_buf[in_row..].copy_from_slice(&s.to_le_bytes());
        }
        for j in 0..cfg.top_k {
            let e = *rw.routing.experts.at(t, j) as usize;
            let dst = cfg.host_rank(e);
            let s_idx = *local.stream_idx.at(t, j);
            *placement.at_mut(t, j) = global.branch_row(local, rank, t, j, e);
            let pack_row = (bases[dst] + pack_bases[e] + s_idx) as usize;
            pool.remote_write(rank, &stage_w, pack_row, &fused_buf)?;
        }
    }

    // Transfer: push each destination's staged block into that rank's relay
    // region, after the blocks every earlier source contributes.
    let mut buf = vec![0u8; fused];
    for dst in 0..cfg.num_ranks {
        let relay_w = pool.window(&sym(prefix, "recv_relay"), dst)?;
        let dst_base: u32 = (0..cfg.experts_per_rank)
            .map(|l| *global.offsets.at(dst * cfg.experts_per_rank + l, rank))
            .sum();
        let block = local.per_rank_counts[dst];
        for rel in 0..block {
            pool.local_read(rank, &stage_w, (bases[dst] + rel) as usize, &mut buf)?;
            pool.remote_write(rank, &relay_w, (dst_base + rel) as usize, &buf)?;
            pool.relay_occupy(rank, dst, fused as u64);
        }
    }
    pool.barrier(rank)?;

    // Restore: walk the own relay region linearly — source-major, experts
    // ascending, streams ascending — and place each row into the expert
    // window exactly where direct placement would have put it.
    let relay_w = pool.window(&sym(prefix, "recv_relay"), rank)?;
    let in_w = pool.window(&sym(prefix, "expert_in"), rank)?;
    let scale_w = if cfg.quant_enabled {
        Some(pool.window(&sym(prefix, "expert_scale"), rank)?)
    } else {
        None
    };
    let mut relay_row = 0usize;
    for src in 0..cfg.num_ranks {
        for l in 0..cfg.experts_per_rank {
            let e = rank * cfg.experts_per_rank + l;
            let count = *global.counts.at(src, e);
            for s_idx in 0..count {
                pool.local_read(rank, &relay_w, relay_row, &mut buf)?;
                let abs = (global.expert_base[e] + global.offsets.at(e, src) + s_idx) as usize;
                pool.remote_write_as(rank, &in_w, abs, &buf[..in_row], TrafficClass::Relay)?;
                if let Some(sw) = &scale_w {
                    pool.remote_write_as(rank, sw, abs, &buf[in_row..], TrafficClass::Relay)?;
                }
                relay_row += 1;
            }
        }
    }
    pool.relay_drain(rank);
    // Everyone drains before combine-phase bytes can land in any relay, so
    // the per-phase in-flight peaks are schedule-independent.
    pool.barrier(rank)?;
    Ok((placement, scales))
}

/// Staged combine: hosts pack transformed rows per consumer, transfer them
/// into consumer relay regions, and each consumer restores its branches to
/// token order before the weighted reduction.
fn staged_combine_stage(
    pool: &SymmetricPool,
    rank: usize,
    cfg: &SimConfig,
    rw: &RankWorkload,
    local: &LocalPlan,
    global: &GlobalPlan,
    prefix: &str,
) -> Result<Matrix<f32>> {
    pool.begin_phase(rank, Phase::Combine);
    let out_row = output_row_bytes(cfg);
    // The producer side below reads this rank's own expert outputs, which it
    // wrote itself; the transfer barrier orders everything cross-rank.
    let out_w = pool.window(&sym(prefix, "expert_out"), rank)?;
    let comb_stage_w = pool.window(&sym(prefix, "comb_stage"), rank)?;
    let mut buf = vec![0u8; out_row];

    // Pack: consumer-major, experts ascending, streams ascending.
    let mut pack_row = 0usize;
    for consumer in 0..cfg.num_ranks {
        for l in 0..cfg.experts_per_rank {
            let e = rank * cfg.experts_per_rank + l;
            let count = *global.counts.at(consumer, e);
            for s_idx in 0..count {
                let src_row =
                    (global.expert_base[e] + global.offsets.at(e, consumer) + s_idx) as usize;
                pool.local_read(rank, &out_w, src_row, &mut buf)?;
                pool.remote_write(rank, &comb_stage_w, pack_row, &buf)?;
                pack_row += 1;
            }
        }
    }

    // Transfer: this host's block inside each consumer's relay sits after
    // the blocks of all lower-numbered hosts.
    let mut read_row = 0usize;
    for consumer in 0..cfg.num_ranks {
        let relay_w = pool.window(&sym(prefix, "comb_relay"), consumer)?;
        let host_base: u32 = (0..rank * cfg.experts_per_rank)
            .map(|e| *global.counts.at(consumer, e))
            .sum();
        let block: u32 = (0..cfg.experts_per_rank)
            .map(|l| *global.counts.at(consumer, rank * cfg.experts_per_rank + l))
            .sum();
        for rel in 0..block {
            pool.local_read(rank, &comb_stage_w, read_row, &mut buf)?;
            pool.remote_write(rank, &relay_w, (host_base + rel) as usize, &buf)?;
            pool.relay_occupy(rank, consumer, out_row as u64);
            read_row += 1;
        }
    }
    pool.barrier(rank)?;

    // Restore: map each own branch to its relay row (host-major blocks,
    // experts ascending, streams ascending) and write it to token order.
    let host_bases = rank_bases(&local.per_rank_counts);
    let pack_bases = expert_pack_bases(cfg, &local.per_expert_counts);
    let relay_w = pool.window(&sym(prefix, "comb_relay"), rank)?;
    let reorder_w = pool.window(&sym(prefix, "reorder"), rank)?;
    for t in 0..cfg.tokens_per_rank {
        for j in 0..cfg.top_k {
            let e = *rw.routing.experts.at(t, j) as usize;
            let h = cfg.host_rank(e);
            let relay_row =
                (host_bases[h] + pack_bases[e] + *local.stream_idx.at(t, j)) as usize;
            pool.local_read(rank, &relay_w, relay_row, &mut buf)?;
            pool.remote_write_as(
                rank,
                &reorder_w,
                t * cfg.top_k + j,
                &buf,
                TrafficClass::Relay,
            )?;
        }
    }
    pool.relay_drain(rank);

    // Reduce in ascending branch order from the reordered buffer.
    let mut y = Matrix::zeros(cfg.tokens_per_rank, cfg.hidden_dim);
    let mut row = vec![0f32; cfg.hidden_dim];
    for t in 0..cfg.tokens_per_rank {
        for j in 0..cfg.top_k {
            let w = *rw.routing.weights.at(t, j);
            pool.local_read(rank, &reorder_w, t * cfg.top_k + j, &mut buf)?;
            rows::bytes_to_f32s(&buf, &mut row);
            accumulate_weighted(y.row_mut(t), w, &row);
        }
    }
    Ok(y)
}

/// Run the full staged-relay exchange over one workload.
pub fn run_baseline(
    cfg: &SimConfig,
    wl: &Workload,
    experts: &dyn ExpertFunction,
    opts: &PathOptions,
) -> Result<ExchangeRun> {
    cfg.validate()?;
    wl.validate(cfg)?;
    let prefix = "bl.";
    let specs = state_symbol_specs(cfg, prefix);
    let worst_rows = cfg.num_ranks * cfg.tokens_per_rank * cfg.top_k;
    let tk = cfg.tokens_per_rank * cfg.top_k;
    let mut sizes: Vec<usize> = specs.iter().map(|s| s.bytes).collect();
    sizes.push(worst_rows * payload_row_bytes(cfg));
    sizes.push(worst_rows * output_row_bytes(cfg));
    if cfg.quant_enabled {
        sizes.push(worst_rows * 4);
    }
    sizes.push(tk * relay_row_bytes(cfg));
    sizes.push(worst_rows * relay_row_bytes(cfg));
    sizes.push(3 * tk * output_row_bytes(cfg));
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
        alloc_relay_regions(&pool, rank, cfg, &global, prefix)?;
        let (placement, scales) =
            staged_dispatch_stage(&pool, rank, cfg, rw, &local, &global, prefix)?;
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
        let y = staged_combine_stage(&pool, rank, cfg, rw, &local, &global, prefix)?;
        let dump = if opts.capture_windows {
            Some(capture_windows(&pool, rank, cfg, &global, prefix)?)
        } else {
            None
        };
        Ok((y, placement, local, global, scales, dump))
    })?;
    assemble_run(&pool, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_instance;
    use crate::model::{dense_oracle, AffineExperts};
    use crate::prefill::run_prefill;
    use crate::symmem::ExecMode;

    fn rr_opts() -> PathOptions {
        PathOptions {
            exec: ExecMode::RoundRobin,
            checked: true,
            capture_windows: false,
        }
    }

    fn capture_opts() -> PathOptions {
        PathOptions {
            capture_windows: true,
            ..rr_opts()
        }
    }

    #[test]
    fn worked_instance_matches_dense_reference_bitwise() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let run = run_baseline(&cfg, &wl, &experts, &rr_opts()).unwrap();
        let oracle = dense_oracle(&cfg, &wl, &experts).unwrap();
        assert_eq!(run.y, oracle);
    }

    #[test]
    fn expert_windows_match_direct_path_bitwise() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let staged = run_baseline(&cfg, &wl, &experts, &capture_opts()).unwrap();
        let direct = run_prefill(&cfg, &wl, &experts, &capture_opts()).unwrap();
        assert_eq!(staged.window_dumps, direct.window_dumps);
        assert_eq!(staged.placement_rows, direct.placement_rows);
        assert_eq!(staged.y, direct.y);
    }

    #[test]
    fn worked_instance_relay_accounting() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let run = run_baseline(&cfg, &wl, &experts, &rr_opts()).unwrap();
        let r = &run.report;

        // Dispatch: 8 branches x 16-byte rows, written twice through the
        // relay (transfer + restore) = 256; pack writes are local staging.
        assert_eq!(r.write_bytes(Phase::Dispatch, TrafficClass::Relay), 256);
        assert_eq!(
            r.write_bytes(Phase::Dispatch, TrafficClass::LocalStaging),
            128
        );
        // Rank 1 receives 5 branches: the in-flight dispatch peak.
        assert_eq!(r.relay_peak_in(Phase::Dispatch), 80);
        // Combine mirrors the two relay touches.
        assert_eq!(r.write_bytes(Phase::Combine, TrafficClass::Relay), 256);
        // Direct payload writes into expert windows never happen here.
        assert_eq!(r.write_bytes(Phase::Dispatch, TrafficClass::Payload), 0);
        r.check_conservation().unwrap();
    }

    #[test]
    fn payload_touch_ratio_is_at_least_double() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let staged = run_baseline(&cfg, &wl, &experts, &rr_opts()).unwrap();
        let direct = run_prefill(&cfg, &wl, &experts, &rr_opts()).unwrap();
        let ratio = staged.report.payload_touch_bytes() as f64
            / direct.report.payload_touch_bytes() as f64;
        assert_eq!(ratio, 2.0);
    }

    #[test]
    fn quantized_staged_run_matches_quantized_direct_run() {
        let (mut cfg, wl) = worked_instance();
        cfg.quant_enabled = true;
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let staged = run_baseline(&cfg, &wl, &experts, &capture_opts()).unwrap();
        let direct = run_prefill(&cfg, &wl, &experts, &capture_opts()).unwrap();
        assert_eq!(staged.y, direct.y);
        assert_eq!(staged.window_dumps, direct.window_dumps);
        assert_eq!(staged.token_scales, direct.token_scales);
        // Fused relay rows carry payload + scale: 8 branches x 8 bytes x 2.
        assert_eq!(
            staged.report.write_bytes(Phase::Dispatch, TrafficClass::Relay),
            128
        );
        let ratio = staged.report.payload_touch_bytes() as f64
            / direct.report.payload_touch_bytes() as f64;
        assert_eq!(ratio, 2.0);
    }

    #[test]
    fn zero_token_instance_moves_no_relay_bytes() {
        let cfg = SimConfig::new(2, 2, 0, 4, 1, 3);
        let wl = crate::model::generate_workload(&cfg).unwrap();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let run = run_baseline(&cfg, &wl, &experts, &rr_opts()).unwrap();
        assert_eq!(run.report.class_write_bytes(TrafficClass::Relay), 0);
        assert_eq!(run.report.relay_peak_max(), 0);
    }

    #[test]
    fn threaded_and_round_robin_agree() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let rr = run_baseline(&cfg, &wl, &experts, &rr_opts()).unwrap();
        let th = run_baseline(&cfg, &wl, &experts, &PathOptions::default()).unwrap();
        assert_eq!(rr.y, th.y);
        assert_eq!(rr.report.total_write_bytes(), th.report.total_write_bytes());
        assert_eq!(rr.report.relay_peak_in(Phase::Dispatch), th.report.relay_peak_in(Phase::Dispatch));
        assert_eq!(rr.report.sync_events_total(), th.report.sync_events_total());
    }
}
