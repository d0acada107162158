//! Built-in verification battery: re-derives the hand-worked ledger, runs
//! randomized differential checks against the dense reference, exercises the
//! staged-copy and compact paths, verifies relay accounting and quantization
//! error bounds, and proves the race checker still catches known-bad
//! schedules. The command-line `selftest` subcommand prints one line per
//! check and fails if any check fails.

use crate::baseline::run_baseline;
use crate::decode::{run_decode, CombineMode, DecodeOptions};
use crate::error::SimError;
use crate::fixtures::{colliding_write_error, grid_configs, misordered_read_error, worked_instance};
use crate::metrics::{byte_ratio, Phase, TrafficClass};
use crate::model::{dense_oracle, generate_workload, rounding_error_bound, AffineExperts};
use crate::prefill::{run_prefill, PathOptions};
use crate::symmem::ExecMode;

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// What was verified, or why the check failed.
    pub detail: String,
}

/// Every check's outcome, in execution order.
#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

type Check = (&'static str, fn() -> Result<String, String>);

const CHECKS: &[Check] = &[
    ("planning-worked-instance", planning_worked_instance),
    ("outputs-all-paths", outputs_all_paths),
    ("relay-accounting", relay_accounting),
    ("differential-randomized", differential_randomized),
    ("compact-offset-consistency", compact_offset_consistency),
    ("quantized-error-bound", quantized_error_bound),
    ("schedule-equivalence", schedule_equivalence),
    ("race-missing-sync-caught", race_missing_sync_caught),
    ("race-colliding-write-caught", race_colliding_write_caught),
];

/// Run the full battery. Checks are independent; one failure does not stop
/// the rest.
pub fn run_selftest() -> SelftestReport {
    let checks = CHECKS
        .iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckOutcome {
                name,
                passed: false,
                detail,
            },
        })
        .collect();
    SelftestReport { checks }
}

fn ensure(cond: bool, what: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(format!("expected {what}"))
    }
}

fn rr() -> PathOptions {
    PathOptions {
        exec: ExecMode::RoundRobin,
        checked: true,
        capture_windows: false,
    }
}

fn dec_rr(mode: CombineMode) -> DecodeOptions {
    DecodeOptions {
        combine_mode: mode,
        capacity_per_expert: None,
        exec: ExecMode::RoundRobin,
        checked: true,
    }
}

fn planning_worked_instance() -> Result<String, String> {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let run = run_prefill(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
    ensure(
        run.global.recv_per_rank == vec![3, 5],
        "receive totals [3, 5]",
    )?;
    ensure(
        run.global.recv_per_expert == vec![2, 1, 4, 1],
        "per-expert receive totals [2, 1, 4, 1]",
    )?;
    ensure(
        *run.global.offsets.at(2, 1) == 2,
        "rank 1's branches for expert 2 to start at row 2",
    )?;
    ensure(
        *run.placement_rows[0].at(1, 1) == 1 && *run.placement_rows[1].at(1, 1) == 3,
        "slot (1,1) placements at expert-local rows 1 and 3",
    )?;
    let r = &run.report;
    ensure(
        r.write_bytes(Phase::Dispatch, TrafficClass::Payload) == 128
            && r.read_bytes(Phase::Combine, TrafficClass::Payload) == 128,
        "128 payload bytes dispatched and combined",
    )?;
    ensure(
        r.write_bytes(Phase::Notify, TrafficClass::Control) == 64,
        "64 notify control bytes (R*R*E words)",
    )?;
    r.check_conservation().map_err(|e| e.to_string())?;
    Ok("hand-derived counts, offsets, placements, and byte totals all reproduced".into())
}

fn outputs_all_paths() -> Result<String, String> {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let oracle = dense_oracle(&cfg, &wl, &experts).map_err(|e| e.to_string())?;
    let direct = run_prefill(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
    let staged = run_baseline(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
    let compact = run_decode(&cfg, &[wl.clone()], &experts, &dec_rr(CombineMode::Handshake))
        .map_err(|e| e.to_string())?;
    ensure(direct.y == oracle, "direct path to match the dense reference")?;
    ensure(staged.y == oracle, "staged path to match the dense reference")?;
    ensure(
        compact.steps[0].y == oracle,
        "compact path to match the dense reference",
    )?;
    Ok("direct, staged, and compact paths reproduce the dense reference bitwise".into())
}

fn relay_accounting() -> Result<String, String> {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let direct = run_prefill(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
    let staged = run_baseline(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
    let dr = &direct.report;
    let sr = &staged.report;
    ensure(
        dr.class_write_bytes(TrafficClass::Relay) == 0
            && dr.class_read_bytes(TrafficClass::Relay) == 0
            && dr.relay_peak_max() == 0,
        "zero relay bytes on the direct path",
    )?;
    ensure(
        sr.write_bytes(Phase::Dispatch, TrafficClass::Relay) == 256,
        "256 dispatch relay bytes on the staged path",
    )?;
    ensure(
        sr.write_bytes(Phase::Combine, TrafficClass::Relay) == 256,
        "256 combine relay bytes on the staged path",
    )?;
    ensure(
        sr.relay_peak_in(Phase::Dispatch) == 80,
        "an 80-byte peak relay footprint (5 rows x 16 bytes)",
    )?;
    let ratio = byte_ratio(sr.payload_touch_bytes(), dr.payload_touch_bytes());
    ensure(
        ratio == 2.0,
        "the staged path to touch payload bytes exactly twice as often",
    )?;
    sr.check_conservation().map_err(|e| e.to_string())?;
    Ok(format!(
        "staged relay ledger 256/256 with peak 80; direct relay 0; touch ratio {ratio}"
    ))
}

fn differential_randomized() -> Result<String, String> {
    let configs = grid_configs(24, 2024);
    let mut branches = 0usize;
    for cfg in &configs {
        let wl = generate_workload(cfg).map_err(|e| e.to_string())?;
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let oracle = dense_oracle(cfg, &wl, &experts).map_err(|e| e.to_string())?;
        let direct = run_prefill(cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
        let staged = run_baseline(cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
        let compact = run_decode(cfg, &[wl.clone()], &experts, &dec_rr(CombineMode::Handshake))
            .map_err(|e| e.to_string())?;
        if direct.y != oracle || staged.y != oracle || compact.steps[0].y != oracle {
            return Err(format!(
                "output mismatch on R={} E/r={} T={} k={} H={} seed={}",
                cfg.num_ranks,
                cfg.experts_per_rank,
                cfg.tokens_per_rank,
                cfg.top_k,
                cfg.hidden_dim,
                cfg.seed
            ));
        }
        // Placement bijection: every expert's received rows are hit exactly
        // once across all sources.
        for e in 0..cfg.num_experts() {
            let n = direct.global.recv_per_expert[e] as usize;
            let mut seen = vec![false; n];
            for (rank, rw) in wl.ranks.iter().enumerate() {
                for t in 0..cfg.tokens_per_rank {
                    for j in 0..cfg.top_k {
                        if *rw.routing.experts.at(t, j) as usize != e {
                            continue;
                        }
                        let row = *direct.placement_rows[rank].at(t, j) as usize;
                        if row >= n || seen[row] {
                            return Err(format!(
                                "expert {e} row {row} missing or repeated (seed {})",
                                cfg.seed
                            ));
                        }
                        seen[row] = true;
                        branches += 1;
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(format!("expert {e} left a row unwritten (seed {})", cfg.seed));
            }
        }
    }
    Ok(format!(
        "{} randomized instances agree with the dense reference; {} placements form per-expert bijections",
        configs.len(),
        branches
    ))
}

fn compact_offset_consistency() -> Result<String, String> {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let pre = run_prefill(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
    let hs = run_decode(&cfg, &[wl.clone()], &experts, &dec_rr(CombineMode::Handshake))
        .map_err(|e| e.to_string())?;
    let ca = run_decode(&cfg, &[wl.clone()], &experts, &dec_rr(CombineMode::Cached))
        .map_err(|e| e.to_string())?;
    for rank in 0..cfg.num_ranks {
        ensure(
            hs.steps[0].deltas[rank] == pre.locals[rank].stream_idx,
            "the compact path's token-local offsets to equal the planner's",
        )?;
        let col: Vec<u32> = (0..cfg.num_experts())
            .map(|e| *pre.global.offsets.at(e, rank))
            .collect();
        ensure(
            hs.steps[0].offset_cols[rank] == col,
            "the compact path's prefix offsets to equal the planner's",
        )?;
    }
    ensure(
        hs.steps[0].y == ca.steps[0].y,
        "cached-address combine to match the handshake combine",
    )?;
    ensure(
        ca.report.handshake_events(Phase::Combine) == 0,
        "zero combine handshakes once addresses are cached",
    )?;
    ensure(
        hs.report.handshake_events(Phase::Combine) > 0,
        "per-call handshakes in handshake mode",
    )?;
    Ok("compact-path offsets match the planner; cached combine is handshake-free".into())
}

fn quantized_error_bound() -> Result<String, String> {
    let mut checked = 0usize;
    for cfg in grid_configs(10, 77) {
        if cfg.tokens_per_rank == 0 {
            continue;
        }
        let mut qcfg = cfg.clone();
        qcfg.quant_enabled = true;
        let wl = generate_workload(&cfg).map_err(|e| e.to_string())?;
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let exact = run_prefill(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
        let quant = run_prefill(&qcfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?;
        let scales = quant
            .token_scales
            .as_ref()
            .ok_or("quantized run reported no scales")?;
        for rank in 0..cfg.num_ranks {
            for t in 0..cfg.tokens_per_rank {
                let bound = rounding_error_bound(
                    &wl.ranks[rank].routing,
                    &experts,
                    t,
                    scales[rank][t],
                );
                for i in 0..cfg.hidden_dim {
                    let d = (*quant.y[rank].at(t, i) as f64 - *exact.y[rank].at(t, i) as f64)
                        .abs();
                    if d > bound + 1e-6 {
                        return Err(format!(
                            "rank {rank} token {t} dim {i}: |err|={d} exceeds bound {bound} \
                             (seed {})",
                            cfg.seed
                        ));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "{checked} quantized output elements stayed within the rounding bound"
    ))
}

fn schedule_equivalence() -> Result<String, String> {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let th_opts = PathOptions {
        exec: ExecMode::threaded_default(),
        ..rr()
    };
    for (name, a, b) in [
        (
            "direct",
            run_prefill(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?,
            run_prefill(&cfg, &wl, &experts, &th_opts).map_err(|e| e.to_string())?,
        ),
        (
            "staged",
            run_baseline(&cfg, &wl, &experts, &rr()).map_err(|e| e.to_string())?,
            run_baseline(&cfg, &wl, &experts, &th_opts).map_err(|e| e.to_string())?,
        ),
    ] {
        if a.y != b.y
            || a.report.total_write_bytes() != b.report.total_write_bytes()
            || a.report.total_read_bytes() != b.report.total_read_bytes()
            || a.report.sync_events_total() != b.report.sync_events_total()
            || a.report.relay_peak_max() != b.report.relay_peak_max()
        {
            return Err(format!(
                "{name} path differs between round-robin and threaded execution"
            ));
        }
    }
    let dec_th = DecodeOptions {
        exec: ExecMode::threaded_default(),
        ..dec_rr(CombineMode::Handshake)
    };
    let a = run_decode(&cfg, &[wl.clone()], &experts, &dec_rr(CombineMode::Handshake))
        .map_err(|e| e.to_string())?;
    let b = run_decode(&cfg, &[wl], &experts, &dec_th).map_err(|e| e.to_string())?;
    if a.steps[0].y != b.steps[0].y
        || a.report.total_write_bytes() != b.report.total_write_bytes()
        || a.report.total_read_bytes() != b.report.total_read_bytes()
        || a.report.sync_events_total() != b.report.sync_events_total()
    {
        return Err("compact path differs between round-robin and threaded execution".into());
    }
    Ok("outputs and metric totals are identical under both execution modes".into())
}

fn race_missing_sync_caught() -> Result<String, String> {
    match misordered_read_error() {
        Err(SimError::ReadBeforeReady { symbol, row, .. }) => Ok(format!(
            "unsynchronized read of `{symbol}` row {row} rejected as expected"
        )),
        Err(other) => Err(format!("wrong error for the missing-sync schedule: {other}")),
        Ok(_) => Err("the missing-sync schedule was not rejected".into()),
    }
}

fn race_colliding_write_caught() -> Result<String, String> {
    match colliding_write_error() {
        Err(SimError::DoubleWrite {
            symbol,
            row,
            first,
            second,
            ..
        }) => Ok(format!(
            "colliding writes to `{symbol}` row {row} by ranks {first} and {second} rejected \
             as expected"
        )),
        Err(other) => Err(format!(
            "wrong error for the colliding-write schedule: {other}"
        )),
        Ok(_) => Err("the colliding-write schedule was not rejected".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_and_covers_every_check() {
        let report = run_selftest();
        for c in &report.checks {
            assert!(c.passed, "{} failed: {}", c.name, c.detail);
            assert!(!c.detail.is_empty());
        }
        assert_eq!(report.checks.len(), CHECKS.len());
        assert!(report.all_passed());
        assert_eq!(report.failures(), 0);
    }

    #[test]
    fn check_names_are_unique() {
        let mut names: Vec<_> = CHECKS.iter().map(|(n, _)| *n).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }
}
