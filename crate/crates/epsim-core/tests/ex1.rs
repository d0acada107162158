//! The hand-worked two-rank instance, end to end: every planning table,
//! placement row, byte total, and output value below was derived by hand
//! from the routing tables and frozen here. Any drift in planning,
//! placement, accounting, or arithmetic breaks this ledger.

use epsim_core::fixtures::worked_instance;
use epsim_core::{
    dense_oracle, run_baseline, run_decode, run_prefill, AffineExperts, CombineMode,
    DecodeOptions, ExecMode, Matrix, PathOptions, Phase, TrafficClass,
};

fn rr() -> PathOptions {
    PathOptions {
        exec: ExecMode::RoundRobin,
        checked: true,
        capture_windows: false,
    }
}

#[test]
fn planning_tables_match_the_hand_derivation() {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let run = run_prefill(&cfg, &wl, &experts, &rr()).unwrap();

    // Count matrix M, row r = rank r's branches per expert.
    let m = Matrix::from_vec(2, 4, vec![1u32, 1, 2, 0, 1, 0, 2, 1]).unwrap();
    assert_eq!(run.global.counts, m);

    // Prefix offsets, offsets[e][r] = rows expert e received from ranks
    // before r.
    let o = Matrix::from_vec(4, 2, vec![0u32, 1, 0, 1, 0, 2, 0, 0]).unwrap();
    assert_eq!(run.global.offsets, o);

    // Stream indices: both ranks route their second expert-2 branch after
    // their first.
    let s = Matrix::from_vec(2, 2, vec![0u32, 0, 0, 1]).unwrap();
    assert_eq!(run.locals[0].stream_idx, s);
    assert_eq!(run.locals[1].stream_idx, s);

    // Receive totals and window bases.
    assert_eq!(run.global.recv_per_expert, vec![2, 1, 4, 1]);
    assert_eq!(run.global.recv_per_rank, vec![3, 5]);
    assert_eq!(run.global.expert_base, vec![0, 2, 0, 4]);

    // Expert-local placement rows for every branch.
    let p0 = Matrix::from_vec(2, 2, vec![0u32, 0, 0, 1]).unwrap();
    let p1 = Matrix::from_vec(2, 2, vec![2u32, 0, 1, 3]).unwrap();
    assert_eq!(run.placement_rows[0], p0);
    assert_eq!(run.placement_rows[1], p1);
}

#[test]
fn outputs_match_the_hand_computed_values() {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let run = run_prefill(&cfg, &wl, &experts, &rr()).unwrap();

    // Rank 0, token 0: 0.5*x + 0.25*(2x+2) for x = [1,2,3,4].
    assert_eq!(run.y[0].row(0), &[1.5, 2.5, 3.5, 4.5]);
    // Rank 0, token 1: 1.0*(1.5x+1) - 0.5*(2x+2) for x = [-1,0.5,2,-2].
    assert_eq!(run.y[0].row(1), &[-0.5, 0.25, 1.0, -1.0]);
    // Rank 1, token 0: 0.75*(2x+2) + 0.25*(2.5x+3) for x = [2,-1,0,1].
    assert_eq!(run.y[1].row(0), &[6.5, 0.125, 2.25, 4.375]);
    // Rank 1, token 1: -0.25*x + 0.5*(2x+2) for x = [0.5,0.5,-0.5,-1].
    assert_eq!(run.y[1].row(1), &[1.375, 1.375, 0.625, 0.25]);

    // And the dense reference agrees bitwise.
    assert_eq!(run.y, dense_oracle(&cfg, &wl, &experts).unwrap());
}

#[test]
fn byte_ledger_direct_path() {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let run = run_prefill(&cfg, &wl, &experts, &rr()).unwrap();
    let r = &run.report;

    // 8 branches x 4 scalars x 4 bytes, each direction.
    assert_eq!(r.write_bytes(Phase::Dispatch, TrafficClass::Payload), 128);
    assert_eq!(r.read_bytes(Phase::Combine, TrafficClass::Payload), 128);
    // Count exchange: each rank writes its 16-byte count row to both hosts.
    assert_eq!(r.write_bytes(Phase::Notify, TrafficClass::Control), 64);
    // No relay traffic anywhere on the direct path.
    assert_eq!(r.class_write_bytes(TrafficClass::Relay), 0);
    assert_eq!(r.class_read_bytes(TrafficClass::Relay), 0);
    assert_eq!(r.class_write_bytes(TrafficClass::LocalStaging), 0);
    assert_eq!(r.relay_peak_max(), 0);
    r.check_conservation().unwrap();
}

#[test]
fn byte_ledger_staged_path() {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let run = run_baseline(&cfg, &wl, &experts, &rr()).unwrap();
    let r = &run.report;

    // Every payload row crosses a relay twice per direction: 8 rows x 16
    // bytes in, the same back out = 256 per phase.
    assert_eq!(r.write_bytes(Phase::Dispatch, TrafficClass::Relay), 256);
    assert_eq!(r.write_bytes(Phase::Combine, TrafficClass::Relay), 256);
    // Pack copies: 8 rows staged locally before transfer.
    assert_eq!(
        r.write_bytes(Phase::Dispatch, TrafficClass::LocalStaging),
        128
    );
    // Peak in-flight relay footprint: rank 1 receives 5 rows x 16 bytes.
    assert_eq!(r.relay_peak_in(Phase::Dispatch), 80);
    r.check_conservation().unwrap();
}

#[test]
fn compact_path_offsets_and_outputs() {
    let (cfg, wl) = worked_instance();
    let experts = AffineExperts::default_bank(cfg.num_experts());
    let opts = DecodeOptions {
        combine_mode: CombineMode::Handshake,
        capacity_per_expert: None,
        exec: ExecMode::RoundRobin,
        checked: true,
    };
    let run = run_decode(&cfg, &[wl.clone()], &experts, &opts).unwrap();
    let step = &run.steps[0];

    // Token-local offsets equal the planner's stream indices.
    let s = Matrix::from_vec(2, 2, vec![0u32, 0, 0, 1]).unwrap();
    assert_eq!(step.deltas[0], s);
    assert_eq!(step.deltas[1], s);
    // Per-rank prefix columns of the offset table.
    assert_eq!(step.offset_cols[0], vec![0, 0, 0, 0]);
    assert_eq!(step.offset_cols[1], vec![1, 1, 2, 0]);
    // Hosts see the same receive totals as the two-stage planner.
    assert_eq!(step.recv_per_local_expert[0], vec![2, 1]);
    assert_eq!(step.recv_per_local_expert[1], vec![4, 1]);

    assert_eq!(step.y, dense_oracle(&cfg, &wl, &experts).unwrap());
}
