//! Compact low-latency exchange: count, offset, and address exchange folded
//! into dispatch and combine, over windows pre-sized at a fixed per-expert
//! capacity so no sizing round-trip sits on the critical path.
//!
//! A session owns one pool and can run many steps against the same windows.
//! Dispatch derives token-local offsets, publishes one compact count row per
//! hosting rank, and after a single barrier each source reconstructs its
//! prefix offsets by reading the count rows of lower-numbered sources
//! straight from the hosts — then writes every routed row to
//! `local_expert * capacity + offset + delta`. Combine either performs an
//! address handshake per call (publish + flag + remote address read) or
//! reuses pre-exchanged window handles from a warmed cache, which drops the
//! per-call handshake entirely; outputs are identical either way.

use std::sync::Arc;
use std::sync::Mutex;

use crate::config::SimConfig;
use crate::error::{Result, SimError};
use crate::matrix::Matrix;
use crate::metrics::{MetricsReport, Phase, TrafficClass};
use crate::model::{accumulate_weighted, ExpertFunction, Workload};
use crate::plan::local_plan;
use crate::prefill::{budget_for, encode_token_row, output_row_bytes, payload_row_bytes};
use crate::sched::run_ranks;
use crate::symmem::{rows, ExecMode, PoolOptions, SymbolSpec, SymmetricPool, WindowHandle};

const EXPAND_IDX: &str = "dec.expand_idx";
const RECV_COUNT: &str = "dec.recv_count";
const ADDR_SLOT: &str = "dec.addr_slot";
const EXPERT_IN: &str = "dec.expert_in";
const EXPERT_OUT: &str = "dec.expert_out";
const EXPERT_SCALE: &str = "dec.expert_scale";
const DONE_FLAG: &str = "dec.expert_done";
const ADDR_FLAG: &str = "dec.addr_ready";
const WARM_FLAG: &str = "dec.addr_warm";

/// How combine learns the remote output-window addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Exchange addresses on every combine call.
    Handshake,
    /// Reuse handles from a previously warmed cache; error when cold.
    Cached,
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub combine_mode: CombineMode,
    /// Rows reserved per hosted expert. `None` takes the worst case R*T*k.
    pub capacity_per_expert: Option<usize>,
    pub exec: ExecMode,
    pub checked: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            combine_mode: CombineMode::Handshake,
            capacity_per_expert: None,
            exec: ExecMode::threaded_default(),
            checked: true,
        }
    }
}

/// Pre-exchanged remote output-window handles, one set per rank.
struct AddressCache {
    slots: Vec<Mutex<Option<Vec<WindowHandle>>>>,
}

impl AddressCache {
    fn new(num_ranks: usize) -> Self {
        AddressCache {
            slots: (0..num_ranks).map(|_| Mutex::new(None)).collect(),
        }
    }

    fn is_warm(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.lock().unwrap().is_some())
    }
}

/// One decode step's outputs and the offset state behind them.
#[derive(Debug)]
pub struct DecodeStep {
    /// Per rank: T x H combined outputs.
    pub y: Vec<Matrix<f32>>,
    /// Per rank: T x k token-local offsets within each (source, expert)
    /// stream.
    pub deltas: Vec<Matrix<u32>>,
    /// Per rank: its column of the prefix-offset table — entry e is the
    /// first row this rank's branches take inside expert e's block.
    pub offset_cols: Vec<Vec<u32>>,
    /// Per hosting rank: rows received per local expert.
    pub recv_per_local_expert: Vec<Vec<u32>>,
}

/// Everything a finished multi-step decode run reports.
#[derive(Debug)]
pub struct DecodeRun {
    pub steps: Vec<DecodeStep>,
    /// Metrics accumulated over warm-up and every step.
    pub report: MetricsReport,
    pub state_symbols: Vec<(String, TrafficClass)>,
    pub capacity_per_expert: usize,
}

/// A bootstrapped pool plus the fixed-capacity windows, reusable across
/// decode steps.
pub struct DecodeSession {
    pool: Arc<SymmetricPool>,
    cfg: SimConfig,
    opts: DecodeOptions,
    capacity: usize,
    cache: AddressCache,
}

fn state_specs(cfg: &SimConfig, capacity: usize) -> Vec<SymbolSpec> {
    let tk = cfg.tokens_per_rank * cfg.top_k;
    let er = cfg.experts_per_rank;
    let c = TrafficClass::Control;
    let in_row = payload_row_bytes(cfg);
    let out_row = output_row_bytes(cfg);
    let window_rows = er * capacity;
    let mut specs = vec![
        SymbolSpec::new(EXPAND_IDX, tk * 4, (tk * 4).max(4), c),
        SymbolSpec::new(RECV_COUNT, cfg.num_ranks * er * 4, er * 4, c),
        SymbolSpec::new(ADDR_SLOT, 32, 32, c),
        SymbolSpec::new(EXPERT_IN, window_rows * in_row, in_row, TrafficClass::Payload),
        SymbolSpec::new(
            EXPERT_OUT,
            window_rows * out_row,
            out_row,
            TrafficClass::Payload,
        ),
    ];
    if cfg.quant_enabled {
        specs.push(SymbolSpec::new(
            EXPERT_SCALE,
            window_rows * 4,
            4,
            TrafficClass::Payload,
        ));
    }
    specs
}

impl DecodeSession {
    pub fn new(cfg: SimConfig, opts: DecodeOptions) -> Result<DecodeSession> {
        cfg.validate()?;
        let capacity = opts
            .capacity_per_expert
            .unwrap_or((cfg.num_ranks * cfg.tokens_per_rank * cfg.top_k).max(1));
        let specs = state_specs(&cfg, capacity);
        let sizes: Vec<usize> = specs.iter().map(|s| s.bytes).collect();
        let pool = SymmetricPool::bootstrap(
            PoolOptions {
                num_ranks: cfg.num_ranks,
                slice_budget: budget_for(&sizes),
                exec: opts.exec,
                checked: opts.checked,
            },
            &specs,
        )?;
        let cache = AddressCache::new(cfg.num_ranks);
        Ok(DecodeSession {
            pool,
            cfg,
            opts,
            capacity,
            cache,
        })
    }

    pub fn capacity_per_expert(&self) -> usize {
        self.capacity
    }

    pub fn report(&self) -> MetricsReport {
        self.pool.snapshot_metrics()
    }

    pub fn state_symbols(&self) -> Vec<(String, TrafficClass)> {
        self.pool.registered_symbols()
    }

    pub fn cache_is_warm(&self) -> bool {
        self.cache.is_warm()
    }

    /// Publish every rank's output-window address once and cache the
    /// resolved handles, so cached-mode combines skip per-call handshakes.
    /// Idempotent: a warm cache is left untouched.
    pub fn warm_address_cache(&self) -> Result<()> {
        if self.cache.is_warm() {
            return Ok(());
        }
        let pool = &self.pool;
        let handles = run_ranks(pool, |rank| {
            pool.begin_phase(rank, Phase::Notify);
            publish_out_address(pool, rank, 0)?;
            pool.set_flag(rank, rank, WARM_FLAG, 1)?;
            let mut set = Vec::with_capacity(pool.world());
            for h in 0..pool.world() {
                pool.wait_flag(rank, h, WARM_FLAG, 1)?;
                set.push(read_out_address(pool, rank, h)?);
            }
            Ok(set)
        })?;
        for (slot, set) in self.cache.slots.iter().zip(handles) {
            *slot.lock().unwrap() = Some(set);
        }
        Ok(())
    }

    /// Run one decode step over this session's windows.
    pub fn step(&self, wl: &Workload, experts: &dyn ExpertFunction) -> Result<DecodeStep> {
        let cfg = &self.cfg;
        wl.validate(cfg)?;
        let pool = &self.pool;
        let capacity = self.capacity;
        let step = pool.begin_step();
        let results = run_ranks(pool, |rank| {
            self.rank_step(rank, wl, experts, step, capacity)
        })?;
        let mut out = DecodeStep {
            y: Vec::new(),
            deltas: Vec::new(),
            offset_cols: Vec::new(),
            recv_per_local_expert: Vec::new(),
        };
        for (y, d, o, n) in results {
            out.y.push(y);
            out.deltas.push(d);
            out.offset_cols.push(o);
            out.recv_per_local_expert.push(n);
        }
        Ok(out)
    }

    fn rank_step(
        &self,
        rank: usize,
        wl: &Workload,
        experts: &dyn ExpertFunction,
        step: u64,
        capacity: usize,
    ) -> Result<(Matrix<f32>, Matrix<u32>, Vec<u32>, Vec<u32>)> {
        let cfg = &self.cfg;
        let pool = &self.pool;
        let rw = &wl.ranks[rank];
        let er = cfg.experts_per_rank;
        let num_experts = cfg.num_experts();

        // Dispatch: token-local offsets, one compact count row per host,
        // then direct placement against reconstructed prefix offsets.
        pool.begin_phase(rank, Phase::Dispatch);
        let local = local_plan(cfg, &rw.routing)?;

        let w = pool.window(EXPAND_IDX, rank)?;
        if w.bytes > 0 {
            let mut buf = vec![0u8; w.row_bytes];
            rows::u32s_to_bytes(local.stream_idx.as_slice(), &mut buf);
            pool.local_write(rank, &w, 0, &buf)?;
        }

        let mut buf = vec![0u8; er * 4];
        for host in 0..cfg.num_ranks {
            let counts = &local.per_expert_counts[host * er..(host + 1) * er];
            rows::u32s_to_bytes(counts, &mut buf);
            let w = pool.window(RECV_COUNT, host)?;
            pool.remote_write(rank, &w, rank, &buf)?;
        }
        pool.barrier(rank)?;

        // Own prefix-offset column: counts of every lower-numbered source,
        // read row-wise from each hosting rank's count table.
        let mut offset_col = vec![0u32; num_experts];
        let mut vals = vec![0u32; er];
        for host in 0..cfg.num_ranks {
            let w = pool.window(RECV_COUNT, host)?;
            for src in 0..rank {
                pool.remote_read(rank, &w, src, &mut buf)?;
                rows::bytes_to_u32s(&buf, &mut vals);
                for l in 0..er {
                    offset_col[host * er + l] += vals[l];
                }
            }
        }

        // Host-side totals: the authoritative capacity check.
        let own_counts = pool.window(RECV_COUNT, rank)?;
        let mut recv_local = vec![0u32; er];
        for src in 0..cfg.num_ranks {
            pool.local_read(rank, &own_counts, src, &mut buf)?;
            rows::bytes_to_u32s(&buf, &mut vals);
            for l in 0..er {
                recv_local[l] += vals[l];
            }
        }
        for (l, &n) in recv_local.iter().enumerate() {
            if n as usize > capacity {
                return Err(SimError::CapacityOverflow {
                    expert: rank * er + l,
                    needed: n as usize,
                    capacity,
                });
            }
        }

        // Placement: local_expert * capacity + prefix offset + delta.
        let mut qbuf = vec![0i8; cfg.hidden_dim];
        let mut payload = vec![0u8; payload_row_bytes(cfg)];
        for t in 0..cfg.tokens_per_rank {
            let scale = encode_token_row(cfg, rw, t, &mut qbuf, &mut payload);
            for j in 0..cfg.top_k {
                let e = *rw.routing.experts.at(t, j) as usize;
                let host = cfg.host_rank(e);
                let in_expert = (offset_col[e] + *local.stream_idx.at(t, j)) as usize;
                if in_expert >= capacity {
                    return Err(SimError::CapacityOverflow {
                        expert: e,
                        needed: in_expert + 1,
                        capacity,
                    });
                }
                let abs = cfg.local_expert(e) * capacity + in_expert;
                let w = pool.window(EXPERT_IN, host)?;
                pool.remote_write(rank, &w, abs, &payload)?;
                if let Some(s) = scale {
                    let sw = pool.window(EXPERT_SCALE, host)?;
                    pool.remote_write(rank, &sw, abs, &s.to_le_bytes())?;
                }
            }
        }
        pool.barrier(rank)?;

        // Expert compute over each local expert's received rows.
        pool.begin_phase(rank, Phase::Expert);
        let in_w = pool.window(EXPERT_IN, rank)?;
        let out_w = pool.window(EXPERT_OUT, rank)?;
        let scale_w = cfg
            .quant_enabled
            .then(|| pool.window(EXPERT_SCALE, rank))
            .transpose()?;
        let mut raw = vec![0u8; in_w.row_bytes];
        let mut frow = vec![0f32; cfg.hidden_dim];
        let mut out = vec![0u8; out_w.row_bytes];
        for l in 0..er {
            let e = rank * er + l;
            for r in l * capacity..l * capacity + recv_local[l] as usize {
                pool.local_read(rank, &in_w, r, &mut raw)?;
                if let Some(sw) = &scale_w {
                    let mut sb = [0u8; 4];
                    pool.local_read(rank, sw, r, &mut sb)?;
                    rows::bytes_to_i8s(&raw, &mut qbuf);
                    crate::quant::dequantize_into(&qbuf, f32::from_le_bytes(sb), &mut frow);
                } else {
                    rows::bytes_to_f32s(&raw, &mut frow);
                }
                experts.apply(e, &mut frow);
                rows::f32s_to_bytes(&frow, &mut out);
                pool.local_write(rank, &out_w, r, &out)?;
            }
        }
        pool.set_flag(rank, rank, DONE_FLAG, step)?;

        // Combine: resolve remote output windows (handshake or cache), then
        // read each branch back from `local_expert * capacity + offset +
        // delta` and reduce.
        pool.begin_phase(rank, Phase::Combine);
        let handles = match self.opts.combine_mode {
            CombineMode::Handshake => {
                publish_out_address(pool, rank, step)?;
                pool.set_flag(rank, rank, ADDR_FLAG, step)?;
                pool.metrics().add_handshake(rank, Phase::Combine);
                let mut set = Vec::with_capacity(cfg.num_ranks);
                for h in 0..cfg.num_ranks {
                    pool.wait_flag(rank, h, ADDR_FLAG, step)?;
                    set.push(read_out_address(pool, rank, h)?);
                }
                set
            }
            CombineMode::Cached => {
                let cached = self.cache.slots[rank].lock().unwrap().clone();
                let set = cached.ok_or(SimError::CacheMiss { rank })?;
                for h in 0..cfg.num_ranks {
                    pool.wait_flag(rank, h, DONE_FLAG, step)?;
                }
                set
            }
        };
        let mut y = Matrix::zeros(cfg.tokens_per_rank, cfg.hidden_dim);
        let mut raw = vec![0u8; output_row_bytes(cfg)];
        for t in 0..cfg.tokens_per_rank {
            for j in 0..cfg.top_k {
                let e = *rw.routing.experts.at(t, j) as usize;
                let gate = *rw.routing.weights.at(t, j);
                let host = cfg.host_rank(e);
                let q = cfg.local_expert(e) * capacity
                    + (offset_col[e] + *local.stream_idx.at(t, j)) as usize;
                pool.remote_read(rank, &handles[host], q, &mut raw)?;
                rows::bytes_to_f32s(&raw, &mut frow);
                accumulate_weighted(y.row_mut(t), gate, &frow);
            }
        }
        Ok((y, local.stream_idx, offset_col, recv_local))
    }
}

/// Publish this rank's output window as (offset, bytes, row_bytes, step)
/// words into its own address slot — the control write peers read back.
fn publish_out_address(pool: &SymmetricPool, rank: usize, step: u64) -> Result<()> {
    let out_w = pool.window(EXPERT_OUT, rank)?;
    let slot = pool.window(ADDR_SLOT, rank)?;
    let words = [
        out_w.offset as u64,
        out_w.bytes as u64,
        out_w.row_bytes as u64,
        step,
    ];
    let mut buf = [0u8; 32];
    rows::u64s_to_bytes(&words, &mut buf);
    pool.remote_write(rank, &slot, 0, &buf)
}

/// Read rank `h`'s published address words and resolve them back to a
/// registered window — the handle combine reads payload rows through.
fn read_out_address(pool: &SymmetricPool, reader: usize, h: usize) -> Result<WindowHandle> {
    let slot = pool.window(ADDR_SLOT, h)?;
    let mut buf = [0u8; 32];
    pool.remote_read(reader, &slot, 0, &mut buf)?;
    let mut words = [0u64; 4];
    rows::bytes_to_u64s(&buf, &mut words);
    pool.window_at(h, words[0] as usize, words[1] as usize, words[2] as usize)
}

/// Convenience driver: one session, optional warm-up for cached mode, then
/// one step per workload.
pub fn run_decode(
    cfg: &SimConfig,
    step_workloads: &[Workload],
    experts: &dyn ExpertFunction,
    opts: &DecodeOptions,
) -> Result<DecodeRun> {
    let session = DecodeSession::new(cfg.clone(), opts.clone())?;
    if opts.combine_mode == CombineMode::Cached {
        session.warm_address_cache()?;
    }
    let mut steps = Vec::with_capacity(step_workloads.len());
    for wl in step_workloads {
        steps.push(session.step(wl, experts)?);
    }
    Ok(DecodeRun {
        steps,
        report: session.report(),
        state_symbols: session.state_symbols(),
        capacity_per_expert: session.capacity_per_expert(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_instance;
    use crate::model::{dense_oracle, generate_workload, AffineExperts};
    use crate::prefill::{run_prefill, PathOptions};

    fn rr_opts(mode: CombineMode) -> DecodeOptions {
        DecodeOptions {
            combine_mode: mode,
            capacity_per_expert: None,
            exec: ExecMode::RoundRobin,
            checked: true,
        }
    }

    #[test]
    fn worked_instance_matches_dense_reference_bitwise() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let run = run_decode(&cfg, &[wl.clone()], &experts, &rr_opts(CombineMode::Handshake))
            .unwrap();
        let oracle = dense_oracle(&cfg, &wl, &experts).unwrap();
        assert_eq!(run.steps[0].y, oracle);
    }

    #[test]
    fn offsets_match_the_two_stage_planner() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let dec = run_decode(&cfg, &[wl.clone()], &experts, &rr_opts(CombineMode::Handshake))
            .unwrap();
        let pre = run_prefill(
            &cfg,
            &wl,
            &experts,
            &PathOptions {
                exec: ExecMode::RoundRobin,
                checked: true,
                capture_windows: false,
            },
        )
        .unwrap();
        let step = &dec.steps[0];
        for rank in 0..cfg.num_ranks {
            assert_eq!(step.deltas[rank], pre.locals[rank].stream_idx);
            let col: Vec<u32> = (0..cfg.num_experts())
                .map(|e| *pre.global.offsets.at(e, rank))
                .collect();
            assert_eq!(step.offset_cols[rank], col);
        }
        // Worked numbers: rank 1's prefix column is [1,1,2,0].
        assert_eq!(step.offset_cols[1], vec![1, 1, 2, 0]);
    }

    #[test]
    fn single_branch_per_rank_lands_at_rank_index() {
        // One token, one branch, everything to expert 0: rank r's row is r.
        let cfg = SimConfig::new(3, 1, 1, 4, 1, 5);
        let mut wl = generate_workload(&cfg).unwrap();
        for rw in &mut wl.ranks {
            *rw.routing.experts.at_mut(0, 0) = 0;
        }
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let run = run_decode(&cfg, &[wl], &experts, &rr_opts(CombineMode::Handshake)).unwrap();
        let step = &run.steps[0];
        for rank in 0..3 {
            assert_eq!(step.offset_cols[rank][0], rank as u32);
            assert_eq!(*step.deltas[rank].at(0, 0), 0);
        }
    }

    #[test]
    fn capacity_overflow_names_the_expert() {
        let cfg = SimConfig::new(1, 1, 3, 4, 1, 7);
        let mut wl = generate_workload(&cfg).unwrap();
        for t in 0..3 {
            *wl.ranks[0].routing.experts.at_mut(t, 0) = 0;
        }
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let opts = DecodeOptions {
            capacity_per_expert: Some(2),
            ..rr_opts(CombineMode::Handshake)
        };
        let err = run_decode(&cfg, &[wl], &experts, &opts).unwrap_err();
        match err {
            SimError::CapacityOverflow {
                expert, capacity, ..
            } => {
                assert_eq!(expert, 0);
                assert_eq!(capacity, 2);
            }
            other => panic!("expected capacity overflow, got {other:?}"),
        }
    }

    #[test]
    fn cached_mode_without_warm_up_is_a_cache_miss() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let session = DecodeSession::new(cfg, rr_opts(CombineMode::Cached)).unwrap();
        let err = session.step(&wl, &experts).unwrap_err();
        assert!(matches!(err, SimError::CacheMiss { .. }), "got {err:?}");
    }

    #[test]
    fn cached_mode_matches_handshake_with_zero_handshakes() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let hs = run_decode(&cfg, &[wl.clone()], &experts, &rr_opts(CombineMode::Handshake))
            .unwrap();
        let ca = run_decode(&cfg, &[wl], &experts, &rr_opts(CombineMode::Cached)).unwrap();
        assert_eq!(hs.steps[0].y, ca.steps[0].y);
        assert_eq!(hs.report.handshake_events(Phase::Combine), 2);
        assert_eq!(ca.report.handshake_events(Phase::Combine), 0);
        // Cached combine also moves fewer control bytes in the combine
        // phase: completion flags only, no address words.
        let hs_ctl = hs.report.read_bytes(Phase::Combine, TrafficClass::Control);
        let ca_ctl = ca.report.read_bytes(Phase::Combine, TrafficClass::Control);
        assert!(ca_ctl < hs_ctl, "cached {ca_ctl} vs handshake {hs_ctl}");
    }

    #[test]
    fn warm_up_is_idempotent() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let session = DecodeSession::new(cfg, rr_opts(CombineMode::Cached)).unwrap();
        session.warm_address_cache().unwrap();
        let after_first = session.report();
        session.warm_address_cache().unwrap();
        let after_second = session.report();
        assert_eq!(
            after_first.total_read_bytes(),
            after_second.total_read_bytes()
        );
        assert_eq!(
            after_first.sync_events_total(),
            after_second.sync_events_total()
        );
        let step = session.step(&wl, &experts).unwrap();
        assert_eq!(step.y.len(), 2);
    }

    #[test]
    fn multiple_steps_reuse_the_same_windows() {
        let (cfg, _) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let mut cfg2 = cfg.clone();
        cfg2.seed = 11;
        let wl_a = generate_workload(&cfg).unwrap();
        let wl_b = generate_workload(&cfg2).unwrap();
        let run = run_decode(
            &cfg,
            &[wl_a.clone(), wl_b.clone()],
            &experts,
            &rr_opts(CombineMode::Cached),
        )
        .unwrap();
        assert_eq!(run.steps.len(), 2);
        assert_eq!(
            run.steps[0].y,
            dense_oracle(&cfg, &wl_a, &experts).unwrap()
        );
        assert_eq!(
            run.steps[1].y,
            dense_oracle(&cfg, &wl_b, &experts).unwrap()
        );
        assert_eq!(run.report.handshake_events_total(), 0);
    }

    #[test]
    fn registers_fewer_control_symbols_than_the_two_stage_path() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let dec = run_decode(&cfg, &[wl.clone()], &experts, &rr_opts(CombineMode::Handshake))
            .unwrap();
        let pre = run_prefill(&cfg, &wl, &experts, &PathOptions::default()).unwrap();
        let count = |syms: &[(String, TrafficClass)]| {
            syms.iter()
                .filter(|(_, c)| *c == TrafficClass::Control)
                .count()
        };
        let dec_ctl = count(&dec.state_symbols);
        let pre_ctl = count(&pre.state_symbols);
        assert_eq!(dec_ctl, 3);
        assert_eq!(pre_ctl, 7);
        assert!(dec_ctl < pre_ctl);
    }

    #[test]
    fn threaded_and_round_robin_agree() {
        let (cfg, wl) = worked_instance();
        let experts = AffineExperts::default_bank(cfg.num_experts());
        let rr = run_decode(&cfg, &[wl.clone()], &experts, &rr_opts(CombineMode::Handshake))
            .unwrap();
        let th = run_decode(&cfg, &[wl], &experts, &DecodeOptions::default()).unwrap();
        assert_eq!(rr.steps[0].y, th.steps[0].y);
        assert_eq!(rr.report.total_write_bytes(), th.report.total_write_bytes());
        assert_eq!(rr.report.total_read_bytes(), th.report.total_read_bytes());
        assert_eq!(rr.report.sync_events_total(), th.report.sync_events_total());
    }
}
