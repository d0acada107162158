//! Drives one worker closure per rank against a shared pool.
//!
//! Workers always run on real threads (round-robin determinism comes from
//! the pool's turn-passing, not from running inline). A worker that fails or
//! panics poisons the pool so every peer blocked on a flag or barrier fails
//! fast with the root cause instead of hanging until timeout.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use crate::error::{Result, SimError};
use crate::symmem::SymmetricPool;

fn panic_detail(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic with non-string payload".to_string()
    }
}

/// Run `work(rank)` once per rank and collect the outputs in rank order.
///
/// The error reported is the root cause: a worker's own failure wins over
/// the poison echoes its peers observe.
pub fn run_ranks<T, F>(pool: &Arc<SymmetricPool>, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let world = pool.world();
    pool.reset_schedule()?;
    let work = &work;
    let results: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..world)
            .map(|rank| {
                let pool = Arc::clone(pool);
                scope.spawn(move || -> Result<T> {
                    let res = match pool.sched_enter(rank) {
                        Err(e) => Err(e),
                        Ok(()) => match catch_unwind(AssertUnwindSafe(|| work(rank))) {
                            Ok(r) => r,
                            Err(payload) => Err(SimError::WorkerPanic {
                                rank,
                                detail: panic_detail(payload),
                            }),
                        },
                    };
                    if let Err(e) = &res {
                        pool.poison(e.clone());
                    }
                    pool.sched_exit(rank);
                    res
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(payload) => Err(SimError::WorkerPanic {
                    rank: usize::MAX,
                    detail: panic_detail(payload),
                }),
            })
            .collect()
    });

    let mut out = Vec::with_capacity(world);
    let mut first_err: Option<SimError> = None;
    let mut root_err: Option<SimError> = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e.clone());
                }
                // Deadlocks and panics are usually echoes of another rank's
                // failure; prefer a specific error when one exists.
                if root_err.is_none() && !matches!(e, SimError::Deadlock(_)) {
                    root_err = Some(e);
                }
            }
        }
    }
    match root_err.or(first_err) {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Phase, TrafficClass};
    use crate::symmem::{ExecMode, PoolOptions, SymbolSpec, SymmetricPool};

    fn make_pool(world: usize, exec: ExecMode) -> Arc<SymmetricPool> {
        SymmetricPool::bootstrap(
            PoolOptions {
                num_ranks: world,
                slice_budget: 1 << 16,
                exec,
                checked: true,
            },
            &[SymbolSpec::new("buf", 1024, 4, TrafficClass::Payload)],
        )
        .unwrap()
    }

    /// Each rank writes one word into every peer's slice, crosses a barrier,
    /// then reads back what its peers left for it.
    fn rotate_exchange(pool: &Arc<SymmetricPool>) -> Result<Vec<Vec<u32>>> {
        let world = pool.world();
        run_ranks(pool, |rank| {
            for dst in 0..world {
                let win = pool.window("buf", dst)?;
                let val = (rank * 100 + dst) as u32;
                pool.remote_write(rank, &win, rank, &val.to_le_bytes())?;
            }
            pool.barrier(rank)?;
            let own = pool.window("buf", rank)?;
            let mut got = Vec::new();
            for src in 0..world {
                let mut b = [0u8; 4];
                pool.remote_read(rank, &own, src, &mut b)?;
                got.push(u32::from_le_bytes(b));
            }
            Ok(got)
        })
    }

    #[test]
    fn exchange_round_robin() {
        let pool = make_pool(4, ExecMode::RoundRobin);
        let got = rotate_exchange(&pool).unwrap();
        for (rank, row) in got.iter().enumerate() {
            for (src, &v) in row.iter().enumerate() {
                assert_eq!(v, (src * 100 + rank) as u32);
            }
        }
        assert_eq!(pool.snapshot_metrics().sync_events_total(), 1);
    }

    #[test]
    fn exchange_threaded_matches_round_robin() {
        let pool_t = make_pool(4, ExecMode::Threaded { timeout_ms: 5000 });
        let pool_rr = make_pool(4, ExecMode::RoundRobin);
        let got_t = rotate_exchange(&pool_t).unwrap();
        let got_rr = rotate_exchange(&pool_rr).unwrap();
        assert_eq!(got_t, got_rr);
        let rt = pool_t.snapshot_metrics();
        let rr = pool_rr.snapshot_metrics();
        assert_eq!(rt.total_write_bytes(), rr.total_write_bytes());
        assert_eq!(rt.total_read_bytes(), rr.total_read_bytes());
        assert_eq!(rt.sync_events_total(), rr.sync_events_total());
    }

    #[test]
    fn flag_chain_round_robin_is_deterministic() {
        // A strict dependency chain: rank r waits for r-1's flag, appends,
        // then releases r+1. Output order is forced regardless of schedule.
        for _ in 0..3 {
            let pool = make_pool(3, ExecMode::RoundRobin);
            let order = std::sync::Mutex::new(Vec::new());
            run_ranks(&pool, |rank| {
                if rank > 0 {
                    pool.wait_flag(rank, rank, "go", rank as u64)?;
                }
                order.lock().unwrap().push(rank);
                if rank + 1 < 3 {
                    pool.set_flag(rank, rank + 1, "go", (rank + 1) as u64)?;
                }
                Ok(())
            })
            .unwrap();
            assert_eq!(*order.lock().unwrap(), vec![0, 1, 2]);
        }
    }

    #[test]
    fn missing_participant_deadlocks_round_robin() {
        let pool = make_pool(2, ExecMode::RoundRobin);
        let err = run_ranks(&pool, |rank| {
            if rank == 0 {
                pool.wait_flag(0, 0, "never-set", 1)?;
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, SimError::Deadlock(_)));
        let msg = err.to_string();
        assert!(msg.contains("never-set"), "unhelpful deadlock: {msg}");
    }

    #[test]
    fn missing_participant_times_out_threaded() {
        let pool = make_pool(2, ExecMode::Threaded { timeout_ms: 150 });
        let err = run_ranks(&pool, |rank| {
            if rank == 0 {
                pool.barrier(0)?; // rank 1 never arrives
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, SimError::Deadlock(_)));
    }

    #[test]
    fn worker_error_unblocks_peers_with_root_cause() {
        for exec in [ExecMode::Threaded { timeout_ms: 5000 }, ExecMode::RoundRobin] {
            let pool = make_pool(2, exec);
            let err = run_ranks(&pool, |rank| {
                if rank == 1 {
                    return Err(SimError::CacheMiss { rank: 1 });
                }
                pool.barrier(rank)?; // would hang forever without poisoning
                Ok(())
            })
            .unwrap_err();
            assert_eq!(err, SimError::CacheMiss { rank: 1 });
        }
    }

    #[test]
    fn worker_panic_is_captured() {
        let pool = make_pool(2, ExecMode::RoundRobin);
        let err = run_ranks(&pool, |rank| {
            if rank == 0 {
                panic!("boom at rank 0");
            }
            pool.barrier(rank)?;
            Ok(())
        })
        .unwrap_err();
        match err {
            SimError::WorkerPanic { rank, detail } => {
                assert_eq!(rank, 0);
                assert!(detail.contains("boom"));
            }
            other => panic!("expected panic capture, got {other:?}"),
        }
    }

    #[test]
    fn checked_mode_visibility_holds_across_schedules() {
        // Write -> flag -> read chains at several world sizes: both modes
        // must agree and never trip the race detector.
        for world in [1usize, 2, 3, 5] {
            for exec in [ExecMode::Threaded { timeout_ms: 5000 }, ExecMode::RoundRobin] {
                let pool = make_pool(world, exec);
                let got = run_ranks(&pool, |rank| {
                    let dst = (rank + 1) % world;
                    let win = pool.window("buf", dst)?;
                    let val = (rank as u32) << 8;
                    pool.remote_write(rank, &win, rank, &val.to_le_bytes())?;
                    pool.set_flag(rank, dst, "ready", 1)?;
                    let src = (rank + world - 1) % world;
                    pool.wait_flag(rank, rank, "ready", 1)?;
                    let own = pool.window("buf", rank)?;
                    let mut b = [0u8; 4];
                    pool.remote_read(rank, &own, src, &mut b)?;
                    Ok(u32::from_le_bytes(b))
                })
                .unwrap();
                for (rank, &v) in got.iter().enumerate() {
                    let src = (rank + world - 1) % world;
                    assert_eq!(v, (src as u32) << 8);
                }
            }
        }
    }

    #[test]
    fn phase_attribution_follows_begin_phase() {
        let pool = make_pool(2, ExecMode::RoundRobin);
        run_ranks(&pool, |rank| {
            pool.begin_phase(rank, Phase::Dispatch);
            let win = pool.window("buf", 1 - rank)?;
            pool.remote_write(rank, &win, rank, &[0u8; 4])?;
            pool.barrier(rank)?;
            pool.begin_phase(rank, Phase::Combine);
            let own = pool.window("buf", rank)?;
            let mut b = [0u8; 4];
            pool.remote_read(rank, &own, 1 - rank, &mut b)?;
            Ok(())
        })
        .unwrap();
        let r = pool.snapshot_metrics();
        assert_eq!(r.write_bytes(Phase::Dispatch, TrafficClass::Payload), 8);
        assert_eq!(r.read_bytes(Phase::Combine, TrafficClass::Payload), 8);
        assert_eq!(r.write_bytes(Phase::Combine, TrafficClass::Payload), 0);
        r.check_conservation().unwrap();
    }
}
