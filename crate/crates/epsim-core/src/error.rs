//! Error and result types shared across the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("rank {rank} out of range (world size {world})")]
    RankOutOfRange { rank: usize, world: usize },

    #[error("symbol `{0}` already registered")]
    DuplicateSymbol(String),

    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),

    #[error("slice overflow: symbol `{symbol}` needs {requested} bytes, {available} left in the slice")]
    SliceOverflow {
        symbol: String,
        requested: usize,
        available: usize,
    },

    #[error("collective allocation mismatch for `{symbol}`: {detail}")]
    AllocMismatch { symbol: String, detail: String },

    #[error("row {row} out of range for window `{symbol}` ({rows} rows)")]
    RowOutOfRange {
        symbol: String,
        row: usize,
        rows: usize,
    },

    #[error("length mismatch on `{symbol}`: row is {expected} bytes, got {got}")]
    RowSizeMismatch {
        symbol: String,
        expected: usize,
        got: usize,
    },

    #[error("address {offset}+{len} does not fall inside a registered window on rank {rank}")]
    UnregisteredWindow {
        rank: usize,
        offset: usize,
        len: usize,
    },

    #[error(
        "read-before-ready: rank {reader} read row {row} of `{symbol}` on rank {owner} \
         without a synchronizing event after the write"
    )]
    ReadBeforeReady {
        reader: usize,
        owner: usize,
        symbol: String,
        row: usize,
    },

    #[error(
        "double write: row {row} of `{symbol}` on rank {owner} written twice in one phase \
         (first by rank {first}, again by rank {second})"
    )]
    DoubleWrite {
        owner: usize,
        symbol: String,
        row: usize,
        first: usize,
        second: usize,
    },

    #[error("flag `{symbol}` on rank {owner} moved backwards ({from} -> {to})")]
    FlagRegression {
        owner: usize,
        symbol: String,
        from: u64,
        to: u64,
    },

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("capacity overflow on expert {expert}: {needed} rows routed, window holds {capacity}")]
    CapacityOverflow {
        expert: usize,
        needed: usize,
        capacity: usize,
    },

    #[error("address cache miss on rank {rank}: cached combine requested before warm-up")]
    CacheMiss { rank: usize },

    #[error("worker for rank {rank} panicked: {detail}")]
    WorkerPanic { rank: usize, detail: String },
}
