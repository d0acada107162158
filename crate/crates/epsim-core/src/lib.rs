//! Deterministic multi-rank simulator for expert-parallel token exchange
//! over pooled symmetric memory.
//!
//! The crate models a world of ranks, each hosting a contiguous group of
//! experts. Routed tokens travel dispatch → expert → combine either directly
//! into pre-computed remote offsets (relay-free) or through staged copy
//! buffers (the conventional baseline), with every remote byte accounted per
//! phase and traffic class. All paths reproduce the dense reference output
//! bit-for-bit and are deterministic per seed under both execution modes.

pub mod baseline;
pub mod config;
pub mod decode;
pub mod error;
pub mod fixtures;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod plan;
pub mod prefill;
pub mod quant;
pub mod sched;
pub mod selftest;
pub mod symmem;

pub use baseline::run_baseline;
pub use config::{SimConfig, PAYLOAD_WIDTH};
pub use decode::{run_decode, CombineMode, DecodeOptions, DecodeRun, DecodeSession, DecodeStep};
pub use error::{Result, SimError};
pub use matrix::Matrix;
pub use metrics::{
    byte_ratio, ComparisonSummary, MetricsReport, Phase, TrafficClass, NUM_CLASSES, NUM_PHASES,
};
pub use model::{
    dense_oracle, generate_workload, rounding_error_bound, AffineExperts, ExpertFunction,
    RoutingTable, Workload,
};
pub use prefill::{run_prefill, ExchangeRun, PathOptions, WindowDump};
pub use sched::run_ranks;
pub use selftest::{run_selftest, CheckOutcome, SelftestReport};
pub use symmem::{ExecMode, PoolOptions, SymbolSpec, SymmetricPool, WindowHandle};
