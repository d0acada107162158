//! Simulation shape and run parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Bytes per payload scalar. Payload rows are 32-bit reals end to end.
pub const PAYLOAD_WIDTH: usize = 4;

/// Shape of one simulated model step: world size, expert placement, token
/// counts, hidden width, routing fan-out, and the workload seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// World size R: number of ranks, each owning one symmetric slice.
    pub num_ranks: usize,
    /// Experts hosted per rank. Total experts E = num_ranks * experts_per_rank.
    pub experts_per_rank: usize,
    /// Tokens per rank T.
    pub tokens_per_rank: usize,
    /// Hidden width H: scalars per payload row.
    pub hidden_dim: usize,
    /// Routing fan-out k: branches per token. Duplicate expert picks are
    /// allowed and stay distinct branches.
    pub top_k: usize,
    /// Bytes per payload scalar. Only 4 (f32) is supported.
    pub payload_width: usize,
    /// Quantize dispatch payloads to int8 rows with per-row scales.
    pub quant_enabled: bool,
    /// Workload seed; everything downstream is a pure function of it.
    pub seed: u64,
}

impl SimConfig {
    pub fn new(
        num_ranks: usize,
        experts_per_rank: usize,
        tokens_per_rank: usize,
        hidden_dim: usize,
        top_k: usize,
        seed: u64,
    ) -> Self {
        SimConfig {
            num_ranks,
            experts_per_rank,
            tokens_per_rank,
            hidden_dim,
            top_k,
            payload_width: PAYLOAD_WIDTH,
            quant_enabled: false,
            seed,
        }
    }

    /// Total expert count E.
    pub fn num_experts(&self) -> usize {
        self.num_ranks * self.experts_per_rank
    }

    /// Rank hosting a global expert id: contiguous blocks of experts_per_rank.
    pub fn host_rank(&self, expert: usize) -> usize {
        expert / self.experts_per_rank
    }

    /// Index of a global expert within its hosting rank.
    pub fn local_expert(&self, expert: usize) -> usize {
        expert % self.experts_per_rank
    }

    /// Bytes in one payload row.
    pub fn row_bytes(&self) -> usize {
        self.hidden_dim * self.payload_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ranks == 0 {
            return Err(SimError::InvalidConfig("num_ranks must be >= 1".into()));
        }
        if self.experts_per_rank == 0 {
            return Err(SimError::InvalidConfig(
                "experts_per_rank must be >= 1".into(),
            ));
        }
        if self.hidden_dim == 0 {
            return Err(SimError::InvalidConfig("hidden_dim must be >= 1".into()));
        }
        let e = self.num_experts();
        if self.top_k == 0 || self.top_k > e {
            return Err(SimError::InvalidConfig(format!(
                "top_k must satisfy 1 <= k <= {e}, got {}",
                self.top_k
            )));
        }
        if self.payload_width != PAYLOAD_WIDTH {
            return Err(SimError::InvalidConfig(format!(
                "unsupported payload_width {} (payload scalars are 32-bit)",
                self.payload_width
            )));
        }
        Ok(())
    }
}
