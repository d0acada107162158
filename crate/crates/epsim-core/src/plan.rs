//! Placement arithmetic shared by every exchange path.
//!
//! A routed branch (token t, slot j) targeting expert e lands in the hosting
//! rank's per-expert receive stream at row `offset[e][src] + stream_idx[t][j]`:
//! the large offset is a prefix sum of per-source counts, the small offset is
//! the branch's precedence number within (source, expert), counted row-major
//! over (t, j). Both sides of the exchange recompute the same numbers from
//! the same counts, which is what makes direct placement possible.

use crate::config::SimConfig;
use crate::error::{Result, SimError};
use crate::matrix::Matrix;
use crate::model::RoutingTable;

/// Counts and small offsets one source rank derives from its own routing
/// table alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalPlan {
    /// Routed branches per destination rank (length R).
    pub per_rank_counts: Vec<u32>,
    /// Routed branches per expert (length E).
    pub per_expert_counts: Vec<u32>,
    /// T×k small offsets: precedence of branch (t, j) within its expert's
    /// stream from this source, counted row-major.
    pub stream_idx: Matrix<u32>,
}

/// Offsets every rank derives once the R×E count matrix is known. All ranks
/// compute identical tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalPlan {
    /// R×E: row r = rank r's per-expert branch counts.
    pub counts: Matrix<u32>,
    /// E×R large offsets: `offsets[e][r]` = rows experts e received from
    /// ranks before r.
    pub offsets: Matrix<u32>,
    /// Total branches arriving at each expert (length E).
    pub recv_per_expert: Vec<u32>,
    /// Total rows arriving at each hosting rank (length R).
    pub recv_per_rank: Vec<u32>,
    /// Row of each expert's block inside its host's receive window
    /// (experts grouped host-major, locals in id order; length E).
    pub expert_base: Vec<u32>,
}

/// Derive counts and small offsets for one rank's routing table.
pub fn local_plan(cfg: &SimConfig, routing: &RoutingTable) -> Result<LocalPlan> {
    let num_experts = cfg.num_experts();
    let mut per_rank = vec![0u32; cfg.num_ranks];
    let mut per_expert = vec![0u32; num_experts];
    let mut stream_idx = Matrix::zeros(routing.experts.rows(), routing.experts.cols());
    for t in 0..routing.experts.rows() {
        for j in 0..routing.experts.cols() {
            let e = *routing.experts.at(t, j) as usize;
            if e >= num_experts {
                return Err(SimError::InvalidConfig(format!(
                    "routing entry ({t},{j}) targets expert {e} of {num_experts}"
                )));
            }
            *stream_idx.at_mut(t, j) = per_expert[e];
            per_expert[e] += 1;
            per_rank[cfg.host_rank(e)] += 1;
        }
    }
    Ok(LocalPlan {
        per_rank_counts: per_rank,
        per_expert_counts: per_expert,
        stream_idx,
    })
}

/// Derive the offset tables from the gathered count matrix.
pub fn global_plan(cfg: &SimConfig, counts: Matrix<u32>) -> Result<GlobalPlan> {
    let num_experts = cfg.num_experts();
    if counts.rows() != cfg.num_ranks || counts.cols() != num_experts {
        return Err(SimError::InvalidConfig(format!(
            "count matrix is {}x{}, expected {}x{}",
            counts.rows(),
            counts.cols(),
            cfg.num_ranks,
            num_experts
        )));
    }
    let mut offsets = Matrix::zeros(num_experts, cfg.num_ranks);
    let mut recv_per_expert = vec![0u32; num_experts];
    for e in 0..num_experts {
        let mut acc = 0u32;
        for r in 0..cfg.num_ranks {
            *offsets.at_mut(e, r) = acc;
            acc += *counts.at(r, e);
        }
        recv_per_expert[e] = acc;
    }
    let mut recv_per_rank = vec![0u32; cfg.num_ranks];
    let mut expert_base = vec![0u32; num_experts];
    for host in 0..cfg.num_ranks {
        let mut base = 0u32;
        for local in 0..cfg.experts_per_rank {
            let e = host * cfg.experts_per_rank + local;
            expert_base[e] = base;
            base += recv_per_expert[e];
        }
        recv_per_rank[host] = base;
    }
    Ok(GlobalPlan {
        counts,
        offsets,
        recv_per_expert,
        recv_per_rank,
        expert_base,
    })
}

impl GlobalPlan {
    /// Expert-local destination row of branch (t, j) sent by `src`.
    pub fn branch_row(&self, local: &LocalPlan, src: usize, t: usize, j: usize, e: usize) -> u32 {
        *self.offsets.at(e, src) + *local.stream_idx.at(t, j)
    }
}

/// T×k expert-local destination rows for every branch of one source rank —
/// the placement record differential tests assert on.
pub fn branch_rows(
    routing: &RoutingTable,
    local: &LocalPlan,
    global: &GlobalPlan,
    src: usize,
) -> Matrix<u32> {
    let mut rows = Matrix::zeros(routing.experts.rows(), routing.experts.cols());
    for t in 0..routing.experts.rows() {
        for j in 0..routing.experts.cols() {
            let e = *routing.experts.at(t, j) as usize;
            *rows.at_mut(t, j) = global.branch_row(local, src, t, j, e);
        }
    }
    rows
}
