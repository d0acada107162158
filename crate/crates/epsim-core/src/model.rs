//! Workload generation, routing shapes, the expert model, and the
//! single-process reference computation every distributed path is checked
//! against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SimConfig;
use crate::error::{Result, SimError};
use crate::matrix::Matrix;

/// Per-token routing decisions: expert ids and gate weights, both T x k.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTable {
    pub experts: Matrix<u32>,
    pub weights: Matrix<f32>,
}

impl RoutingTable {
    pub fn tokens(&self) -> usize {
        self.experts.rows()
    }

    pub fn fanout(&self) -> usize {
        self.experts.cols()
    }

    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        if self.experts.rows() != cfg.tokens_per_rank
            || self.experts.cols() != cfg.top_k
            || self.weights.rows() != cfg.tokens_per_rank
            || self.weights.cols() != cfg.top_k
        {
            return Err(SimError::InvalidConfig(
                "routing table shape does not match config".into(),
            ));
        }
        let e = cfg.num_experts() as u32;
        for t in 0..self.experts.rows() {
            for &idx in self.experts.row(t) {
                if idx >= e {
                    return Err(SimError::InvalidConfig(format!(
                        "expert index {idx} out of range (E={e})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One rank's inputs: T x H payload rows plus the routing table.
#[derive(Debug, Clone, PartialEq)]
pub struct RankWorkload {
    pub hidden: Matrix<f32>,
    pub routing: RoutingTable,
}

/// The whole step's inputs, one entry per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub ranks: Vec<RankWorkload>,
}

impl Workload {
    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        if self.ranks.len() != cfg.num_ranks {
            return Err(SimError::InvalidConfig(
                "workload rank count does not match config".into(),
            ));
        }
        for rw in &self.ranks {
            if rw.hidden.rows() != cfg.tokens_per_rank || rw.hidden.cols() != cfg.hidden_dim {
                return Err(SimError::InvalidConfig(
                    "payload shape does not match config".into(),
                ));
            }
            rw.routing.validate(cfg)?;
        }
        Ok(())
    }
}

// Stream ids keep the three random draws (indexes, weights, payload)
// independent per rank so the workload is a pure function of (seed, rank).
const STREAM_EXPERTS: u64 = 0;
const STREAM_WEIGHTS: u64 = 1;
const STREAM_PAYLOAD: u64 = 2;

fn rank_rng(seed: u64, rank: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((rank as u64) * 3 + stream);
    rng
}

/// Deterministic workload: uniform expert picks (duplicates allowed, each a
/// distinct branch), gate weights and payload scalars uniform in [-1, 1].
pub fn generate_workload(cfg: &SimConfig) -> Result<Workload> {
    cfg.validate()?;
    let e = cfg.num_experts() as u32;
    let mut ranks = Vec::with_capacity(cfg.num_ranks);
    for rank in 0..cfg.num_ranks {
        let mut idx_rng = rank_rng(cfg.seed, rank, STREAM_EXPERTS);
        let mut w_rng = rank_rng(cfg.seed, rank, STREAM_WEIGHTS);
        let mut x_rng = rank_rng(cfg.seed, rank, STREAM_PAYLOAD);

        let mut experts = Matrix::zeros(cfg.tokens_per_rank, cfg.top_k);
        let mut weights = Matrix::zeros(cfg.tokens_per_rank, cfg.top_k);
        let mut hidden = Matrix::zeros(cfg.tokens_per_rank, cfg.hidden_dim);
        for t in 0..cfg.tokens_per_rank {
            for j in 0..cfg.top_k {
                *experts.at_mut(t, j) = idx_rng.random_range(0..e);
                *weights.at_mut(t, j) = w_rng.random_range(-1.0f32..1.0);
            }
            for i in 0..cfg.hidden_dim {
                *hidden.at_mut(t, i) = x_rng.random_range(-1.0f32..1.0);
            }
        }
        ranks.push(RankWorkload {
            hidden,
            routing: RoutingTable { experts, weights },
        });
    }
    Ok(Workload { ranks })
}

/// The per-expert transform applied to every routed row.
pub trait ExpertFunction: Sync {
    fn apply(&self, expert: usize, row: &mut [f32]);
}

/// Elementwise affine experts: f_e(x) = gain[e] * x + bias[e].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineExperts {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl AffineExperts {
    /// Default bank: gain 1 + 0.5e, bias e. Distinct per expert so a
    /// misrouted row changes the output.
    pub fn default_bank(num_experts: usize) -> Self {
        AffineExperts {
            gain: (0..num_experts).map(|e| 1.0 + 0.5 * e as f32).collect(),
            bias: (0..num_experts).map(|e| e as f32).collect(),
        }
    }

    /// Identity bank: every expert passes rows through unchanged.
    pub fn identity(num_experts: usize) -> Self {
        AffineExperts {
            gain: vec![1.0; num_experts],
            bias: vec![0.0; num_experts],
        }
    }
}

impl ExpertFunction for AffineExperts {
    fn apply(&self, expert: usize, row: &mut [f32]) {
        let a = self.gain[expert];
        let b = self.bias[expert];
        for v in row {
            // Plain mul + add; kept free of fused ops so every path that
            // evaluates an expert produces bit-identical results.
            *v = a * *v + b;
        }
    }
}

/// Accumulate `y += w * row` elementwise. All combine-side reductions go
/// through this one helper so accumulation order and rounding are shared.
pub fn accumulate_weighted(y: &mut [f32], w: f32, row: &[f32]) {
    for (yi, &ri) in y.iter_mut().zip(row) {
        *yi += w * ri;
    }
}

/// Worst-case combined-output error for one token whose row traveled with a
/// shared max-abs scale: rounding moves each element by at most half a
/// quantization step, an affine expert stretches that by |gain|, and the
/// gated reduction sums the branch magnitudes.
pub fn rounding_error_bound(
    routing: &RoutingTable,
    experts: &AffineExperts,
    t: usize,
    scale: f32,
) -> f64 {
    let mut bound = 0f64;
    for j in 0..routing.experts.cols() {
        let e = *routing.experts.at(t, j) as usize;
        let w = *routing.weights.at(t, j) as f64;
        bound += w.abs() * (experts.gain[e] as f64).abs() * scale as f64 / 2.0;
    }
    bound
}

/// Single-process reference: for every token, apply each routed expert to the
/// token's row and reduce with gate weights in ascending branch order.
/// Returns one T x H output matrix per rank.
pub fn dense_oracle(
    cfg: &SimConfig,
    workload: &Workload,
    experts: &dyn ExpertFunction,
) -> Result<Vec<Matrix<f32>>> {
    workload.validate(cfg)?;
    let mut out = Vec::with_capacity(cfg.num_ranks);
    for rw in &workload.ranks {
        let mut y = Matrix::zeros(cfg.tokens_per_rank, cfg.hidden_dim);
        let mut scratch = vec![0.0f32; cfg.hidden_dim];
        for t in 0..cfg.tokens_per_rank {
            for j in 0..cfg.top_k {
                let e = *rw.routing.experts.at(t, j) as usize;
                let w = *rw.routing.weights.at(t, j);
                scratch.copy_from_slice(rw.hidden.row(t));
                experts.apply(e, &mut scratch);
                accumulate_weighted(y.row_mut(t), w, &scratch);
            }
        }
        out.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg(seed: u64) -> SimConfig {
        SimConfig::new(2, 2, 3, 4, 2, seed)
    }

    #[test]
    fn workload_is_deterministic_per_seed() {
        let cfg = small_cfg(7);
        let a = generate_workload(&cfg).unwrap();
        let b = generate_workload(&cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_workload(&small_cfg(8)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn workload_values_in_range() {
        let cfg = SimConfig::new(2, 2, 16, 8, 3, 123);
        let wl = generate_workload(&cfg).unwrap();
        let e = cfg.num_experts() as u32;
        for rw in &wl.ranks {
            for t in 0..cfg.tokens_per_rank {
                for j in 0..cfg.top_k {
                    assert!(*rw.routing.experts.at(t, j) < e);
                    let w = *rw.routing.weights.at(t, j);
                    assert!((-1.0..1.0).contains(&w));
                }
                for &x in rw.hidden.row(t) {
                    assert!((-1.0..1.0).contains(&x));
                }
            }
        }
    }

    #[test]
    fn zero_tokens_yields_empty_tables() {
        let cfg = SimConfig::new(2, 2, 0, 4, 2, 1);
        let wl = generate_workload(&cfg).unwrap();
        let y = dense_oracle(&cfg, &wl, &AffineExperts::default_bank(4)).unwrap();
        assert_eq!(y.len(), 2);
        assert_eq!(y[0].rows(), 0);
    }

    #[test]
    fn oracle_identity_routing_returns_input() {
        // k = 1, unit weights, identity experts: the oracle must hand back X.
        let cfg = SimConfig::new(1, 4, 5, 6, 1, 3);
        cfg.validate().unwrap();
        let mut wl = generate_workload(&cfg).unwrap();
        for t in 0..cfg.tokens_per_rank {
            *wl.ranks[0].routing.weights.at_mut(t, 0) = 1.0;
        }
        let y = dense_oracle(&cfg, &wl, &AffineExperts::identity(4)).unwrap();
        assert_eq!(y[0], wl.ranks[0].hidden);
    }

    #[test]
    fn oracle_hand_checked_token() {
        // One token, two branches, checked by hand:
        //   experts 0 and 2 with the default bank: f_0(x) = x, f_2(x) = 2x + 2
        //   weights 0.5 and 0.25, x = [1, 2, 3, 4]
        //   y = 0.5*x + 0.25*(2x + 2) = [1.5, 2.5, 3.5, 4.5]
        let cfg = SimConfig::new(1, 4, 1, 4, 2, 0);
        let wl = Workload {
            ranks: vec![RankWorkload {
                hidden: Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                routing: RoutingTable {
                    experts: Matrix::from_vec(1, 2, vec![0, 2]).unwrap(),
                    weights: Matrix::from_vec(1, 2, vec![0.5, 0.25]).unwrap(),
                },
            }],
        };
        let y = dense_oracle(&cfg, &wl, &AffineExperts::default_bank(4)).unwrap();
        assert_eq!(y[0].row(0), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn oracle_zero_weights_zero_output() {
        let cfg = SimConfig::new(2, 2, 4, 4, 2, 11);
        let mut wl = generate_workload(&cfg).unwrap();
        for rw in &mut wl.ranks {
            for t in 0..cfg.tokens_per_rank {
                for j in 0..cfg.top_k {
                    *rw.routing.weights.at_mut(t, j) = 0.0;
                }
            }
        }
        let y = dense_oracle(&cfg, &wl, &AffineExperts::default_bank(4)).unwrap();
        for m in &y {
            assert!(m.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    proptest! {
        // Permuting tokens permutes outputs: tokens are independent.
        #[test]
        fn oracle_is_token_permutation_equivariant(seed in 0u64..500) {
            let cfg = SimConfig::new(1, 4, 6, 4, 2, seed);
            let wl = generate_workload(&cfg).unwrap();
            let y = dense_oracle(&cfg, &wl, &AffineExperts::default_bank(4)).unwrap();

            // Reverse the token order and recompute.
            let t = cfg.tokens_per_rank;
            let rev = |m: &Matrix<f32>| {
                let mut data = Vec::new();
                for r in (0..t).rev() { data.extend_from_slice(m.row(r)); }
                Matrix::from_vec(t, m.cols(), data).unwrap()
            };
            let rev_u = |m: &Matrix<u32>| {
                let mut data = Vec::new();
                for r in (0..t).rev() { data.extend_from_slice(m.row(r)); }
                Matrix::from_vec(t, m.cols(), data).unwrap()
            };
            let wl2 = Workload { ranks: vec![RankWorkload {
                hidden: rev(&wl.ranks[0].hidden),
                routing: RoutingTable {
                    experts: rev_u(&wl.ranks[0].routing.experts),
                    weights: rev(&wl.ranks[0].routing.weights),
                },
            }]};
            let y2 = dense_oracle(&cfg, &wl2, &AffineExperts::default_bank(4)).unwrap();
            prop_assert_eq!(rev(&y[0]), y2[0].clone());
        }

        // Scaling every gate weight by a power of two scales Y by the same
        // factor with no rounding, so the comparison can stay bitwise.
        #[test]
        fn oracle_weight_scaling_by_pow2_is_exact(seed in 0u64..500, up in proptest::bool::ANY) {
            let c: f32 = if up { 2.0 } else { 0.5 };
            let cfg = SimConfig::new(1, 4, 5, 4, 2, seed);
            let wl = generate_workload(&cfg).unwrap();
            let mut scaled = wl.clone();
            for t in 0..cfg.tokens_per_rank {
                for j in 0..cfg.top_k {
                    *scaled.ranks[0].routing.weights.at_mut(t, j) *= c;
                }
            }
            let bank = AffineExperts::default_bank(4);
            let y = dense_oracle(&cfg, &wl, &bank).unwrap();
            let ys = dense_oracle(&cfg, &scaled, &bank).unwrap();
            for t in 0..cfg.tokens_per_rank {
                for i in 0..cfg.hidden_dim {
                    prop_assert_eq!(
                        (c * y[0].at(t, i)).to_bits(),
                        ys[0].at(t, i).to_bits()
                    );
                }
            }
        }
    }
}
