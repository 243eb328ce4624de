//! Monte Carlo estimate of the Girsanov denoising gap between DDPM and MCB.
//!
//! On reverse interval `k` the frozen-mean sampler pays
//! `E‖m_u(X_u) − m_{u_k}(X_{u_k})‖²` and MCB pays `E‖m_u(X_u) − m̄(X_{u_k}, X_u)‖²`,
//! both weighted by `c_u² / σ_u⁴` and integrated over the interval. `m̄` is the
//! blockwise filtered endpoint mean.

use serde::{Deserialize, Serialize};

use crate::discrete::{encode, JointDist, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::oracle::{filtered_endpoint_mean, joint_posterior, token_marginals};
use crate::rng::{derive_seed, map_indexed, stream, McBudget};
use crate::schedule::{forward_sample, girsanov_weight, NoiseGrid};
use crate::stats::{Estimate, Welford};

/// Quadrature layout and Monte Carlo budget per node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapConfig {
    /// Nodes at `t_k + j/(n+1) · γ_k`, `j = 1..=n`, each with weight `γ_k / n`.
    pub nodes_per_interval: usize,
    pub budget: McBudget,
}

/// Raw (unweighted) error means at one quadrature node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapNode {
    pub interval: usize,
    pub node: usize,
    /// Reverse time `T − u`.
    pub t: f64,
    pub u: f64,
    /// `c_u² / σ_u⁴`.
    pub weight: f64,
    pub quad_weight: f64,
    pub ddpm: Estimate,
    pub mcb: Estimate,
    /// Paired difference `ddpm − mcb` on common random numbers.
    pub gap: Estimate,
}

impl GapNode {
    pub fn factor(&self) -> f64 {
        self.weight * self.quad_weight
    }
}

/// Weighted, integrated errors on one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapInterval {
    pub interval: usize,
    pub u_k: f64,
    pub u_next: f64,
    pub ddpm: Estimate,
    pub mcb: Estimate,
    pub gap: Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapTotals {
    pub ddpm: Estimate,
    pub mcb: Estimate,
    pub gap: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub horizon: f64,
    pub samples_per_node: usize,
    pub nodes: Vec<GapNode>,
    pub intervals: Vec<GapInterval>,
    pub total: GapTotals,
    /// Intervals with `γ_k = 0`.
    pub skipped: Vec<usize>,
}

/// Squared errors `(ddpm, mcb)` for one draw of `(X_0, X_u, X_{u_k})`.
fn draw_errors(nu: &JointDist, u: f64, u_k: f64, seed: u64) -> Result<(f64, f64)> {
    let mut r = stream(seed, "gap", 0);
    let w = nu.sample(&mut r);
    let x_u = forward_sample(&encode(&w), u, &mut r)?;
    let x_k = forward_sample(&x_u, u_k - u, &mut r)?;
    let m_u = token_marginals(&joint_posterior(nu, u, &x_u)?);
    let m_k = token_marginals(&joint_posterior(nu, u_k, &x_k)?);
    let (mut ddpm, mut mcb) = (0.0, 0.0);
    for pos in 0..nu.shape().len {
        let filtered = filtered_endpoint_mean(&m_k, &x_k, u_k, u, x_u.block(pos), pos)?;
        for ((a, b), c) in m_u.row(pos).iter().zip(m_k.row(pos)).zip(&filtered) {
            ddpm += (a - b) * (a - b);
            mcb += (a - c) * (a - c);
        }
    }
    Ok((ddpm, mcb))
}

pub fn denoising_gap(nu: &JointDist, grid: &NoiseGrid, cfg: GapConfig) -> Result<GapReport> {
    nu.shape().check_cap(DEFAULT_ENUMERATION_CAP)?;
    let n = cfg.budget.samples;
    if n < 1000 {
        return Err(Error::domain("denoising gap needs at least 1000 samples per node"));
    }
    if cfg.nodes_per_interval == 0 {
        return Err(Error::domain("need at least one quadrature node per interval"));
    }
    let horizon = grid.horizon();
    let nodes_n = cfg.nodes_per_interval;
    let mut nodes = Vec::new();
    let mut intervals = Vec::new();
    let mut skipped = Vec::new();
    for (k, (u_k, u_next)) in grid.intervals().enumerate() {
        let gamma = u_k - u_next;
        if !(gamma > 0.0) {
            skipped.push(k);
            continue;
        }
        let mut weighted = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..nodes_n {
            let frac = (j + 1) as f64 / (nodes_n + 1) as f64;
            let u = u_k - frac * gamma;
            let node_seed = derive_seed(cfg.budget.seed, "gap-node", (k * nodes_n + j) as u64);
            let draws = map_indexed(cfg.budget.execution, n, |i| draw_errors(nu, u, u_k, derive_seed(node_seed, "draw", i as u64)));
            let (mut d, mut m, mut g) = (Welford::default(), Welford::default(), Welford::default());
            for draw in draws {
                let (a, b) = draw?;
                d.push(a);
                m.push(b);
                g.push(a - b);
            }
            let node = GapNode {
                interval: k,
                node: j,
                t: horizon - u,
                u,
                weight: girsanov_weight(u)?,
                quad_weight: gamma / nodes_n as f64,
                ddpm: d.estimate(),
                mcb: m.estimate(),
                gap: g.estimate(),
            };
            let f = node.factor();
            weighted.0.push(node.ddpm.scaled(f));
            weighted.1.push(node.mcb.scaled(f));
            weighted.2.push(node.gap.scaled(f));
            nodes.push(node);
        }
        intervals.push(GapInterval {
            interval: k,
            u_k,
            u_next,
            ddpm: Estimate::sum(weighted.0),
            mcb: Estimate::sum(weighted.1),
            gap: Estimate::sum(weighted.2),
        });
    }
    let total = GapTotals {
        ddpm: Estimate::sum(intervals.iter().map(|i| i.ddpm)),
        mcb: Estimate::sum(intervals.iter().map(|i| i.mcb)),
        gap: Estimate::sum(intervals.iter().map(|i| i.gap)),
    };
    Ok(GapReport { horizon, samples_per_node: n, nodes, intervals, total, skipped })
}
