//! Temperature and nucleus (top-p) transforms on marginal tables.

use crate::error::{Error, Result};
use crate::oracle::MarginalTable;
use crate::stats::softmax_in_place;

/// Tolerance on the cumulative-mass test so `p` equal to a prefix sum keeps that prefix.
const NUCLEUS_SLACK: f64 = 1e-12;

/// Rows become `π^{1/τ} / Σ π^{1/τ}`, computed in log space.
pub fn apply_temperature(m: &MarginalTable, tau: f64) -> Result<MarginalTable> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("temperature must be positive and finite, got {tau}")));
    }
    if tau == 1.0 {
        return Ok(m.clone());
    }
    let mut out = m.clone();
    for row in out.rows_mut() {
        for p in row.iter_mut() {
            *p = if *p > 0.0 { p.ln() / tau } else { f64::NEG_INFINITY };
        }
        softmax_in_place(row);
    }
    Ok(out)
}

/// Per row, keeps the smallest prefix (by descending mass, lower index first on ties)
/// whose mass reaches `p`, then renormalizes.
pub fn apply_nucleus(m: &MarginalTable, p: f64) -> Result<MarginalTable> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain(format!("nucleus mass must lie in (0, 1], got {p}")));
    }
    if p == 1.0 {
        return Ok(m.clone());
    }
    let mut out = m.clone();
    let mut order: Vec<usize> = Vec::with_capacity(m.shape().vocab);
    for row in out.rows_mut() {
        order.clear();
        order.extend(0..row.len());
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut kept = 0.0;
        let mut cut = order.len();
        for (i, &v) in order.iter().enumerate() {
            kept += row[v];
            if kept >= p - NUCLEUS_SLACK {
                cut = i + 1;
                break;
            }
        }
        for &v in &order[cut..] {
            row[v] = 0.0;
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    Ok(out)
}

/// Temperature first, then nucleus.
pub fn decode_controls(m: &MarginalTable, tau: f64, p: f64) -> Result<MarginalTable> {
    apply_nucleus(&apply_temperature(m, tau)?, p)
}
