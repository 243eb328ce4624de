//! Exact clean-posterior computations by enumeration of `V^L`.
//!
//! Everything here is exact-or-refuse: distributions are explicit tables and
//! posteriors are computed with Bayes' rule under the Gaussian forward kernel,
//! in log space.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discrete::{sample_categorical, JointDist, Shape, StateVector, TokenSequence, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::rng::{self, map_indexed, McBudget};
use crate::schedule::{ou_coeffs, BridgeCoeffs};
use crate::stats::{log_sum_exp, softmax_in_place, Estimate, Welford};

/// Row-sum tolerance accepted when a marginal table is built from external values.
pub const MARGINAL_ROW_TOL: f64 = 1e-6;

/// Token posterior marginals: an `L × V` row-stochastic table at noise level `level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    shape: Shape,
    probs: Vec<f64>,
    level: f64,
}

impl MarginalTable {
    pub fn new(shape: Shape, probs: Vec<f64>, level: f64) -> Result<Self> {
        if probs.len() != shape.dim() {
            return Err(Error::shape(format!("expected {} marginal entries, got {}", shape.dim(), probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("marginal entries must be finite and >= 0".into()));
        }
        for (pos, row) in probs.chunks_exact(shape.vocab).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > MARGINAL_ROW_TOL {
                return Err(Error::InvalidDistribution(format!("marginal row {pos} sums to {s}")));
            }
        }
        Ok(Self { shape, probs, level })
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, probs: Vec<f64>, level: f64) -> Self {
        Self { shape, probs, level }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        let v = self.shape.vocab;
        &self.probs[pos * v..(pos + 1) * v]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.shape.vocab)
    }

    pub(crate) fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.probs.chunks_exact_mut(self.shape.vocab)
    }

    /// The mean endpoint `Σ_v π_{ℓ,v} e_v`, i.e. the table flattened into a state.
    pub fn mean_endpoint(&self) -> StateVector {
        StateVector::from_values(self.shape, self.probs.clone()).expect("finite marginals")
    }

    /// Average Shannon entropy of the rows, in nats.
    pub fn mean_row_entropy(&self) -> f64 {
        let h: f64 = self.rows().map(entropy).sum();
        h / self.shape.len as f64
    }
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// A distribution over the `V^L` clean sequences (big-endian indexed).
#[derive(Debug, Clone, PartialEq)]
pub struct JointPosterior {
    shape: Shape,
    probs: Vec<f64>,
    level: f64,
}

impl JointPosterior {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng.random())
    }
}

/// Bayes' rule under `X_t | w ~ N(c_t e(w), σ_t² I)`.
pub fn joint_posterior(nu: &JointDist, t: f64, x: &StateVector) -> Result<JointPosterior> {
    let shape = nu.shape();
    if x.shape() != shape {
        return Err(Error::shape(format!("state {:?} vs distribution {:?}", x.shape(), shape)));
    }
    if !(t > 0.0) {
        return Err(Error::domain(format!("posterior needs t > 0, got {t}")));
    }
    let k = ou_coeffs(t)?;
    // -|x - c e(w)|²/(2σ²) = const + (c/σ²) Σ_ℓ x_{ℓ,w_ℓ}; the constant cancels.
    let gain = k.c / k.sigma2;
    let xs = x.values();
    let mut logw: Vec<f64> = nu
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 {
                let dot: f64 = (0..shape.len).map(|pos| xs[pos * shape.vocab + shape.digit(i, pos)]).sum();
                p.ln() + gain * dot
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let lse = softmax_in_place(&mut logw);
    if !lse.is_finite() {
        return Err(Error::DegeneratePosterior);
    }
    Ok(JointPosterior { shape, probs: logw, level: t })
}

/// Mass of `{w : w_ℓ = v}` for every `(ℓ, v)`.
pub fn token_marginals(joint: &JointPosterior) -> MarginalTable {
    let s = joint.shape;
    let mut probs = vec![0.0; s.dim()];
    for (i, &p) in joint.probs.iter().enumerate() {
        for pos in 0..s.len {
            probs[pos * s.vocab + s.digit(i, pos)] += p;
        }
    }
    MarginalTable::from_parts_unchecked(s, probs, joint.level)
}

/// The product law `Π_ℓ m[ℓ, w_ℓ]` as a table over `V^L`.
pub fn factorized_posterior(m: &MarginalTable) -> Result<JointPosterior> {
    let s = m.shape;
    let n = s.check_cap(DEFAULT_ENUMERATION_CAP)?;
    let probs = (0..n)
        .map(|i| (0..s.len).map(|pos| m.probs[pos * s.vocab + s.digit(i, pos)]).product())
        .collect();
    Ok(JointPosterior { shape: s, probs, level: m.level })
}

/// `KL(p ‖ q) = Σ p log(p/q)` over aligned tables, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("KL tables differ in length"));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if !(qi > 0.0) {
                return Err(Error::DivergentKl);
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// `Σ_w joint(w) log[joint(w) / Π_ℓ m[ℓ, w_ℓ]]`, evaluated per position as
/// `Σ_ℓ CE(joint_ℓ, m_ℓ) - H(joint)` where `joint_ℓ` is the joint's own
/// position-`ℓ` marginal.
pub fn multi_information(joint: &JointPosterior, m: &MarginalTable) -> Result<f64> {
    if joint.shape != m.shape {
        return Err(Error::shape("posterior and marginal table shapes differ"));
    }
    let own = token_marginals(joint);
    let mut cross = 0.0;
    for (pj, pm) in own.probs.iter().zip(&m.probs) {
        if *pj > 0.0 {
            if !(*pm > 0.0) {
                return Err(Error::DivergentKl);
            }
            cross -= pj * pm.ln();
        }
    }
    Ok((cross - entropy(&joint.probs)).max(0.0))
}

/// `E[X_{0,ℓ} | X_{u_k} = y_k, X_{u,ℓ} = y_block]` under the prior marginal
/// `q_{u_k,ℓ}(· | y_k)` and the coordinate-wise OU bridge likelihood.
pub fn filtered_endpoint_mean(
    prior: &MarginalTable,
    y_k: &StateVector,
    u_k: f64,
    u: f64,
    y_block: &[f64],
    pos: usize,
) -> Result<Vec<f64>> {
    let shape = prior.shape;
    if y_k.shape() != shape || y_block.len() != shape.vocab || pos >= shape.len {
        return Err(Error::shape("filter inputs do not match the marginal table"));
    }
    if !(u > 0.0 && u < u_k) {
        return Err(Error::domain(format!("filter needs 0 < u < u_k, got u = {u}, u_k = {u_k}")));
    }
    let k = BridgeCoeffs::new(u, u_k)?;
    let gain = k.clean / k.var;
    let yk = y_k.block(pos);
    let mut logits: Vec<f64> = prior
        .row(pos)
        .iter()
        .enumerate()
        .map(|(v, &p)| {
            if p > 0.0 {
                p.ln() + gain * (y_block[v] - k.noisy * yk[v])
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if !softmax_in_place(&mut logits).is_finite() {
        return Err(Error::DegeneratePosterior);
    }
    Ok(logits)
}

fn kernel_coeffs(u_k: f64, u_next: f64) -> Result<BridgeCoeffs> {
    if !(u_next >= 0.0 && u_next < u_k) {
        return Err(Error::domain(format!("kernel needs 0 <= u_next < u_k, got {u_next}, {u_k}")));
    }
    if u_next == 0.0 {
        return Err(Error::DegenerateKernel(u_next));
    }
    BridgeCoeffs::new(u_next, u_k)
}

/// Log-density at `z` of the endpoint mixture `Σ_w posterior(w) · B(z | y, e(w))`
/// with bridge coefficients `k`, full Gaussian constants included.
pub fn mixture_kernel_logdensity(posterior: &JointPosterior, y: &StateVector, k: BridgeCoeffs, z: &StateVector) -> Result<f64> {
    let s = posterior.shape;
    if y.shape() != s || z.shape() != s {
        return Err(Error::shape("kernel state shapes differ from the posterior"));
    }
    // residual r = z - b y; |r - a e(w)|² = |r|² - 2a Σ_ℓ r_{ℓ,w_ℓ} + a² L
    let r: Vec<f64> = z.values().iter().zip(y.values()).map(|(zi, yi)| zi - k.noisy * yi).collect();
    let r2: f64 = r.iter().map(|x| x * x).sum();
    let base = -0.5 * s.dim() as f64 * (2.0 * PI * k.var).ln();
    let terms: Vec<f64> = posterior
        .probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 {
                let dot: f64 = (0..s.len).map(|pos| r[pos * s.vocab + s.digit(i, pos)]).sum();
                let sq = r2 - 2.0 * k.clean * dot + k.clean * k.clean * s.len as f64;
                p.ln() - sq / (2.0 * k.var)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(base + log_sum_exp(&terms))
}

/// `log K*(z | y)`: the exact posterior-predictive one-step kernel from `u_k` to `u_next`.
pub fn true_kernel_logdensity(nu: &JointDist, y: &StateVector, u_k: f64, u_next: f64, z: &StateVector) -> Result<f64> {
    let k = kernel_coeffs(u_k, u_next)?;
    let post = joint_posterior(nu, u_k, y)?;
    mixture_kernel_logdensity(&post, y, k, z)
}

/// `log K^MCB(z | y)`, factorized over blocks.
pub fn mcb_kernel_logdensity(m: &MarginalTable, y: &StateVector, u_k: f64, u_next: f64, z: &StateVector) -> Result<f64> {
    let k = kernel_coeffs(u_k, u_next)?;
    mcb_kernel_logdensity_with(m, y, k, z)
}

fn mcb_kernel_logdensity_with(m: &MarginalTable, y: &StateVector, k: BridgeCoeffs, z: &StateVector) -> Result<f64> {
    let s = m.shape;
    if y.shape() != s || z.shape() != s {
        return Err(Error::shape("kernel state shapes differ from the marginal table"));
    }
    let block_base = -0.5 * s.vocab as f64 * (2.0 * PI * k.var).ln();
    let mut total = 0.0;
    let mut terms = vec![0.0; s.vocab];
    for pos in 0..s.len {
        let (zb, yb) = (z.block(pos), y.block(pos));
        let r: Vec<f64> = zb.iter().zip(yb).map(|(zi, yi)| zi - k.noisy * yi).collect();
        let r2: f64 = r.iter().map(|x| x * x).sum();
        for (v, term) in terms.iter_mut().enumerate() {
            let p = m.row(pos)[v];
            *term = if p > 0.0 {
                let sq = r2 - 2.0 * k.clean * r[v] + k.clean * k.clean;
                p.ln() - sq / (2.0 * k.var)
            } else {
                f64::NEG_INFINITY
            };
        }
        total += block_base + log_sum_exp(&terms);
    }
    Ok(total)
}

/// Draws `z ~ B(· | y, e(w))` with `w ~ posterior`.
pub fn sample_mixture_kernel<R: Rng + ?Sized>(posterior: &JointPosterior, y: &StateVector, k: BridgeCoeffs, rng: &mut R) -> StateVector {
    let s = posterior.shape;
    let w = TokenSequence::from_index(s, posterior.sample_index(rng)).expect("index in range");
    let std = k.std();
    let mut z = y.clone();
    for (i, zi) in z.values_mut().iter_mut().enumerate() {
        let hot = if w.tokens()[i / s.vocab] == i % s.vocab { 1.0 } else { 0.0 };
        let xi: f64 = rng.sample(StandardNormal);
        *zi = k.clean * hot + k.noisy * *zi + std * xi;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: Estimate,
    pub used: usize,
    /// Samples whose log-density ratio was not finite; excluded from the estimate.
    pub flagged: usize,
}

/// Monte Carlo `KL(K* ‖ K^MCB)` with `z ~ K*(· | y)`.
pub fn kernel_kl_estimate(nu: &JointDist, y: &StateVector, u_k: f64, u_next: f64, budget: McBudget) -> Result<KlEstimate> {
    if budget.samples < 1000 {
        return Err(Error::domain("kernel KL estimate needs at least 1000 samples"));
    }
    let k = kernel_coeffs(u_k, u_next)?;
    let post = joint_posterior(nu, u_k, y)?;
    let marg = token_marginals(&post);
    let ratios = map_indexed(budget.execution, budget.samples, |i| {
        let mut r = rng::stream(budget.seed, "kernel-kl", i as u64);
        let z = sample_mixture_kernel(&post, y, k, &mut r);
        let lt = mixture_kernel_logdensity(&post, y, k, &z).ok()?;
        let lm = mcb_kernel_logdensity_with(&marg, y, k, &z).ok()?;
        let d = lt - lm;
        d.is_finite().then_some(d)
    });
    let acc: Welford = ratios.iter().flatten().copied().collect();
    let used = acc.count as usize;
    Ok(KlEstimate { estimate: acc.estimate(), used, flagged: budget.samples - used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::{encode, make_joint, JointKind};
    use crate::rng::Execution;
    use crate::schedule::forward_sample;
    use rand::SeedableRng;

    fn sh(v: usize, l: usize) -> Shape {
        Shape::new(v, l).unwrap()
    }

    fn seq(t: &[usize], v: usize) -> TokenSequence {
        TokenSequence::new(t.to_vec(), v).unwrap()
    }

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn posterior_recovers_prior_at_pure_noise() {
        let nu = make_joint(&JointKind::Dirichlet { seed: 1, alpha: 1.0 }, sh(3, 2)).unwrap();
        let x = StateVector::standard_normal(sh(3, 2), &mut rng(2));
        let post = joint_posterior(&nu, 50.0, &x).unwrap();
        for (a, b) in post.probs().iter().zip(nu.probs()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn posterior_concentrates_at_small_noise() {
        let nu = make_joint(&JointKind::Uniform, sh(3, 2)).unwrap();
        let w = seq(&[2, 1], 3);
        let c = ou_coeffs(0.05).unwrap().c;
        let x = StateVector::from_values(sh(3, 2), encode(&w).values().iter().map(|v| c * v).collect()).unwrap();
        let post = joint_posterior(&nu, 0.05, &x).unwrap();
        assert!(post.probs()[w.index()] > 0.99);
    }

    #[test]
    fn posterior_ignores_constant_shift_of_log_likelihood() {
        // Adding the same amount to every block adds a w-independent constant.
        let nu = make_joint(&JointKind::Dirichlet { seed: 5, alpha: 0.7 }, sh(3, 2)).unwrap();
        let x = StateVector::standard_normal(sh(3, 2), &mut rng(3));
        let shifted = StateVector::from_values(x.shape(), x.values().iter().map(|v| v + 4.25).collect()).unwrap();
        let a = joint_posterior(&nu, 0.4, &x).unwrap();
        let b = joint_posterior(&nu, 0.4, &shifted).unwrap();
        for (p, q) in a.probs().iter().zip(b.probs()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let nu = make_joint(&JointKind::Uniform, sh(2, 2)).unwrap();
        let x = StateVector::zeros(sh(2, 2));
        assert!(joint_posterior(&nu, 0.0, &x).is_err());
        assert!(joint_posterior(&nu, 1.0, &StateVector::zeros(sh(2, 1))).is_err());
    }

    #[test]
    fn token_marginal_examples() {
        let s = sh(3, 2);
        let mut probs = vec![0.0; 9];
        probs[seq(&[1, 2], 3).index()] = 1.0;
        let point = JointPosterior { shape: s, probs, level: 1.0 };
        let m = token_marginals(&point);
        assert_eq!(m.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.0, 1.0]);

        let uni = JointPosterior { shape: s, probs: vec![1.0 / 9.0; 9], level: 1.0 };
        for row in token_marginals(&uni).rows() {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }

        let copy = make_joint(&JointKind::Copy, s).unwrap();
        let x = StateVector::standard_normal(s, &mut rng(4));
        let m = token_marginals(&joint_posterior(&copy, 50.0, &x).unwrap());
        for row in m.rows() {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn factorized_examples() {
        let s = sh(2, 2);
        let m = MarginalTable::new(s, vec![0.0, 1.0, 1.0, 0.0], 1.0).unwrap();
        let f = factorized_posterior(&m).unwrap();
        assert_eq!(f.probs(), &[0.0, 0.0, 1.0, 0.0]);
        let m = MarginalTable::new(s, vec![0.5; 4], 1.0).unwrap();
        assert_eq!(factorized_posterior(&m).unwrap().probs(), &[0.25; 4]);

        let prod = make_joint(
            &JointKind::Product { marginals: vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]] },
            sh(3, 2),
        )
        .unwrap();
        let joint = JointPosterior { shape: sh(3, 2), probs: prod.probs().to_vec(), level: 1.0 };
        let back = factorized_posterior(&token_marginals(&joint)).unwrap();
        for (a, b) in back.probs().iter().zip(prod.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_information_examples() {
        let prod = make_joint(
            &JointKind::Product { marginals: vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]] },
            sh(3, 2),
        )
        .unwrap();
        let joint = JointPosterior { shape: sh(3, 2), probs: prod.probs().to_vec(), level: 1.0 };
        assert!(multi_information(&joint, &token_marginals(&joint)).unwrap().abs() < 1e-12);

        let copy = make_joint(&JointKind::Copy, sh(3, 2)).unwrap();
        let joint = JointPosterior { shape: sh(3, 2), probs: copy.probs().to_vec(), level: f64::INFINITY };
        let mi = multi_information(&joint, &token_marginals(&joint)).unwrap();
        assert!((mi - 3f64.ln()).abs() < 1e-12);
        assert!((mi - 1.098_612_288_7).abs() < 1e-9);

        // Mass on a sequence the reference table gives zero probability.
        let m = MarginalTable::new(sh(3, 2), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(multi_information(&joint, &m), Err(Error::DivergentKl));
    }

    #[test]
    fn multi_information_equals_kl_to_factorization() {
        for seed in 0..10 {
            let nu = make_joint(&JointKind::Dirichlet { seed, alpha: 0.5 }, sh(4, 2)).unwrap();
            let x = StateVector::standard_normal(nu.shape(), &mut rng(seed + 100));
            let post = joint_posterior(&nu, 0.3, &x).unwrap();
            let m = token_marginals(&post);
            let kl = kl_divergence(post.probs(), factorized_posterior(&m).unwrap().probs()).unwrap();
            let mi = multi_information(&post, &m).unwrap();
            assert!((kl - mi).abs() < 1e-12, "{kl} vs {mi}");
        }
    }

    #[test]
    fn filter_reverts_to_prior_without_new_information() {
        let nu = make_joint(&JointKind::Dirichlet { seed: 8, alpha: 1.0 }, sh(3, 2)).unwrap();
        let y = StateVector::standard_normal(nu.shape(), &mut rng(8));
        let u_k = 1.2;
        let prior = token_marginals(&joint_posterior(&nu, u_k, &y).unwrap());
        let u = u_k * (1.0 - 1e-8);
        for pos in 0..2 {
            let out = filtered_endpoint_mean(&prior, &y, u_k, u, y.block(pos), pos).unwrap();
            for (a, b) in out.iter().zip(prior.row(pos)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(filtered_endpoint_mean(&prior, &y, u_k, u_k, y.block(0), 0).is_err());
        assert!(filtered_endpoint_mean(&prior, &y, u_k, 0.0, y.block(0), 0).is_err());
    }

    #[test]
    fn filter_with_point_mass_prior() {
        let s = sh(3, 1);
        let prior = MarginalTable::new(s, vec![0.0, 0.0, 1.0], 2.0).unwrap();
        let y = StateVector::standard_normal(s, &mut rng(1));
        let obs = [5.0, -3.0, 0.1];
        let out = filtered_endpoint_mean(&prior, &y, 2.0, 0.7, &obs, 0).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn single_sequence_kernel_is_one_bridge() {
        let s = sh(3, 2);
        let mut probs = vec![0.0; 9];
        let w = seq(&[0, 2], 3);
        probs[w.index()] = 1.0;
        let nu = JointDist::new(s, probs).unwrap();
        let y = StateVector::standard_normal(s, &mut rng(5));
        let z = StateVector::standard_normal(s, &mut rng(6));
        let (u_k, u_next) = (1.0, 0.4);
        let bp = crate::schedule::bridge_params(u_next, u_k, &y, &encode(&w)).unwrap();
        let direct = -0.5 * 6.0 * (2.0 * PI * bp.var).ln() - z.squared_distance(&bp.mean) / (2.0 * bp.var);
        let lt = true_kernel_logdensity(&nu, &y, u_k, u_next, &z).unwrap();
        assert!((lt - direct).abs() < 1e-10);
    }

    #[test]
    fn kernels_agree_without_cross_position_structure() {
        // L = 1
        let nu = make_joint(&JointKind::Dirichlet { seed: 2, alpha: 1.0 }, sh(4, 1)).unwrap();
        // product law
        let prod = make_joint(
            &JointKind::Product { marginals: vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]] },
            sh(3, 2),
        )
        .unwrap();
        let mut r = rng(7);
        for d in [&nu, &prod] {
            for _ in 0..20 {
                let y = StateVector::standard_normal(d.shape(), &mut r);
                let z = StateVector::standard_normal(d.shape(), &mut r);
                let m = token_marginals(&joint_posterior(d, 1.3, &y).unwrap());
                let lt = true_kernel_logdensity(d, &y, 1.3, 0.6, &z).unwrap();
                let lm = mcb_kernel_logdensity(&m, &y, 1.3, 0.6, &z).unwrap();
                assert!((lt - lm).abs() < 1e-10, "{lt} vs {lm}");
            }
        }
    }

    #[test]
    fn mcb_kernel_equals_enumerated_mixture() {
        let s = sh(3, 2);
        let mut r = rng(11);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..6).map(|_| r.random::<f64>() + 0.01).collect();
            let mut probs = raw.clone();
            for row in probs.chunks_exact_mut(3) {
                let t: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= t);
            }
            let m = MarginalTable::new(s, probs, 0.9).unwrap();
            let y = StateVector::standard_normal(s, &mut r);
            let z = StateVector::standard_normal(s, &mut r);
            let k = BridgeCoeffs::new(0.5, 0.9).unwrap();
            let lm = mcb_kernel_logdensity(&m, &y, 0.9, 0.5, &z).unwrap();
            let brute = mixture_kernel_logdensity(&factorized_posterior(&m).unwrap(), &y, k, &z).unwrap();
            assert!((lm - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_kernel_is_permutation_invariant() {
        // Copy law is invariant under relabeling tokens 0 <-> 1 in every block.
        let s = sh(3, 2);
        let nu = make_joint(&JointKind::Copy, s).unwrap();
        let swap = |x: &StateVector| {
            let mut v = x.values().to_vec();
            for b in v.chunks_exact_mut(3) {
                b.swap(0, 1);
            }
            StateVector::from_values(s, v).unwrap()
        };
        let mut r = rng(12);
        let base = StateVector::standard_normal(sh(3, 1), &mut r);
        let mut yv = base.values().to_vec();
        yv.extend_from_slice(base.values());
        yv[0] = 0.3;
        yv[1] = 0.3;
        yv[3] = 0.3;
        yv[4] = 0.3;
        let y = StateVector::from_values(s, yv).unwrap();
        assert_eq!(swap(&y), y);
        for _ in 0..10 {
            let z = StateVector::standard_normal(s, &mut r);
            let a = true_kernel_logdensity(&nu, &y, 1.0, 0.5, &z).unwrap();
            let b = true_kernel_logdensity(&nu, &y, 1.0, 0.5, &swap(&z)).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn terminal_kernel_is_reported_degenerate() {
        let nu = make_joint(&JointKind::Copy, sh(2, 2)).unwrap();
        let y = StateVector::zeros(sh(2, 2));
        assert_eq!(
            true_kernel_logdensity(&nu, &y, 1.0, 0.0, &y),
            Err(Error::DegenerateKernel(0.0))
        );
    }

    #[test]
    fn true_kernel_self_normalizes() {
        // Importance sampling with the bridge to a uniform endpoint as proposal.
        let s = sh(3, 2);
        let nu = make_joint(&JointKind::Copy, s).unwrap();
        let y = StateVector::standard_normal(s, &mut rng(13));
        let (u_k, u_next) = (1.0, 0.5);
        let k = BridgeCoeffs::new(u_next, u_k).unwrap();
        let uniform = JointPosterior { shape: s, probs: vec![1.0 / 9.0; 9], level: u_k };
        let mut r = rng(14);
        let w: Vec<f64> = (0..20_000)
            .map(|_| {
                let z = sample_mixture_kernel(&uniform, &y, k, &mut r);
                let lt = true_kernel_logdensity(&nu, &y, u_k, u_next, &z).unwrap();
                let lq = mixture_kernel_logdensity(&uniform, &y, k, &z).unwrap();
                (lt - lq).exp()
            })
            .collect();
        let e = Estimate::from_values(&w);
        assert!((e.mean - 1.0).abs() < 3.0 * e.se, "{e:?}");
    }

    #[test]
    fn kernel_kl_vanishes_without_dependence() {
        let prod = make_joint(
            &JointKind::Product { marginals: vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]] },
            sh(3, 2),
        )
        .unwrap();
        let single = make_joint(&JointKind::Dirichlet { seed: 3, alpha: 1.0 }, sh(3, 1)).unwrap();
        for (i, nu) in [prod, single].iter().enumerate() {
            let y = forward_sample(&encode(&nu.sample(&mut rng(i as u64))), 1.0, &mut rng(50 + i as u64)).unwrap();
            let est = kernel_kl_estimate(nu, &y, 1.0, 0.5, McBudget::new(2000, 9)).unwrap();
            assert_eq!(est.flagged, 0);
            assert!(est.estimate.mean.abs() <= 3.0 * est.estimate.se + 1e-12, "{est:?}");
        }
    }

    #[test]
    fn kernel_kl_bounded_by_multi_information() {
        let nu = make_joint(&JointKind::Copy, sh(3, 2)).unwrap();
        let w = nu.sample(&mut rng(1));
        let y = forward_sample(&encode(&w), 1.0, &mut rng(2)).unwrap();
        let post = joint_posterior(&nu, 1.0, &y).unwrap();
        let mi = multi_information(&post, &token_marginals(&post)).unwrap();
        let est = kernel_kl_estimate(&nu, &y, 1.0, 0.5, McBudget::new(10_000, 3)).unwrap();
        assert!(est.estimate.mean <= mi + 3.0 * est.estimate.se, "{est:?} vs {mi}");
        assert!(est.estimate.mean > 0.0);
    }

    #[test]
    fn kernel_kl_is_execution_independent() {
        let nu = make_joint(&JointKind::Copy, sh(3, 2)).unwrap();
        let y = StateVector::standard_normal(nu.shape(), &mut rng(3));
        let b = McBudget::new(1500, 4);
        let a = kernel_kl_estimate(&nu, &y, 1.0, 0.5, b.with_execution(Execution::Sequential)).unwrap();
        let p = kernel_kl_estimate(&nu, &y, 1.0, 0.5, b.with_execution(Execution::Parallel)).unwrap();
        assert_eq!(a, p);
        assert!(kernel_kl_estimate(&nu, &y, 1.0, 0.5, McBudget::new(10, 4)).is_err());
    }
}
