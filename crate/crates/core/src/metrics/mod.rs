//! Sample-quality metrics and closed-form identity checks.

mod gap;

pub use gap::{denoising_gap, GapConfig, GapInterval, GapNode, GapReport, GapTotals};

use serde::{Deserialize, Serialize};

use crate::discrete::{JointDist, Shape, StateVector, TokenSequence};
use crate::error::{Error, Result};
use crate::oracle::{
    factorized_posterior, joint_posterior, kernel_kl_estimate, kl_divergence, multi_information, token_marginals,
    KlEstimate, MarginalTable,
};
use crate::rng::McBudget;
use crate::schedule::BridgeCoeffs;
use crate::stats::{Estimate, Welford};

fn check_nonempty(samples: &[TokenSequence]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::domain("metric needs at least one sample"));
    }
    Ok(())
}

/// Plug-in entropy (nats) of one sequence's token histogram.
pub fn sequence_unigram_entropy(seq: &TokenSequence) -> f64 {
    let mut counts = vec![0usize; seq.vocab()];
    for &t in seq.tokens() {
        counts[t] += 1;
    }
    let n = seq.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Average per-sequence unigram entropy with its standard error.
pub fn unigram_entropy(samples: &[TokenSequence]) -> Result<Estimate> {
    check_nonempty(samples)?;
    Ok(samples.iter().map(sequence_unigram_entropy).collect::<Welford>().estimate())
}

/// Relative frequency of each sequence index.
pub fn sequence_frequencies(samples: &[TokenSequence], shape: Shape) -> Result<Vec<f64>> {
    check_nonempty(samples)?;
    let n = shape.num_sequences().ok_or_else(|| Error::domain("V^L overflows"))?;
    let mut freq = vec![0.0; n];
    for s in samples {
        if s.shape() != shape {
            return Err(Error::shape("sample shape differs from the distribution"));
        }
        freq[s.index()] += 1.0;
    }
    let total = samples.len() as f64;
    freq.iter_mut().for_each(|f| *f /= total);
    Ok(freq)
}

/// `½ Σ_w |freq(w) − ν(w)|`. The SE comes from the delta method on the multinomial
/// frequencies with gradient `½ sign(freq − ν)`.
pub fn empirical_tv(samples: &[TokenSequence], nu: &JointDist) -> Result<Estimate> {
    let freq = sequence_frequencies(samples, nu.shape())?;
    let n = samples.len() as f64;
    let mut tv = 0.0;
    let (mut m1, mut m2) = (0.0, 0.0);
    for (&f, &p) in freq.iter().zip(nu.probs()) {
        tv += (f - p).abs();
        let s = if f > p { 1.0 } else if f < p { -1.0 } else { 0.0 };
        m1 += s * f;
        m2 += s * s * f;
    }
    let var = ((m2 - m1 * m1) / n).max(0.0);
    Ok(Estimate::new(0.5 * tv, 0.5 * var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    /// Mean of `−ln ν(w)` over samples with `ν(w) > 0`.
    pub estimate: Estimate,
    /// Samples with `ν(w) = 0`, reported instead of dropped silently.
    pub zero_probability: usize,
    pub samples: usize,
}

pub fn oracle_nll(samples: &[TokenSequence], nu: &JointDist) -> Result<NllReport> {
    check_nonempty(samples)?;
    let mut acc = Welford::default();
    let mut zero = 0;
    for s in samples {
        if s.shape() != nu.shape() {
            return Err(Error::shape("sample shape differs from the distribution"));
        }
        let p = nu.prob(s);
        if p > 0.0 {
            acc.push(-p.ln());
        } else {
            zero += 1;
        }
    }
    Ok(NllReport { estimate: acc.estimate(), zero_probability: zero, samples: samples.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationCheck {
    pub kl: f64,
    pub mi: f64,
    pub residual: f64,
}

/// KL between the joint posterior and its factorization, against the multi-information.
pub fn factorization_check(nu: &JointDist, t: f64, x: &StateVector) -> Result<FactorizationCheck> {
    let joint = joint_posterior(nu, t, x)?;
    let m = token_marginals(&joint);
    let kl = kl_divergence(joint.probs(), factorized_posterior(&m)?.probs())?;
    let mi = multi_information(&joint, &m)?;
    Ok(FactorizationCheck { kl, mi, residual: (kl - mi).abs() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    /// `‖mean_MCB − mean_DDPM‖₂`.
    pub mean_residual: f64,
    /// Max-norm of `Cov_MCB − Cov_DDPM − a² blockdiag(diag π − π πᵀ)`.
    pub cov_residual: f64,
    /// Per-block `Cov_MCB − Cov_DDPM`, each `V × V` row-major.
    pub surplus: Vec<Vec<f64>>,
}

/// One-step MCB and DDPM moments in closed form. The MCB side is treated as a
/// Gaussian mixture per block (components `a e_v + b y_ℓ`, common covariance `s² I`);
/// the DDPM side as a single Gaussian at `a π_ℓ + b y_ℓ`.
pub fn moment_check(m: &MarginalTable, y: &StateVector, u_k: f64, u_next: f64) -> Result<MomentCheck> {
    if m.shape() != y.shape() {
        return Err(Error::shape("marginals and state differ in shape"));
    }
    if !(u_next >= 0.0 && u_next < u_k) {
        return Err(Error::domain(format!("moment check needs 0 <= u_next < u_k, got {u_next}, {u_k}")));
    }
    let k = BridgeCoeffs::new(u_next, u_k)?;
    let v = m.shape().vocab;
    let mut mean_sq = 0.0;
    let mut cov_residual: f64 = 0.0;
    let mut surplus = Vec::with_capacity(m.shape().len);
    for (pos, pi) in m.rows().enumerate() {
        let yb = y.block(pos);
        let comp = |c: usize, i: usize| k.clean * if c == i { 1.0 } else { 0.0 } + k.noisy * yb[i];
        // Mixture mean Σ_c π_c μ_c.
        let mix_mean: Vec<f64> = (0..v).map(|i| (0..v).map(|c| pi[c] * comp(c, i)).sum()).collect();
        let ddpm_mean: Vec<f64> = (0..v).map(|i| k.clean * pi[i] + k.noisy * yb[i]).collect();
        mean_sq += mix_mean.iter().zip(&ddpm_mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut block = vec![0.0; v * v];
        for i in 0..v {
            for j in 0..v {
                // Law of total covariance: s² δ_ij + Σ_c π_c μ_ci μ_cj − μ̄_i μ̄_j.
                let second: f64 = (0..v).map(|c| pi[c] * comp(c, i) * comp(c, j)).sum();
                let mcb = if i == j { k.var } else { 0.0 } + second - mix_mean[i] * mix_mean[j];
                let ddpm = if i == j { k.var } else { 0.0 };
                let diff = mcb - ddpm;
                let predicted = k.clean * k.clean * (if i == j { pi[i] } else { 0.0 } - pi[i] * pi[j]);
                cov_residual = cov_residual.max((diff - predicted).abs());
                block[i * v + j] = diff;
            }
        }
        surplus.push(block);
    }
    Ok(MomentCheck { mean_residual: mean_sq.sqrt(), cov_residual, surplus })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelBoundCheck {
    pub kl: KlEstimate,
    /// Multi-information of the joint posterior at `(u_k, y)`.
    pub mi: f64,
    /// `kl ≤ mi + z · se`.
    pub holds: bool,
}

pub fn kernel_bound_check(
    nu: &JointDist,
    y: &StateVector,
    u_k: f64,
    u_next: f64,
    budget: McBudget,
    z: f64,
) -> Result<KernelBoundCheck> {
    let joint = joint_posterior(nu, u_k, y)?;
    let mi = multi_information(&joint, &token_marginals(&joint))?;
    let kl = kernel_kl_estimate(nu, y, u_k, u_next, budget)?;
    Ok(KernelBoundCheck { kl, mi, holds: kl.estimate.mean <= mi + z * kl.estimate.se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::{make_joint, JointKind};
    use crate::rng::stream;

    fn seq(t: &[usize], v: usize) -> TokenSequence {
        TokenSequence::new(t.to_vec(), v).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let constant = vec![seq(&[1, 1, 1], 3), seq(&[0, 0, 0], 3)];
        assert_eq!(unigram_entropy(&constant).unwrap().mean, 0.0);
        let pairs = vec![seq(&[0, 1], 2), seq(&[2, 0], 3)];
        assert!((unigram_entropy(&pairs).unwrap().mean - 2f64.ln()).abs() < 1e-15);
        assert!(unigram_entropy(&[]).is_err());
    }

    #[test]
    fn tv_examples() {
        let s = Shape::new(2, 2).unwrap();
        let mut probs = vec![0.0; 4];
        probs[2] = 1.0;
        let point = JointDist::new(s, probs).unwrap();
        let hits = vec![seq(&[1, 0], 2); 10];
        let tv = empirical_tv(&hits, &point).unwrap();
        assert_eq!(tv.mean, 0.0);
        assert_eq!(tv.se, 0.0);
        let misses = vec![seq(&[0, 1], 2); 10];
        assert_eq!(empirical_tv(&misses, &point).unwrap().mean, 1.0);
    }

    #[test]
    fn nll_examples() {
        let s = Shape::new(3, 2).unwrap();
        let nu = make_joint(&JointKind::Dirichlet { seed: 2, alpha: 1.0 }, s).unwrap();
        let (mode, pmax) = nu.probs().iter().enumerate().fold((0, 0.0), |b, (i, &p)| if p > b.1 { (i, p) } else { b });
        let reps = vec![TokenSequence::from_index(s, mode).unwrap(); 5];
        let r = oracle_nll(&reps, &nu).unwrap();
        assert!((r.estimate.mean + pmax.ln()).abs() < 1e-15);
        assert_eq!(r.zero_probability, 0);

        let uni = make_joint(&JointKind::Uniform, s).unwrap();
        let mixed = vec![seq(&[0, 1], 3), seq(&[2, 2], 3), seq(&[1, 0], 3)];
        assert!((oracle_nll(&mixed, &uni).unwrap().estimate.mean - 2.0 * 3f64.ln()).abs() < 1e-12);

        let copy = make_joint(&JointKind::Copy, s).unwrap();
        let r = oracle_nll(&mixed, &copy).unwrap();
        assert_eq!(r.zero_probability, 2);
        assert_eq!(r.samples, 3);
    }

    #[test]
    fn factorization_examples() {
        let s = Shape::new(3, 2).unwrap();
        let prod = make_joint(
            &JointKind::Product { marginals: vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]] },
            s,
        )
        .unwrap();
        let mut r = stream(1, "t", 0);
        let x = StateVector::standard_normal(s, &mut r);
        let c = factorization_check(&prod, 0.7, &x).unwrap();
        assert!(c.kl.abs() < 1e-12 && c.mi.abs() < 1e-12 && c.residual < 1e-12);
        let copy = make_joint(&JointKind::Copy, s).unwrap();
        let c = factorization_check(&copy, 50.0, &x).unwrap();
        assert!((c.kl - 3f64.ln()).abs() < 1e-8);
        assert!((c.mi - 3f64.ln()).abs() < 1e-8);
        for seed in 0..20 {
            let nu = make_joint(&JointKind::Dirichlet { seed, alpha: 1.0 }, s).unwrap();
            let x = StateVector::standard_normal(s, &mut r);
            assert!(factorization_check(&nu, 0.7, &x).unwrap().residual < 1e-12);
        }
    }

    #[test]
    fn moment_examples() {
        let s = Shape::new(2, 1).unwrap();
        let y = StateVector::from_values(s, vec![0.3, -0.4]).unwrap();
        let point = MarginalTable::new(s, vec![0.0, 1.0], 1.0).unwrap();
        let c = moment_check(&point, &y, 1.0, 0.5).unwrap();
        assert!(c.mean_residual < 1e-15 && c.cov_residual < 1e-15);
        assert!(c.surplus[0].iter().all(|x| x.abs() < 1e-15));

        let uniform = MarginalTable::new(s, vec![0.5, 0.5], 1.0).unwrap();
        let c = moment_check(&uniform, &y, 1.0, 0.5).unwrap();
        let a = BridgeCoeffs::new(0.5, 1.0).unwrap().clean;
        let expect = [0.25, -0.25, -0.25, 0.25].map(|x| x * a * a);
        for (got, want) in c.surplus[0].iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(c.cov_residual < 1e-12);
    }
}
