//! Closed-form Ornstein–Uhlenbeck kernels.
//!
//! Forward process `dX = -X dt + √2 dB`, so `X_t | X_0 ~ N(c_t X_0, σ_t² I)` with
//! `c_t = e^{-t}` and `σ_t² = 1 - e^{-2t}`. The pinned bridge between a clean
//! endpoint at level 0 and a noisy state at level `t` is Gaussian with
//! sinh-ratio coefficients; every ratio here is evaluated through
//! `1 - e^{-2x} = -expm1(-2x)`, which keeps full relative precision at tiny
//! arguments (the last reverse step has `u_{k+1} = 0`) and never overflows.

use serde::{Deserialize, Serialize};

use crate::discrete::StateVector;
use crate::error::{Error, Result};

/// Default reverse-time horizon `T`; `c_T ≈ 2.5e-3`.
pub const DEFAULT_HORIZON: f64 = 6.0;

fn check_time(name: &str, t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::domain(format!("{name} must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// `1 - e^{-2x}`.
#[inline]
pub fn one_minus_exp_neg2(x: f64) -> f64 {
    -(-2.0 * x).exp_m1()
}

/// `sinh(num) / sinh(den)` for `num >= 0`, `den > 0`.
#[inline]
pub fn sinh_ratio(num: f64, den: f64) -> f64 {
    (num - den).exp() * one_minus_exp_neg2(num) / one_minus_exp_neg2(den)
}

/// `1 / sinh(x)` for `x > 0`.
#[inline]
pub fn csch(x: f64) -> f64 {
    2.0 * (-x).exp() / one_minus_exp_neg2(x)
}

/// `cosh(x) / sinh(x)` for `x > 0`.
#[inline]
pub fn coth(x: f64) -> f64 {
    let om = one_minus_exp_neg2(x);
    (2.0 - om) / om
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuCoeffs {
    pub c: f64,
    pub sigma2: f64,
}

impl OuCoeffs {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

pub fn ou_coeffs(t: f64) -> Result<OuCoeffs> {
    check_time("t", t)?;
    Ok(OuCoeffs {
        c: (-t).exp(),
        sigma2: one_minus_exp_neg2(t),
    })
}

/// The weight `c_u² / σ_u⁴ = 1 / (4 sinh² u)` multiplying denoising errors in
/// the path-space KL integrand. Every caller goes through this one function.
pub fn girsanov_weight(u: f64) -> Result<f64> {
    if !(u > 0.0) || !u.is_finite() {
        return Err(Error::domain(format!("girsanov weight needs u > 0, got {u}")));
    }
    let OuCoeffs { c, sigma2 } = ou_coeffs(u)?;
    Ok(c * c / (sigma2 * sigma2))
}

/// Draws `c_t x0 + σ_t ξ`.
pub fn forward_sample<R: rand::Rng + ?Sized>(x0: &StateVector, t: f64, rng: &mut R) -> Result<StateVector> {
    let OuCoeffs { c, sigma2 } = ou_coeffs(t)?;
    if sigma2 == 0.0 {
        return Ok(x0.clone());
    }
    let sigma = sigma2.sqrt();
    let mut out = x0.clone();
    for v in out.values_mut() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *v = c * *v + sigma * z;
    }
    Ok(out)
}

/// Score of the noisy marginal from a posterior mean: `(c_t m - x) / σ_t²`.
pub fn tweedie_score(x: &StateVector, t: f64, mean: &StateVector) -> Result<StateVector> {
    let OuCoeffs { c, sigma2 } = ou_coeffs(t)?;
    if sigma2 == 0.0 {
        return Err(Error::domain("tweedie score undefined at t = 0"));
    }
    x.check_same_shape(mean)?;
    Ok(x.zip_map(mean, |xi, mi| (c * mi - xi) / sigma2))
}

/// Coefficients of the bridge `X_s | X_0 = x0, X_t = x_t`:
/// mean `clean · x0 + noisy · x_t`, isotropic variance `var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoeffs {
    pub clean: f64,
    pub noisy: f64,
    pub var: f64,
}

impl BridgeCoeffs {
    pub fn new(s: f64, t: f64) -> Result<Self> {
        check_time("s", s)?;
        check_time("t", t)?;
        if !(t > 0.0) {
            return Err(Error::domain("bridge needs t > 0"));
        }
        if s > t {
            return Err(Error::domain(format!("bridge needs 0 <= s <= t, got s = {s}, t = {t}")));
        }
        let d = t - s;
        Ok(Self {
            clean: sinh_ratio(d, t),
            noisy: sinh_ratio(s, t),
            var: one_minus_exp_neg2(s) * one_minus_exp_neg2(d) / one_minus_exp_neg2(t),
        })
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeParams {
    pub mean: StateVector,
    pub var: f64,
}

pub fn bridge_params(s: f64, t: f64, x_t: &StateVector, x0: &StateVector) -> Result<BridgeParams> {
    let k = BridgeCoeffs::new(s, t)?;
    x0.check_same_shape(x_t)?;
    Ok(BridgeParams {
        mean: x0.zip_map(x_t, |a, b| k.clean * a + k.noisy * b),
        var: k.var,
    })
}

/// Drift of the OU bridge pinned to `x_t` at time `t`, evaluated at `(s, x_s)`:
/// `(x_t - x_s cosh(t-s)) / sinh(t-s)`.
pub fn bridge_drift(s: f64, t: f64, x_s: &StateVector, x_t: &StateVector) -> Result<StateVector> {
    check_time("s", s)?;
    check_time("t", t)?;
    if !(s < t) {
        return Err(Error::domain(format!("bridge drift needs s < t, got s = {s}, t = {t}")));
    }
    x_s.check_same_shape(x_t)?;
    let d = t - s;
    let (a, b) = (csch(d), coth(d));
    Ok(x_t.zip_map(x_s, |xt, xs| a * xt - b * xs))
}

/// Reverse-time drift of the frozen conditional-mean bridge at reverse time `t`.
pub fn frozen_mean_drift(t: f64, y: &StateVector, frozen: &StateVector, horizon: f64) -> Result<StateVector> {
    check_time("t", t)?;
    if !(t < horizon) {
        return Err(Error::domain(format!("frozen drift needs t < T, got t = {t}, T = {horizon}")));
    }
    y.check_same_shape(frozen)?;
    let u = horizon - t;
    let (a, b) = (csch(u), coth(u));
    Ok(frozen.zip_map(y, |m, yi| a * m - b * yi))
}

/// A point on the flow-matching time axis and the scale relating the two state
/// conventions: an OU state `y` at level `u` is the flow-matching state `y / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmTime {
    pub t: f64,
    pub scale: f64,
}

pub fn fm_time_map(u: f64) -> Result<FmTime> {
    if !(u > 0.0) || u.is_nan() {
        return Err(Error::domain(format!("fm_time_map needs u > 0, got {u}")));
    }
    if u.is_infinite() {
        return Ok(FmTime { t: 0.0, scale: 1.0 });
    }
    let k = ou_coeffs(u)?;
    let scale = k.c + k.sigma();
    Ok(FmTime { t: k.c / scale, scale })
}

/// Inverse of [`fm_time_map`]: the OU level for a flow-matching time in `(0, 1]`.
/// `t = 0` maps to `+∞`.
pub fn fm_level(t_fm: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t_fm) {
        return Err(Error::domain(format!("flow-matching time must lie in [0, 1], got {t_fm}")));
    }
    if t_fm == 0.0 {
        return Ok(f64::INFINITY);
    }
    let r = (1.0 - t_fm) / t_fm;
    Ok(0.5 * (r * r).ln_1p())
}

/// Forward noise levels `u_0 > u_1 > … > u_K` visited by a reverse sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseGrid {
    levels: Vec<f64>,
}

impl NoiseGrid {
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::domain("a noise grid needs at least two levels"));
        }
        if levels.iter().any(|u| !u.is_finite() || *u < 0.0) {
            return Err(Error::domain("noise levels must be finite and >= 0"));
        }
        if levels.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::domain("noise levels must be strictly decreasing"));
        }
        Ok(Self { levels })
    }

    /// Uniform in reverse time: `u_k = T (1 - k/K)`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) {
            return Err(Error::domain("uniform grid needs steps >= 1 and T > 0"));
        }
        let k = steps as f64;
        let mut levels: Vec<f64> = (0..steps).map(|i| horizon * (1.0 - i as f64 / k)).collect();
        levels.push(0.0);
        Self::from_levels(levels)
    }

    /// Geometric spacing from `T` down to `u_min`, followed by a terminal 0.
    pub fn geometric(horizon: f64, steps: usize, u_min: f64) -> Result<Self> {
        if steps < 2 || !(u_min > 0.0) || !(u_min < horizon) {
            return Err(Error::domain("geometric grid needs steps >= 2 and 0 < u_min < T"));
        }
        let ratio = u_min / horizon;
        let mut levels: Vec<f64> = (0..steps)
            .map(|i| horizon * ratio.powf(i as f64 / (steps - 1) as f64))
            .collect();
        levels.push(0.0);
        Self::from_levels(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn horizon(&self) -> f64 {
        self.levels[0]
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn terminal(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    /// Consecutive `(u_k, u_{k+1})` pairs.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.levels.windows(2).map(|w| (w[0], w[1]))
    }

    /// Reverse time `t_k = T - u_k`.
    pub fn reverse_time(&self, k: usize) -> f64 {
        self.horizon() - self.levels[k]
    }
}

impl TryFrom<Vec<f64>> for NoiseGrid {
    type Error = Error;
    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::from_levels(levels)
    }
}

impl From<NoiseGrid> for Vec<f64> {
    fn from(g: NoiseGrid) -> Self {
        g.levels
    }
}
