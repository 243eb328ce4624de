//! Running mean / standard-error accumulators.

use serde::{Deserialize, Serialize};

/// `log Σ exp(x_i)`; `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities; returns the log normalizer.
pub fn softmax_in_place(logw: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logw);
    for w in logw.iter_mut() {
        *w = if lse.is_finite() { (*w - lse).exp() } else { 0.0 };
    }
    lse
}

/// A point estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(mean: f64, se: f64) -> Self {
        Self { mean, se }
    }

    pub fn scaled(self, k: f64) -> Self {
        Self::new(self.mean * k, self.se * k.abs())
    }

    /// Sum of independent estimates: means add, variances add.
    pub fn sum<I: IntoIterator<Item = Estimate>>(items: I) -> Self {
        let (m, v) = items
            .into_iter()
            .fold((0.0, 0.0), |(m, v), e| (m + e.mean, v + e.se * e.se));
        Self::new(m, v.sqrt())
    }

    pub fn from_values(values: &[f64]) -> Self {
        values.iter().copied().collect::<Welford>().estimate()
    }
}

/// Welford accumulator of `(count, mean, M2)` with pairwise merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Welford) -> Welford {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        Welford {
            count: self.count + other.count,
            mean: self.mean + delta * other.count as f64 / n,
            m2: self.m2 + other.m2 + delta * delta * self.count as f64 * other.count as f64 / n,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        let se = if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        };
        Estimate::new(self.mean, se)
    }
}

impl FromIterator<f64> for Welford {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut w = Welford::default();
        for x in iter {
            w.push(x);
        }
        w
    }
}
