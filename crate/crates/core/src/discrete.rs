//! Vocabulary, one-hot states and explicit joint distributions over `V^L`.
//!
//! Sequences are indexed big-endian: `index = Σ_ℓ w_ℓ · V^{L-1-ℓ}`, so the
//! first position is the most significant digit.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Default upper bound on `V^L` for anything that enumerates the sequence space.
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

/// Tolerance for the sum-to-one check on joint tables.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Vocabulary size `V` and sequence length `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub vocab: usize,
    pub len: usize,
}

impl Shape {
    pub fn new(vocab: usize, len: usize) -> Result<Self> {
        if vocab == 0 || len == 0 {
            return Err(Error::domain("vocabulary size and sequence length must be positive"));
        }
        Ok(Self { vocab, len })
    }

    /// Dimension `D = L · V` of the continuous state.
    pub fn dim(&self) -> usize {
        self.vocab * self.len
    }

    /// `V^L`, or `None` on overflow.
    pub fn num_sequences(&self) -> Option<usize> {
        (0..self.len).try_fold(1usize, |acc, _| acc.checked_mul(self.vocab))
    }

    pub fn check_cap(&self, cap: usize) -> Result<usize> {
        match self.num_sequences() {
            Some(n) if n <= cap => Ok(n),
            n => Err(Error::EnumerationLimit {
                size: n.map(|n| n as u128).unwrap_or_else(|| (self.vocab as u128).saturating_pow(self.len as u32)),
                cap,
            }),
        }
    }

    /// Token at `pos` of the sequence with big-endian index `index`.
    #[inline]
    pub fn digit(&self, index: usize, pos: usize) -> usize {
        let shift = self.vocab.pow((self.len - 1 - pos) as u32);
        (index / shift) % self.vocab
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    vocab: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() || vocab == 0 {
            return Err(Error::domain("a sequence needs at least one token and a nonempty vocabulary"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::domain(format!("token id {bad} out of range for V = {vocab}")));
        }
        Ok(Self { tokens, vocab })
    }

    pub fn from_index(shape: Shape, index: usize) -> Result<Self> {
        let n = shape.num_sequences().ok_or_else(|| Error::domain("V^L overflows"))?;
        if index >= n {
            return Err(Error::domain(format!("index {index} out of range for {n} sequences")));
        }
        Ok(Self {
            tokens: (0..shape.len).map(|p| shape.digit(index, p)).collect(),
            vocab: shape.vocab,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn shape(&self) -> Shape {
        Shape { vocab: self.vocab, len: self.tokens.len() }
    }

    /// Big-endian index into a `V^L` table.
    pub fn index(&self) -> usize {
        self.tokens.iter().fold(0, |acc, &t| acc * self.vocab + t)
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// A point in `R^{L·V}`; block `ℓ` occupies `[ℓV, (ℓ+1)V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    shape: Shape,
    values: Vec<f64>,
}

impl StateVector {
    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.dim() {
            return Err(Error::shape(format!("expected {} values, got {}", shape.dim(), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("state entries must be finite"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, values: vec![0.0; shape.dim()] }
    }

    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        Self {
            shape,
            values: (0..shape.dim()).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, pos: usize) -> &[f64] {
        let v = self.shape.vocab;
        &self.values[pos * v..(pos + 1) * v]
    }

    pub fn blocks(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.shape.vocab)
    }

    pub fn check_same_shape(&self, other: &StateVector) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub(crate) fn zip_map(&self, other: &StateVector, f: impl Fn(f64, f64) -> f64) -> StateVector {
        StateVector {
            shape: self.shape,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn squared_distance(&self, other: &StateVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// True when every block is a standard basis vector.
    pub fn is_one_hot(&self) -> bool {
        self.blocks().all(|b| {
            b.iter().filter(|&&x| x == 1.0).count() == 1 && b.iter().all(|&x| x == 0.0 || x == 1.0)
        })
    }
}

/// One-hot embedding of a sequence.
pub fn encode(seq: &TokenSequence) -> StateVector {
    let shape = seq.shape();
    let mut values = vec![0.0; shape.dim()];
    for (pos, &tok) in seq.tokens.iter().enumerate() {
        values[pos * shape.vocab + tok] = 1.0;
    }
    StateVector { shape, values }
}

/// Per-block argmax; ties go to the lowest index.
pub fn decode_argmax(x: &StateVector) -> TokenSequence {
    let tokens = x
        .blocks()
        .map(|b| {
            b.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    TokenSequence { tokens, vocab: x.shape.vocab }
}

/// All `V^L` sequences in big-endian index order.
pub fn enumerate_sequences(shape: Shape, cap: usize) -> Result<Vec<TokenSequence>> {
    let n = shape.check_cap(cap)?;
    (0..n).map(|i| TokenSequence::from_index(shape, i)).collect()
}

/// An explicit probability table over `V^L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointDistFile", into = "JointDistFile")]
pub struct JointDist {
    shape: Shape,
    probs: Vec<f64>,
}

/// On-disk layout: `{"V": int, "L": int, "probs": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointDistFile {
    #[serde(rename = "V")]
    vocab: usize,
    #[serde(rename = "L")]
    len: usize,
    probs: Vec<f64>,
}

impl TryFrom<JointDistFile> for JointDist {
    type Error = Error;
    fn try_from(f: JointDistFile) -> Result<Self> {
        JointDist::new(Shape::new(f.vocab, f.len)?, f.probs)
    }
}

impl From<JointDist> for JointDistFile {
    fn from(d: JointDist) -> Self {
        JointDistFile { vocab: d.shape.vocab, len: d.shape.len, probs: d.probs }
    }
}

impl JointDist {
    pub fn new(shape: Shape, probs: Vec<f64>) -> Result<Self> {
        Self::with_cap(shape, probs, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap(shape: Shape, probs: Vec<f64>, cap: usize) -> Result<Self> {
        let n = shape.check_cap(cap)?;
        if probs.len() != n {
            return Err(Error::InvalidDistribution(format!("expected {n} entries, got {}", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("entries must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}, not 1")));
        }
        Ok(Self { shape, probs })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, seq: &TokenSequence) -> f64 {
        self.probs[seq.index()]
    }

    /// Per-position marginal distributions, an `L × V` row-major table.
    pub fn position_marginals(&self) -> Vec<f64> {
        let s = self.shape;
        let mut out = vec![0.0; s.dim()];
        for (i, &p) in self.probs.iter().enumerate() {
            for pos in 0..s.len {
                out[pos * s.vocab + s.digit(i, pos)] += p;
            }
        }
        out
    }

    /// Inverse-CDF draw of a sequence index.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng.random())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        TokenSequence::from_index(self.shape, self.sample_index(rng)).expect("index in range")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Serde(format!("{}: {e}", path.as_ref().display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Inverse-CDF categorical draw over `probs` (in index order) with uniform `r ∈ [0, 1)`.
/// Falls back to the last positive entry when rounding leaves `r` beyond the total.
pub fn sample_categorical(probs: &[f64], r: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = r * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Test-distribution factory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JointKind {
    Uniform,
    /// Outer product of per-position marginals (one row of length `V` per position).
    Product { marginals: Vec<Vec<f64>> },
    /// Uniform over the `V` constant sequences `(w, w, …, w)`.
    Copy,
    /// One symmetric Dirichlet draw over all `V^L` entries.
    Dirichlet { seed: u64, alpha: f64 },
}

pub fn make_joint(kind: &JointKind, shape: Shape) -> Result<JointDist> {
    let n = shape.check_cap(DEFAULT_ENUMERATION_CAP)?;
    let probs = match kind {
        JointKind::Uniform => vec![1.0 / n as f64; n],
        JointKind::Product { marginals } => {
            if marginals.len() != shape.len || marginals.iter().any(|m| m.len() != shape.vocab) {
                return Err(Error::InvalidDistribution(format!(
                    "product law needs {} rows of length {}",
                    shape.len, shape.vocab
                )));
            }
            for row in marginals {
                let s: f64 = row.iter().sum();
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(Error::InvalidDistribution(format!("marginal {row:?} is not a distribution")));
                }
            }
            (0..n)
                .map(|i| (0..shape.len).map(|p| marginals[p][shape.digit(i, p)]).product())
                .collect()
        }
        JointKind::Copy => {
            let mut probs = vec![0.0; n];
            for w in 0..shape.vocab {
                let idx = (0..shape.len).fold(0, |acc, _| acc * shape.vocab + w);
                probs[idx] = 1.0 / shape.vocab as f64;
            }
            probs
        }
        JointKind::Dirichlet { seed, alpha } => {
            let gamma = Gamma::new(*alpha, 1.0)
                .map_err(|e| Error::InvalidDistribution(format!("dirichlet alpha {alpha}: {e}")))?;
            let mut r = rng::stream(*seed, "dirichlet", 0);
            let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut r)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) {
                return Err(Error::InvalidDistribution("dirichlet draw underflowed to zero".into()));
            }
            draws.into_iter().map(|g| g / total).collect()
        }
    };
    // Renormalize so every constructor meets the 1e-12 sum check.
    let total: f64 = probs.iter().sum();
    JointDist::new(shape, probs.into_iter().map(|p| p / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t: &[usize], v: usize) -> TokenSequence {
        TokenSequence::new(t.to_vec(), v).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(&seq(&[0], 2)).values(), &[1.0, 0.0]);
        assert_eq!(encode(&seq(&[1, 0], 2)).values(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(TokenSequence::new(vec![2], 2).is_err());
        let x = encode(&seq(&[2, 0, 1], 3));
        assert_eq!(x.values().iter().filter(|&&v| v == 1.0).count(), 3);
        assert!(x.is_one_hot());
    }

    #[test]
    fn encode_decode_exhaustive() {
        let all = enumerate_sequences(Shape::new(4, 3).unwrap(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all.len(), 64);
        for s in &all {
            assert_eq!(&decode_argmax(&encode(s)), s);
        }
    }

    #[test]
    fn decode_argmax_ties_and_maxima() {
        let sh = Shape::new(3, 1).unwrap();
        let x = StateVector::from_values(sh, vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(decode_argmax(&x).tokens(), &[1]);
        let sh = Shape::new(2, 1).unwrap();
        let x = StateVector::from_values(sh, vec![0.5, 0.5]).unwrap();
        assert_eq!(decode_argmax(&x).tokens(), &[0]);
    }

    #[test]
    fn enumeration_examples() {
        let s = enumerate_sequences(Shape::new(2, 1).unwrap(), 4096).unwrap();
        assert_eq!(s.iter().map(|x| x.tokens().to_vec()).collect::<Vec<_>>(), vec![vec![0], vec![1]]);
        let s = enumerate_sequences(Shape::new(3, 2).unwrap(), 4096).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s[5].tokens(), &[1, 2]);
        let s = enumerate_sequences(Shape::new(4, 3).unwrap(), 4096).unwrap();
        let unique: std::collections::HashSet<_> = s.iter().collect();
        assert_eq!(unique.len(), 64);
        assert!(matches!(
            enumerate_sequences(Shape::new(4, 7).unwrap(), 4096),
            Err(Error::EnumerationLimit { size: 16384, cap: 4096 })
        ));
        assert!(matches!(
            Shape::new(1000, 40).unwrap().check_cap(4096),
            Err(Error::EnumerationLimit { .. })
        ));
    }

    #[test]
    fn make_joint_examples() {
        let u = make_joint(&JointKind::Uniform, Shape::new(2, 2).unwrap()).unwrap();
        assert_eq!(u.probs(), &[0.25; 4]);
        let c = make_joint(&JointKind::Copy, Shape::new(3, 2).unwrap()).unwrap();
        for (i, &p) in c.probs().iter().enumerate() {
            let expected = if [0, 4, 8].contains(&i) { 1.0 / 3.0 } else { 0.0 };
            assert!((p - expected).abs() < 1e-15);
        }
        let p = make_joint(
            &JointKind::Product { marginals: vec![vec![0.7, 0.3], vec![0.7, 0.3]] },
            Shape::new(2, 2).unwrap(),
        )
        .unwrap();
        assert!((p.prob(&seq(&[0, 1], 2)) - 0.21).abs() < 1e-15);
        assert!(make_joint(
            &JointKind::Product { marginals: vec![vec![0.7, 0.2], vec![0.7, 0.3]] },
            Shape::new(2, 2).unwrap()
        )
        .is_err());
        let d1 = make_joint(&JointKind::Dirichlet { seed: 3, alpha: 1.0 }, Shape::new(3, 2).unwrap()).unwrap();
        let d2 = make_joint(&JointKind::Dirichlet { seed: 3, alpha: 1.0 }, Shape::new(3, 2).unwrap()).unwrap();
        assert_eq!(d1, d2);
        assert!((d1.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(make_joint(&JointKind::Dirichlet { seed: 3, alpha: -1.0 }, Shape::new(3, 2).unwrap()).is_err());
    }

    #[test]
    fn json_format() {
        let u = make_joint(&JointKind::Uniform, Shape::new(2, 2).unwrap()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&u.to_json().unwrap()).unwrap();
        assert_eq!(v["V"], 2);
        assert_eq!(v["L"], 2);
        assert_eq!(v["probs"].as_array().unwrap().len(), 4);
        let back: JointDist = serde_json::from_value(v).unwrap();
        assert_eq!(back, u);
        let bad = r#"{"V": 2, "L": 1, "probs": [0.5, 0.6]}"#;
        assert!(serde_json::from_str::<JointDist>(bad).is_err());
        let short = r#"{"V": 2, "L": 2, "probs": [0.5, 0.5]}"#;
        assert!(serde_json::from_str::<JointDist>(short).is_err());
    }

    #[test]
    fn categorical_inverse_cdf() {
        let p = [0.2, 0.0, 0.5, 0.3];
        assert_eq!(sample_categorical(&p, 0.0), 0);
        assert_eq!(sample_categorical(&p, 0.19), 0);
        assert_eq!(sample_categorical(&p, 0.2), 2);
        assert_eq!(sample_categorical(&p, 0.71), 3);
        assert_eq!(sample_categorical(&p, 0.999_999_999), 3);
        assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], 0.999_999_999_999_9), 1);
    }

    proptest! {
        #[test]
        fn index_round_trip(v in 1usize..6, l in 1usize..5, seed in any::<u64>()) {
            let shape = Shape::new(v, l).unwrap();
            let n = shape.num_sequences().unwrap();
            let i = (seed % n as u64) as usize;
            let s = TokenSequence::from_index(shape, i).unwrap();
            prop_assert_eq!(s.index(), i);
            prop_assert_eq!(decode_argmax(&encode(&s)), s);
        }

        #[test]
        fn constructors_are_distributions(v in 1usize..5, l in 1usize..4, seed in any::<u64>(), alpha in 0.05f64..5.0) {
            let shape = Shape::new(v, l).unwrap();
            for kind in [JointKind::Uniform, JointKind::Copy, JointKind::Dirichlet { seed, alpha }] {
                let d = make_joint(&kind, shape).unwrap();
                prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
            }
        }
    }
}
