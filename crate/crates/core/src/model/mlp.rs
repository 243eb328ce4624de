//! One-hidden-layer tanh network trained with the per-position cross-entropy objective.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MarginalPredictor;
use crate::discrete::{JointDist, Shape, StateVector, TokenSequence};
use crate::error::{Error, Result};
use crate::oracle::MarginalTable;
use crate::rng;
use crate::schedule::{ou_coeffs, DEFAULT_HORIZON};
use crate::stats::softmax_in_place;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub u_min: f64,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 64, lr: 0.05, hidden: 64, u_min: 0.01, horizon: DEFAULT_HORIZON, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.hidden == 0 {
            return Err(Error::domain("batch and hidden width must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.u_min > 0.0 && self.u_min < self.horizon && self.horizon.is_finite()) {
            return Err(Error::domain(format!(
                "need 0 < u_min < horizon, got u_min = {}, horizon = {}",
                self.u_min, self.horizon
            )));
        }
        Ok(())
    }
}

/// Where clean training sequences come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainSource<'a> {
    Joint(&'a JointDist),
    Corpus(&'a [TokenSequence]),
}

impl TrainSource<'_> {
    fn shape(&self) -> Result<Shape> {
        match self {
            TrainSource::Joint(nu) => Ok(nu.shape()),
            TrainSource::Corpus(seqs) => {
                let first = seqs.first().ok_or_else(|| Error::domain("training corpus is empty"))?;
                let shape = first.shape();
                if seqs.iter().any(|s| s.shape() != shape) {
                    return Err(Error::shape("training corpus mixes sequence shapes"));
                }
                Ok(shape)
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        match self {
            TrainSource::Joint(nu) => nu.sample(rng),
            TrainSource::Corpus(seqs) => seqs[rng.random_range(0..seqs.len())].clone(),
        }
    }
}

/// Batch-mean loss per SGD step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first (`tail = false`) or last (`tail = true`) `frac` of steps.
    pub fn window_mean(&self, frac: f64, tail: bool) -> Option<f64> {
        let n = self.losses.len();
        let w = ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1));
        if n == 0 {
            return None;
        }
        let slice = if tail { &self.losses[n - w..] } else { &self.losses[..w] };
        Some(slice.iter().sum::<f64>() / w as f64)
    }
}

/// `softmax_rows(W2 tanh(W1 [x, c_u, σ_u] + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPredictor {
    shape: Shape,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelFileConfig {
    #[serde(rename = "V")]
    vocab: usize,
    #[serde(rename = "L")]
    len: usize,
    #[serde(flatten)]
    train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    config: ModelFileConfig,
}

impl MlpPredictor {
    /// Weights uniform in `±1/√fan_in`, drawn from the `init` stream of `cfg.seed`.
    pub fn init(shape: Shape, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (shape.dim(), cfg.hidden);
        let n_in = d + 2;
        let mut r = rng::stream(cfg.seed, "init", 0);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| r.random_range(-s..=s)).collect()
        };
        let w1 = uniform(h * n_in, n_in);
        let b1 = uniform(h, n_in);
        let w2 = uniform(d * h, h);
        let b2 = uniform(d, h);
        Ok(Self { shape, hidden: h, w1, b1, w2, b2, config: cfg.clone() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn n_in(&self) -> usize {
        self.shape.dim() + 2
    }

    fn input(&self, x: &[f64], u: f64) -> Result<Vec<f64>> {
        let k = ou_coeffs(u)?;
        let mut input = Vec::with_capacity(self.n_in());
        input.extend_from_slice(x);
        input.push(k.c);
        input.push(k.sigma());
        Ok(input)
    }

    /// Returns hidden activations and per-row probabilities.
    fn forward(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n_in = self.n_in();
        let hid: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * n_in..(j + 1) * n_in];
                (self.b1[j] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect();
        let mut out: Vec<f64> = (0..self.shape.dim())
            .map(|i| {
                let row = &self.w2[i * self.hidden..(i + 1) * self.hidden];
                self.b2[i] + row.iter().zip(&hid).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        for row in out.chunks_exact_mut(self.shape.vocab) {
            softmax_in_place(row);
        }
        (hid, out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            widths: vec![self.n_in(), self.hidden, self.shape.dim()],
            weights: vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()],
            config: ModelFileConfig { vocab: self.shape.vocab, len: self.shape.len, train: self.config.clone() },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let shape = Shape::new(file.config.vocab, file.config.len)?;
        let d = shape.dim();
        let [n_in, h, n_out] = file.widths[..] else {
            return Err(Error::shape(format!("expected 3 layer widths, got {}", file.widths.len())));
        };
        if n_in != d + 2 || n_out != d || h == 0 {
            return Err(Error::shape(format!("widths {:?} do not fit V = {}, L = {}", file.widths, shape.vocab, shape.len)));
        }
        let expected = [h * n_in, h, d * h, d];
        let lens: Vec<usize> = file.weights.iter().map(Vec::len).collect();
        if lens != expected {
            return Err(Error::shape(format!("weight array lengths {lens:?}, expected {expected:?}")));
        }
        if file.weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Serde("non-finite weight".into()));
        }
        let mut it = file.weights.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            shape,
            hidden: h,
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            config: ModelFileConfig { ..file.config }.train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Serde(e.to_string()))?;
        Self::from_json(&text)
    }
}

impl MarginalPredictor for MlpPredictor {
    fn shape(&self) -> Shape {
        self.shape
    }

    fn predict(&self, x: &StateVector, u: f64) -> Result<MarginalTable> {
        if x.shape() != self.shape {
            return Err(Error::shape(format!("state {:?} vs predictor {:?}", x.shape(), self.shape)));
        }
        let (_, probs) = self.forward(&self.input(x.values(), u)?);
        Ok(MarginalTable::from_parts_unchecked(self.shape, probs, u))
    }
}

/// Plain SGD on `-Σ_ℓ log p_ℓ(w_ℓ)` with `w` from the source, `u ~ U[u_min, T]`,
/// input `c_u e(w) + σ_u z`.
pub fn train_predictor(source: TrainSource<'_>, cfg: &TrainConfig) -> Result<(MlpPredictor, TrainReport)> {
    let shape = source.shape()?;
    let mut net = MlpPredictor::init(shape, cfg)?;
    let (d, h, n_in, v) = (shape.dim(), net.hidden, net.n_in(), shape.vocab);
    let mut r = rng::stream(cfg.seed, "train", 0);
    let mut gw1 = vec![0.0; h * n_in];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; d * h];
    let mut gb2 = vec![0.0; d];
    let mut dh = vec![0.0; h];
    let mut x = vec![0.0; d];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        gw1.fill(0.0);
        gb1.fill(0.0);
        gw2.fill(0.0);
        gb2.fill(0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let w = source.draw(&mut r);
            let u = r.random_range(cfg.u_min..=cfg.horizon);
            let k = ou_coeffs(u)?;
            let sigma = k.sigma();
            for (i, xi) in x.iter_mut().enumerate() {
                let hot = if w.tokens()[i / v] == i % v { k.c } else { 0.0 };
                let z: f64 = r.sample(StandardNormal);
                *xi = hot + sigma * z;
            }
            let input = net.input(&x, u)?;
            let (hid, mut p) = net.forward(&input);
            for (pos, &tok) in w.tokens().iter().enumerate() {
                loss -= p[pos * v + tok].ln();
                p[pos * v + tok] -= 1.0;
            }
            // p now holds dloss/dlogits.
            dh.fill(0.0);
            for (i, &g) in p.iter().enumerate() {
                gb2[i] += g;
                let row = &net.w2[i * h..(i + 1) * h];
                let grow = &mut gw2[i * h..(i + 1) * h];
                for j in 0..h {
                    grow[j] += g * hid[j];
                    dh[j] += g * row[j];
                }
            }
            for j in 0..h {
                let g = dh[j] * (1.0 - hid[j] * hid[j]);
                gb1[j] += g;
                let grow = &mut gw1[j * n_in..(j + 1) * n_in];
                for (gw, xi) in grow.iter_mut().zip(&input) {
                    *gw += g * xi;
                }
            }
        }
        let loss = loss / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        let scale = cfg.lr / cfg.batch as f64;
        for (p, g) in [(&mut net.w1, &gw1), (&mut net.b1, &gb1), (&mut net.w2, &gw2), (&mut net.b2, &gb2)] {
            for (w, dw) in p.iter_mut().zip(g.iter()) {
                *w -= scale * dw;
            }
        }
    }
    Ok((net, TrainReport { losses }))
}
