//! Reverse samplers over a shared noise grid: marginal-conditioned bridge (MCB),
//! frozen-mean DDPM bridge, Euler flow ODE and Euler–Maruyama reverse SDE.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discrete::{decode_argmax, encode, sample_categorical, StateVector, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{decode_controls, MarginalPredictor};
use crate::oracle::MarginalTable;
use crate::rng::{self, map_indexed, Execution};
use crate::schedule::{fm_level, fm_time_map, tweedie_score, BridgeCoeffs, FmTime, NoiseGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mcb,
    Ddpm,
    Ode,
    Sde,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mcb, Method::Ddpm, Method::Ode, Method::Sde];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mcb => "mcb",
            Method::Ddpm => "ddpm",
            Method::Ode => "ode",
            Method::Sde => "sde",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown sampler method {s:?}")))
    }
}

/// The SDE stops at `u_min`, where the score is still bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeOptions {
    pub u_min: f64,
    /// Finish with one exact bridge to an endpoint drawn from the predicted marginals
    /// instead of argmax-decoding the state at `u_min`.
    pub final_bridge: bool,
}

impl Default for SdeOptions {
    fn default() -> Self {
        Self { u_min: 0.01, final_bridge: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub grid: NoiseGrid,
    pub method: Method,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub trace: bool,
    pub sde: SdeOptions,
    pub execution: Execution,
}

impl SamplerConfig {
    pub fn new(method: Method, grid: NoiseGrid, seed: u64) -> Self {
        Self {
            grid,
            method,
            temperature: 1.0,
            top_p: 1.0,
            seed,
            trace: false,
            sde: SdeOptions::default(),
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::domain(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        match self.method {
            Method::Sde => {
                if !(self.sde.u_min > 0.0 && self.sde.u_min < self.grid.horizon()) {
                    return Err(Error::domain("sde u_min must lie in (0, T)"));
                }
            }
            _ if self.grid.terminal() != 0.0 => {
                return Err(Error::domain(format!("{} needs a grid ending at 0", self.method)));
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_levels(u_k: f64, u_next: f64) -> Result<BridgeCoeffs> {
    if !(u_k > 0.0 && u_k.is_finite() && u_next >= 0.0 && u_next < u_k) {
        return Err(Error::domain(format!("reverse step needs 0 <= u_next < u_k, got {u_next}, {u_k}")));
    }
    BridgeCoeffs::new(u_next, u_k)
}

/// `clean · x0 + noisy · y + std · ξ`; exactly `x0` when the bridge is pinned.
fn bridge_to<R: Rng + ?Sized>(y: &StateVector, x0: &[f64], k: BridgeCoeffs, u_next: f64, rng: &mut R) -> StateVector {
    let mut out = y.clone();
    if u_next == 0.0 {
        out.values_mut().copy_from_slice(x0);
        return out;
    }
    let std = k.std();
    for (o, &e) in out.values_mut().iter_mut().zip(x0) {
        let xi: f64 = rng.sample(StandardNormal);
        *o = k.clean * e + k.noisy * *o + std * xi;
    }
    out
}

/// Draws one token per position by inverse CDF over the row.
pub fn sample_endpoint<R: Rng + ?Sized>(m: &MarginalTable, rng: &mut R) -> TokenSequence {
    let tokens = m.rows().map(|row| sample_categorical(row, rng.random())).collect();
    TokenSequence::new(tokens, m.shape().vocab).expect("categorical index < V")
}

/// One MCB step from already decoded marginals.
pub fn mcb_step_with<R: Rng + ?Sized>(
    y: &StateVector,
    u_k: f64,
    u_next: f64,
    m: &MarginalTable,
    rng: &mut R,
) -> Result<(StateVector, TokenSequence)> {
    let k = check_levels(u_k, u_next)?;
    if m.shape() != y.shape() {
        return Err(Error::shape("marginals and state differ in shape"));
    }
    let w = sample_endpoint(m, rng);
    let y_next = bridge_to(y, encode(&w).values(), k, u_next, rng);
    Ok((y_next, w))
}

/// Samples `w` from the decoded factorized marginals at `(y, u_k)`, then bridges to `e(w)`.
pub fn mcb_step<P: MarginalPredictor + ?Sized, R: Rng + ?Sized>(
    y: &StateVector,
    u_k: f64,
    u_next: f64,
    pred: &P,
    tau: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<(StateVector, TokenSequence)> {
    check_levels(u_k, u_next)?;
    let m = decode_controls(&pred.predict(y, u_k)?, tau, top_p)?;
    mcb_step_with(y, u_k, u_next, &m, rng)
}

/// One DDPM step from given marginals: bridge to their mean endpoint.
pub fn ddpm_step_with<R: Rng + ?Sized>(
    y: &StateVector,
    u_k: f64,
    u_next: f64,
    m: &MarginalTable,
    rng: &mut R,
) -> Result<StateVector> {
    let k = check_levels(u_k, u_next)?;
    if m.shape() != y.shape() {
        return Err(Error::shape("marginals and state differ in shape"));
    }
    Ok(bridge_to(y, m.probs(), k, u_next, rng))
}

pub fn ddpm_step<P: MarginalPredictor + ?Sized, R: Rng + ?Sized>(
    y: &StateVector,
    u_k: f64,
    u_next: f64,
    pred: &P,
    rng: &mut R,
) -> Result<StateVector> {
    check_levels(u_k, u_next)?;
    let m = pred.predict(y, u_k)?;
    ddpm_step_with(y, u_k, u_next, &m, rng)
}

/// Euler step of the flow ODE in flow-matching coordinates. The predictor is queried
/// at `scale · y_fm` and OU level `min(u(t_k), horizon)`.
pub fn ode_step<P: MarginalPredictor + ?Sized>(
    y_fm: &StateVector,
    t_k: f64,
    t_next: f64,
    pred: &P,
    horizon: f64,
) -> Result<StateVector> {
    if !(0.0 <= t_k && t_k < t_next && t_next <= 1.0) {
        return Err(Error::domain(format!("ode step needs 0 <= t_k < t_next <= 1, got {t_k}, {t_next}")));
    }
    let u = fm_level(t_k)?.min(horizon);
    let delta = pred.predict(&scaled(y_fm, fm_time_map(u)?.scale), u)?;
    Ok(ode_update(y_fm, t_k, t_next, delta.probs()))
}

fn scaled(x: &StateVector, k: f64) -> StateVector {
    let mut out = x.clone();
    out.values_mut().iter_mut().for_each(|v| *v *= k);
    out
}

fn ode_update(y_fm: &StateVector, t_k: f64, t_next: f64, delta: &[f64]) -> StateVector {
    let keep = (1.0 - t_next) / (1.0 - t_k);
    let pull = (t_next - t_k) / (1.0 - t_k);
    let mut out = y_fm.clone();
    for (o, &d) in out.values_mut().iter_mut().zip(delta) {
        *o = keep * *o + pull * d;
    }
    out
}

/// Euler–Maruyama step of the reverse SDE from reverse time `t` to `t + h`.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<P: MarginalPredictor + ?Sized, R: Rng + ?Sized>(
    y: &StateVector,
    t: f64,
    h: f64,
    pred: &P,
    horizon: f64,
    u_min: f64,
    rng: &mut R,
) -> Result<StateVector> {
    if !(t >= 0.0 && h >= 0.0 && t + h <= horizon - u_min + 1e-12) {
        return Err(Error::domain(format!(
            "sde step [{t}, {}] crosses below u_min = {u_min} (T = {horizon})",
            t + h
        )));
    }
    let u = horizon - t;
    let mean = pred.predict(y, u)?.mean_endpoint();
    let score = tweedie_score(y, u, &mean)?;
    Ok(sde_update(y, h, score.values(), rng))
}

fn sde_update<R: Rng + ?Sized>(y: &StateVector, h: f64, score: &[f64], rng: &mut R) -> StateVector {
    let noise = (2.0 * h).sqrt();
    let mut out = y.clone();
    for (o, &s) in out.values_mut().iter_mut().zip(score) {
        let xi: f64 = rng.sample(StandardNormal);
        *o += h * (*o + 2.0 * s) + noise * xi;
    }
    out
}

/// One reverse step as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub u_from: f64,
    pub u_to: f64,
    /// OU-convention state after the step.
    pub state: Vec<f64>,
    /// Sampled endpoint (MCB and the SDE's final bridge only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub endpoint: Option<Vec<usize>>,
    /// Mean per-position entropy (nats) of the marginals the step used.
    pub marginal_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChainTrace {
    pub records: Vec<StepRecord>,
}

impl ChainTrace {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Terminal state in the OU convention.
    pub state: StateVector,
    pub tokens: TokenSequence,
    pub trace: Option<ChainTrace>,
}

fn at_step<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Step { step, source: Box::new(e) })
}

/// Starts at `N(0, I)` and applies the configured step over the grid.
pub fn run_chain<P: MarginalPredictor + ?Sized, R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    pred: &P,
    rng: &mut R,
) -> Result<ChainOutput> {
    cfg.validate()?;
    let shape = pred.shape();
    let mut y = StateVector::standard_normal(shape, rng);
    let mut trace = cfg.trace.then(ChainTrace::default);
    let mut record = |step: usize, u_from: f64, u_to: f64, state: &StateVector, endpoint: Option<&TokenSequence>, m: &MarginalTable| {
        if let Some(t) = trace.as_mut() {
            t.records.push(StepRecord {
                step,
                u_from,
                u_to,
                state: state.values().to_vec(),
                endpoint: endpoint.map(|w| w.tokens().to_vec()),
                marginal_entropy: m.mean_row_entropy(),
            });
        }
    };
    let horizon = cfg.grid.horizon();
    let tokens = match cfg.method {
        Method::Mcb => {
            let mut last = None;
            for (k, (u_k, u_next)) in cfg.grid.intervals().enumerate() {
                let m = at_step(k, pred.predict(&y, u_k).and_then(|m| decode_controls(&m, cfg.temperature, cfg.top_p)))?;
                let (y_next, w) = at_step(k, mcb_step_with(&y, u_k, u_next, &m, rng))?;
                y = y_next;
                record(k, u_k, u_next, &y, Some(&w), &m);
                last = Some(w);
            }
            match last {
                Some(w) if cfg.grid.terminal() == 0.0 => w,
                _ => decode_argmax(&y),
            }
        }
        Method::Ddpm => {
            for (k, (u_k, u_next)) in cfg.grid.intervals().enumerate() {
                let m = at_step(k, pred.predict(&y, u_k))?;
                y = at_step(k, ddpm_step_with(&y, u_k, u_next, &m, rng))?;
                record(k, u_k, u_next, &y, None, &m);
            }
            decode_argmax(&y)
        }
        Method::Ode => {
            let mut y_fm = scaled(&y, 1.0 / fm_time_map(horizon)?.scale);
            for (k, (u_k, u_next)) in cfg.grid.intervals().enumerate() {
                let from = fm_time_map(u_k)?;
                let to = if u_next == 0.0 { FmTime { t: 1.0, scale: 1.0 } } else { fm_time_map(u_next)? };
                let m = at_step(k, pred.predict(&scaled(&y_fm, from.scale), u_k))?;
                y_fm = ode_update(&y_fm, from.t, to.t, m.probs());
                y = scaled(&y_fm, to.scale);
                record(k, u_k, u_next, &y, None, &m);
            }
            decode_argmax(&y)
        }
        Method::Sde => {
            let u_min = cfg.sde.u_min;
            let mut levels: Vec<f64> = Vec::with_capacity(cfg.grid.levels().len());
            for &u in cfg.grid.levels() {
                let u = u.max(u_min);
                if levels.last() != Some(&u) {
                    levels.push(u);
                }
            }
            let mut k = 0;
            for pair in levels.windows(2) {
                let (u_k, u_next) = (pair[0], pair[1]);
                let m = at_step(k, pred.predict(&y, u_k))?;
                let score = at_step(k, tweedie_score(&y, u_k, &m.mean_endpoint()))?;
                y = sde_update(&y, u_k - u_next, score.values(), rng);
                record(k, u_k, u_next, &y, None, &m);
                k += 1;
            }
            if cfg.sde.final_bridge {
                let m = at_step(k, pred.predict(&y, u_min))?;
                let w = sample_endpoint(&m, rng);
                y = encode(&w);
                record(k, u_min, 0.0, &y, Some(&w), &m);
                w
            } else {
                decode_argmax(&y)
            }
        }
    };
    Ok(ChainOutput { state: y, tokens, trace })
}

/// Chain `i` runs on the stream `(seed, "chain", i)`, so outputs do not depend on `n`
/// or on scheduling.
pub fn batch_run<P: MarginalPredictor + ?Sized>(cfg: &SamplerConfig, pred: &P, n: usize) -> Result<Vec<ChainOutput>> {
    cfg.validate()?;
    map_indexed(cfg.execution, n, |i| run_chain(cfg, pred, &mut rng::stream(cfg.seed, "chain", i as u64)))
        .into_iter()
        .collect()
}

pub fn batch_sample<P: MarginalPredictor + ?Sized>(cfg: &SamplerConfig, pred: &P, n: usize) -> Result<Vec<TokenSequence>> {
    Ok(batch_run(cfg, pred, n)?.into_iter().map(|c| c.tokens).collect())
}
