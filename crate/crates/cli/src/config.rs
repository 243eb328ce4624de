//! Experiment configuration: one JSON file per run, command-line flags override it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mcb::discrete::{JointKind, Shape};
use mcb::model::TrainConfig;
use mcb::samplers::{Method, SamplerConfig, SdeOptions};
use mcb::schedule::{NoiseGrid, DEFAULT_HORIZON};
use serde::{Deserialize, Serialize};

/// Law written by `gen-dist`. Dirichlet draws take their seed from the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GenKind {
    Uniform,
    Copy,
    Product { marginals: Vec<Vec<f64>> },
    Dirichlet { alpha: f64 },
}

impl GenKind {
    pub fn joint_kind(&self, seed: u64) -> JointKind {
        match self {
            GenKind::Uniform => JointKind::Uniform,
            GenKind::Copy => JointKind::Copy,
            GenKind::Product { marginals } => JointKind::Product { marginals: marginals.clone() },
            GenKind::Dirichlet { alpha } => JointKind::Dirichlet { seed, alpha: *alpha },
        }
    }
}

/// Shape and law for `gen-dist`; the shape also declares the layout of a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub vocab: usize,
    pub len: usize,
    pub law: GenKind,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { vocab: 3, len: 2, law: GenKind::Copy }
    }
}

impl GenerateConfig {
    pub fn shape(&self) -> Result<Shape> {
        Ok(Shape::new(self.vocab, self.len)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Equal steps in reverse time.
    Uniform,
    /// Log-spaced levels down to `u_min`, then a final step to zero.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub method: Method,
    pub steps: usize,
    pub horizon: f64,
    pub grid: GridKind,
    /// Smallest nonzero level of the geometric grid and the SDE stopping level.
    pub u_min: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub final_bridge: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            method: Method::Mcb,
            steps: 64,
            horizon: DEFAULT_HORIZON,
            grid: GridKind::Uniform,
            u_min: 0.01,
            temperature: 1.0,
            top_p: 1.0,
            final_bridge: false,
        }
    }
}

impl SamplerSettings {
    pub fn grid(&self, steps: usize) -> Result<NoiseGrid> {
        Ok(match self.grid {
            GridKind::Uniform => NoiseGrid::uniform(self.horizon, steps)?,
            GridKind::Geometric => NoiseGrid::geometric(self.horizon, steps, self.u_min)?,
        })
    }

    pub fn sampler(&self, method: Method, steps: usize, temperature: f64, top_p: f64, seed: u64) -> Result<SamplerConfig> {
        let mut cfg = SamplerConfig::new(method, self.grid(steps)?, seed);
        cfg.temperature = temperature;
        cfg.top_p = top_p;
        cfg.sde = SdeOptions { u_min: self.u_min, final_bridge: self.final_bridge };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Grid of sampler settings; every combination is one report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub steps: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub top_p: Vec<f64>,
    pub samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Mcb, Method::Ddpm, Method::Ode],
            steps: vec![4, 16, 64],
            temperatures: vec![1.0],
            top_p: vec![1.0],
            samples: 2_000,
        }
    }
}

/// Budgets and tolerances for `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Levels at which posterior identities are checked.
    pub levels: Vec<f64>,
    /// Forward-process states per level.
    pub states: usize,
    pub kernel_u_k: f64,
    pub kernel_u_next: f64,
    pub kernel_instances: usize,
    pub kl_samples: usize,
    pub gap_steps: usize,
    pub gap_nodes: usize,
    pub gap_samples: usize,
    /// Standard-error multiplier for every Monte Carlo check.
    pub z: f64,
    pub identity_tol: f64,
    pub moment_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.05, 0.5, 1.0, 2.0, 6.0],
            states: 5,
            kernel_u_k: 1.0,
            kernel_u_next: 0.5,
            kernel_instances: 10,
            kl_samples: 10_000,
            gap_steps: 8,
            gap_nodes: 3,
            gap_samples: 20_000,
            z: 3.0,
            identity_tol: 1e-12,
            moment_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// JointDist JSON used by `train`, `sample`, `sweep` and `verify`.
    pub dist: Option<PathBuf>,
    /// Predictor JSON written by `train` and read by `sample` and `sweep`.
    pub model: Option<PathBuf>,
    /// Sequence file (one per line) to train on instead of `dist`.
    pub corpus: Option<PathBuf>,
    /// Use the exact posterior instead of `model`.
    pub oracle: bool,
    pub trace: bool,
    pub samples: usize,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dist: None,
            model: None,
            corpus: None,
            oracle: false,
            trace: false,
            samples: 1_000,
            generate: GenerateConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerSettings::default(),
            sweep: SweepConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub oracle: bool,
    pub trace: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.oracle |= o.oracle;
        self.trace |= o.trace;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, path) in [("dist", &self.dist), ("model", &self.model), ("corpus", &self.corpus)] {
            if let Some(p) = path {
                if !p.exists() {
                    bail!("{name} file {} does not exist", p.display());
                }
            }
        }
        if self.samples == 0 {
            bail!("samples must be positive");
        }
        let s = &self.sweep;
        if s.methods.is_empty() || s.steps.is_empty() || s.temperatures.is_empty() || s.top_p.is_empty() {
            bail!("sweep lists must be nonempty");
        }
        if s.samples == 0 {
            bail!("sweep.samples must be positive");
        }
        let v = &self.verify;
        if v.levels.is_empty() || v.states == 0 || v.kernel_instances == 0 {
            bail!("verify needs at least one level, state and kernel instance");
        }
        if !(v.z > 0.0 && v.identity_tol >= 0.0 && v.moment_tol >= 0.0) {
            bail!("verify tolerances must be nonnegative and z positive");
        }
        self.train.validate()?;
        Ok(())
    }
}
