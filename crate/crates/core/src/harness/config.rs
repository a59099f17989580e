//! Run configuration: one TOML file drives every subcommand.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::paths::{particle_rng, TimeGrid};
use crate::solver::{SolverConfig, TerminalMode};

/// Key offsets that separate the initial-law and direction streams from the
/// Brownian stream of the same seed.
const XI_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const ETA_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub grid: GridSection,
    pub mc: McSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub norm: NormSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub particles: usize,
    pub seed: u64,
    pub xi: LawSpec,
}

/// Law of the initial condition `ξ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawSpec {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
    /// Finitely many atoms, allocated to particles by stratified quantiles.
    Atoms { values: Vec<f64>, probs: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    /// Picard iteration on the measure flow.
    #[default]
    Mfg,
    /// Continuation in λ on the general monotone system.
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub mode: SolverMode,
    pub picard_tol: f64,
    pub max_iters: usize,
    pub damping: f64,
    pub basis_degree: usize,
    pub terminal: TerminalMode,
    pub tilde_subsample: usize,
    /// Monotonicity constant `κ` for the general mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Lipschitz constant `ℓ` for the general mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ell: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            mode: SolverMode::Mfg,
            picard_tol: 1e-4,
            max_iters: 60,
            damping: 0.5,
            basis_degree: 3,
            terminal: TerminalMode::Zero,
            tilde_subsample: 10_000,
            kappa: None,
            ell: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormSection {
    /// Norm weight `K`; the discount rate when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
}

/// Direction `η` of a measure perturbation, aligned with the `ξ` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionSpec {
    Constant { value: f64 },
    /// `ξ^power`.
    Power { power: i32 },
    /// Independent normal draws.
    Normal { mean: f64, sd: f64 },
    /// `1{ξ = atom}`.
    Indicator { atom: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Representative starting points.
    pub x: Vec<f64>,
    pub xtilde: Vec<f64>,
    pub deltas: Vec<f64>,
    pub n_list: Vec<u32>,
    pub checkpoints: Vec<f64>,
    pub eta: DirectionSpec,
    /// Quantile points of `ψ` used for `E[ψη]` in the finite-difference check.
    pub psi_points: usize,
    /// Step of the central difference of `V` in `x`.
    pub fd_h: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            x: vec![1.0],
            xtilde: vec![-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0],
            deltas: vec![0.2, 0.1, 0.05],
            n_list: vec![4, 8, 16],
            checkpoints: vec![1.0, 5.0, 10.0],
            eta: DirectionSpec::Constant { value: 1.0 },
            psi_points: 9,
            fd_h: 0.05,
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.build().map_err(|e| Error::Config(e.to_string()))?;
        TimeGrid::new(self.grid.horizon, self.grid.dt).map_err(|e| Error::Config(e.to_string()))?;
        check(self.mc.particles > 0, "mc.particles must be positive")?;
        match &self.mc.xi {
            LawSpec::Normal { mean, sd } => check(mean.is_finite() && *sd >= 0.0 && sd.is_finite(), "xi: need finite mean and sd >= 0")?,
            LawSpec::Uniform { low, high } => check(low.is_finite() && high.is_finite() && low <= high, "xi: need low <= high")?,
            LawSpec::Constant { value } => check(value.is_finite(), "xi: value must be finite")?,
            LawSpec::Atoms { values, probs } => {
                check(!values.is_empty() && values.len() == probs.len(), "xi: values and probs must match and be non-empty")?;
                check(finite(values) && probs.iter().all(|p| *p >= 0.0), "xi: atoms finite, probabilities non-negative")?;
                check((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9, "xi: probabilities must sum to 1")?;
            }
        }
        self.solver_config(self.mc.seed).validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(k) = self.norm.k {
            check(k > 0.0, "norm.k must be positive")?;
        }
        if self.solver.mode == SolverMode::General {
            check(self.solver.kappa.is_some() && self.solver.ell.is_some(), "general mode needs solver.kappa and solver.ell")?;
        }
        let e = &self.experiment;
        check(finite(&e.x) && finite(&e.xtilde) && finite(&e.checkpoints), "experiment values must be finite")?;
        check(
            e.deltas.iter().all(|d| *d > 0.0) && e.deltas.windows(2).all(|w| w[1] < w[0]),
            "experiment.deltas must be positive and decreasing",
        )?;
        check(e.n_list.iter().all(|n| *n > 0) && e.n_list.windows(2).all(|w| w[1] > w[0]), "experiment.n_list must be positive and increasing")?;
        check(
            e.checkpoints.iter().all(|t| *t >= 0.0 && *t <= self.grid.horizon),
            "experiment.checkpoints must lie in [0, horizon]",
        )?;
        check(e.psi_points > 0, "experiment.psi_points must be positive")?;
        check(e.fd_h > 0.0, "experiment.fd_h must be positive")?;
        match e.eta {
            DirectionSpec::Normal { mean, sd } => check(mean.is_finite() && sd >= 0.0, "eta: need finite mean and sd >= 0")?,
            DirectionSpec::Constant { value } => check(value.is_finite(), "eta: value must be finite")?,
            DirectionSpec::Indicator { atom } => check(atom.is_finite(), "eta: atom must be finite")?,
            DirectionSpec::Power { .. } => {}
        }
        Ok(())
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.horizon, self.grid.dt).expect("validated")
    }

    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        let grid = TimeGrid::new(self.grid.horizon, self.grid.dt).unwrap_or(TimeGrid::new(1.0, 1.0).expect("unit grid"));
        let s = &self.solver;
        let mut c = SolverConfig::new(grid, self.mc.particles, seed);
        c.picard_tol = s.picard_tol;
        c.max_iters = s.max_iters;
        c.damping = s.damping;
        c.basis_degree = s.basis_degree;
        c.terminal = s.terminal;
        c.tilde_subsample = s.tilde_subsample;
        c.norm_k = self.norm.k;
        c
    }

    /// `ξ` samples for `seed`; particle `i` depends only on `(seed, i)`.
    pub fn xi_samples(&self, seed: u64) -> Vec<f64> {
        sample_law(&self.mc.xi, self.mc.particles, seed ^ XI_STREAM)
    }

    /// `η` samples aligned with `xi`.
    pub fn eta_samples(&self, xi: &[f64], seed: u64) -> Vec<f64> {
        direction(&self.experiment.eta, xi, seed ^ ETA_STREAM)
    }
}

pub fn sample_law(law: &LawSpec, n: usize, key: u64) -> Vec<f64> {
    match law {
        LawSpec::Normal { mean, sd } => {
            (0..n).map(|i| mean + sd * particle_rng(key, i).sample::<f64, _>(StandardNormal)).collect()
        }
        LawSpec::Uniform { low, high } => {
            (0..n).map(|i| low + (high - low) * particle_rng(key, i).random::<f64>()).collect()
        }
        LawSpec::Constant { value } => vec![*value; n],
        LawSpec::Atoms { values, probs } => {
            let mut cum = Vec::with_capacity(probs.len());
            let mut acc = 0.0;
            for p in probs {
                acc += p;
                cum.push(acc);
            }
            (0..n)
                .map(|i| {
                    let u = (i as f64 + 0.5) / n as f64;
                    let j = cum.partition_point(|c| *c <= u).min(values.len() - 1);
                    values[j]
                })
                .collect()
        }
    }
}

pub fn direction(spec: &DirectionSpec, xi: &[f64], key: u64) -> Vec<f64> {
    match *spec {
        DirectionSpec::Constant { value } => vec![value; xi.len()],
        DirectionSpec::Power { power } => xi.iter().map(|x| x.powi(power)).collect(),
        DirectionSpec::Normal { mean, sd } => {
            (0..xi.len()).map(|i| mean + sd * particle_rng(key, i).sample::<f64, _>(StandardNormal)).collect()
        }
        DirectionSpec::Indicator { atom } => xi.iter().map(|x| if *x == atom { 1.0 } else { 0.0 }).collect(),
    }
}
