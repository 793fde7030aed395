//! Study configuration: a flat TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{check_kappa, DEFAULT_KAPPA};
use crate::error::{Error, Result};
use crate::gibbs::{MetropolisConfig, DEFAULT_ESS_FLOOR};
use crate::spectral::{Convention, MAX_CHAIN_LENGTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Importance,
    Metropolis,
    /// Importance sampling, falling back to Metropolis below the ESS floor.
    #[default]
    Auto,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Importance => "importance",
            SamplerKind::Metropolis => "metropolis",
            SamplerKind::Auto => "auto",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "importance" => Ok(SamplerKind::Importance),
            "metropolis" => Ok(SamplerKind::Metropolis),
            "auto" => Ok(SamplerKind::Auto),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<usize> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Keys accepted in a config file. Anything else is rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(rename = "J")]
    chains: Option<OneOrMany>,
    #[serde(rename = "T")]
    horizon: Option<usize>,
    #[serde(rename = "T_list")]
    horizons: Option<Vec<usize>>,
    kappa: Option<f64>,
    beta: Option<f64>,
    epsilon: Option<f64>,
    drift: Option<f64>,
    convention: Option<Convention>,
    sampler: Option<SamplerKind>,
    seed: Option<u64>,
    replicates: Option<usize>,
    output_dir: Option<PathBuf>,
    ess_floor: Option<f64>,
    burn_in: Option<usize>,
    thin: Option<usize>,
    proposal_scale: Option<f64>,
    entry_move_prob: Option<f64>,
    k1: Option<f64>,
    k2: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub chains: Option<Vec<usize>>,
    pub horizon: Option<usize>,
    pub beta: Option<f64>,
    pub epsilon: Option<f64>,
    pub drift: Option<f64>,
    pub convention: Option<Convention>,
    pub sampler: Option<SamplerKind>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    #[serde(rename = "J")]
    pub chains: Vec<usize>,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "T_list")]
    pub horizons: Vec<usize>,
    pub kappa: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub drift: f64,
    pub convention: Convention,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub replicates: usize,
    pub output_dir: PathBuf,
    pub ess_floor: f64,
    pub metropolis: MetropolisConfig,
    pub k1: Option<f64>,
    pub k2: Option<f64>,
}

pub const DEFAULT_CHAINS: [usize; 4] = [8, 16, 32, 64];
pub const DEFAULT_HORIZON: usize = 512;
pub const DEFAULT_HORIZONS: [usize; 2] = [64, 256];
pub const DEFAULT_REPLICATES: usize = 1000;

impl StudyConfig {
    /// Parses TOML text, applies `overrides` and validates.
    pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::assemble(raw, overrides, None)
    }

    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self> {
        Self::load(Some(path), overrides, None)
    }

    /// Defaults plus `overrides`; `epsilon` must still be supplied.
    pub fn from_overrides(overrides: &Overrides) -> Result<Self> {
        Self::assemble(RawConfig::default(), overrides, None)
    }

    /// Reads `path` when given, otherwise starts from defaults. Drivers that
    /// never count intersections pass `Some(eps)` as a stand-in for a missing
    /// `epsilon`.
    pub fn load(path: Option<&Path>, overrides: &Overrides, epsilon_fallback: Option<f64>) -> Result<Self> {
        let raw = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
            None => RawConfig::default(),
        };
        Self::assemble(raw, overrides, epsilon_fallback)
    }

    fn assemble(raw: RawConfig, o: &Overrides, epsilon_fallback: Option<f64>) -> Result<Self> {
        let defaults = MetropolisConfig::default();
        let epsilon = o.epsilon.or(raw.epsilon).or(epsilon_fallback).ok_or_else(|| {
            Error::Config("epsilon is required (config key `epsilon` or --epsilon)".into())
        })?;
        let cfg = StudyConfig {
            chains: o
                .chains
                .clone()
                .or(raw.chains.map(OneOrMany::into_vec))
                .unwrap_or_else(|| DEFAULT_CHAINS.to_vec()),
            horizon: o.horizon.or(raw.horizon).unwrap_or(DEFAULT_HORIZON),
            horizons: raw.horizons.unwrap_or_else(|| DEFAULT_HORIZONS.to_vec()),
            kappa: raw.kappa.unwrap_or(DEFAULT_KAPPA),
            beta: o.beta.or(raw.beta).unwrap_or(0.0),
            epsilon,
            drift: o.drift.or(raw.drift).unwrap_or(0.0),
            convention: o.convention.or(raw.convention).unwrap_or_default(),
            sampler: o.sampler.or(raw.sampler).unwrap_or_default(),
            seed: o.seed.or(raw.seed).unwrap_or(1),
            replicates: raw.replicates.unwrap_or(DEFAULT_REPLICATES),
            output_dir: o
                .output_dir
                .clone()
                .or(raw.output_dir)
                .unwrap_or_else(|| PathBuf::from("out")),
            ess_floor: raw.ess_floor.unwrap_or(DEFAULT_ESS_FLOOR),
            metropolis: MetropolisConfig {
                burn_in: raw.burn_in.unwrap_or(defaults.burn_in),
                thin: raw.thin.unwrap_or(defaults.thin),
                proposal_scale: raw.proposal_scale.unwrap_or(defaults.proposal_scale),
                entry_move_prob: raw.entry_move_prob.unwrap_or(defaults.entry_move_prob),
            },
            k1: raw.k1,
            k2: raw.k2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.chains.is_empty() {
            return bad("J needs at least one chain length".into());
        }
        if let Some(j) = self.chains.iter().find(|&&j| !(2..=MAX_CHAIN_LENGTH).contains(&j)) {
            return bad(format!("chain length J={j} outside 2..={MAX_CHAIN_LENGTH}"));
        }
        if self.horizon == 0 || self.horizons.contains(&0) {
            return bad("horizons must be at least 1".into());
        }
        if self.horizons.is_empty() {
            return bad("T_list needs at least one horizon".into());
        }
        check_kappa(self.kappa).map_err(|e| Error::Config(e.to_string()))?;
        if self.convention == Convention::Paper && self.kappa != DEFAULT_KAPPA {
            return bad("the paper convention requires kappa = 0.5".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta={} must be a finite value >= 0", self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon={} must be positive", self.epsilon));
        }
        if !self.drift.is_finite() {
            return bad("drift must be finite".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.ess_floor >= 1.0) {
            return bad("ess_floor must be at least 1".into());
        }
        let m = &self.metropolis;
        if !(m.proposal_scale > 0.0 && m.proposal_scale <= 1.0) {
            return bad("proposal_scale must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&m.entry_move_prob) {
            return bad("entry_move_prob must lie in [0, 1]".into());
        }
        if m.thin == 0 {
            return bad("thin must be at least 1".into());
        }
        for k in [self.k1, self.k2].into_iter().flatten() {
            if !(k >= 0.0 && k.is_finite()) {
                return bad(format!("tail level {k} must be >= 0"));
            }
        }
        if let (Some(k1), Some(k2)) = (self.k1, self.k2) {
            if k1 >= k2 {
                return bad(format!("k1={k1} must be below k2={k2}"));
            }
        }
        Ok(())
    }
}
