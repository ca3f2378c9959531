//! Experiment configuration: defaults, a flat `key = value` file format, and
//! per-key overrides applied in order (so later sources win).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::evaluators::{LandscapeConfig, MaturityModel};
use crate::evolution::EvolutionConfig;
use crate::nn::AdamConfig;
use crate::reinforce::{Baseline, RewardConfig};
use crate::space::SpaceConfig;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Renas,
    RenasNonbi,
    EaRandom,
    RlConstruct,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Renas,
        Strategy::RenasNonbi,
        Strategy::EaRandom,
        Strategy::RlConstruct,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Renas => "renas",
            Strategy::RenasNonbi => "renas_nonbi",
            Strategy::EaRandom => "ea_random",
            Strategy::RlConstruct => "rl_construct",
            Strategy::Random => "random",
        }
    }

    /// Runs tournament evolution over a population.
    pub fn is_evolutionary(self) -> bool {
        matches!(self, Strategy::Renas | Strategy::RenasNonbi | Strategy::EaRandom)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown strategy `{s}`")))
    }
}

/// Where fitness values come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    /// Enumerate the landscape into a table.
    Tabular,
    /// Evaluate the landscape lazily; for spaces too large to tabulate.
    Landscape,
    /// A table previously written by `oracle build`.
    File { path: PathBuf },
}

impl FromStr for OracleSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "tabular" => OracleSpec::Tabular,
            "landscape" => OracleSpec::Landscape,
            "" => return Err(HarnessError::Config("empty oracle".into())),
            path => OracleSpec::File { path: path.into() },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: SpaceConfig,
    pub oracle: OracleSpec,
    pub landscape: LandscapeConfig,
    pub landscape_seed: u64,
    pub maturity: MaturityModel,
    pub evolution: EvolutionConfig,
    /// Total fitness evaluations per run, initial population included.
    pub budget: u64,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub reward: RewardConfig,
    pub adam: AdamConfig,
    pub controller: ControllerConfig,
    /// A run reaches the target once it evaluates a cell whose true fitness
    /// is at least this fraction of the optimum.
    pub target_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            space: SpaceConfig::new(3, 4),
            oracle: OracleSpec::Tabular,
            landscape: LandscapeConfig::default(),
            landscape_seed: 0,
            maturity: MaturityModel::default(),
            evolution: EvolutionConfig::default(),
            budget: 1000,
            seeds: vec![0],
            strategies: vec![Strategy::Renas],
            reward: RewardConfig::default(),
            adam: AdamConfig::default(),
            controller: ControllerConfig::default(),
            target_fraction: 0.99,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad value `{value}` for `{key}`")))
}

/// `3`, `0,4,7` or the half-open range `0..20`.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>, HarnessError> {
    let seeds: Vec<u64> = if let Some((a, b)) = value.split_once("..") {
        let (a, b): (u64, u64) = (parse("seeds", a.trim())?, parse("seeds", b.trim())?);
        (a..b).collect()
    } else {
        value
            .split(',')
            .map(|s| parse("seeds", s.trim()))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(HarnessError::Config(format!("no seeds in `{value}`")));
    }
    Ok(seeds)
}

pub fn parse_strategies(value: &str) -> Result<Vec<Strategy>, HarnessError> {
    if value.trim() == "all" {
        return Ok(Strategy::ALL.to_vec());
    }
    value.split(',').map(|s| s.trim().parse()).collect()
}

/// `none`, `ema` (decay 0.95) or `ema:<decay>`.
pub fn parse_baseline(value: &str) -> Result<Baseline, HarnessError> {
    match value.split_once(':') {
        None if value == "none" => Ok(Baseline::None),
        None if value == "ema" => Ok(Baseline::default()),
        Some(("ema", d)) => Ok(Baseline::Ema {
            decay: parse("baseline", d)?,
        }),
        _ => Err(HarnessError::Config(format!("bad baseline `{value}`"))),
    }
}

impl SearchConfig {
    /// Every key accepted by [`SearchConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "blocks",
        "ops",
        "oracle",
        "landscape_seed",
        "shared_op_std",
        "op_std",
        "input_std",
        "joint_std",
        "pair_std",
        "scale",
        "noise",
        "tau",
        "full_epochs",
        "finetune_epochs",
        "pop",
        "sample",
        "budget",
        "seed",
        "seeds",
        "strategy",
        "strategies",
        "entropy_weight",
        "fitness_clip",
        "baseline",
        "lr",
        "embed_dim",
        "hidden",
        "init_std",
        "target",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key {
            "blocks" => self.space.num_blocks = parse(key, v)?,
            "ops" => self.space.num_ops = parse(key, v)?,
            "oracle" => self.oracle = v.parse()?,
            "landscape_seed" => self.landscape_seed = parse(key, v)?,
            "shared_op_std" => self.landscape.shared_op_std = parse(key, v)?,
            "op_std" => self.landscape.op_std = parse(key, v)?,
            "input_std" => self.landscape.input_std = parse(key, v)?,
            "joint_std" => self.landscape.joint_std = parse(key, v)?,
            "pair_std" => self.landscape.pair_std = parse(key, v)?,
            "scale" => self.landscape.scale = parse(key, v)?,
            "noise" => self.maturity.noise_sigma = parse(key, v)?,
            "tau" => self.maturity.tau = parse(key, v)?,
            "full_epochs" => self.maturity.full_epochs = parse(key, v)?,
            "finetune_epochs" => self.maturity.finetune_epochs = parse(key, v)?,
            "pop" => self.evolution.population = parse(key, v)?,
            "sample" => self.evolution.sample = parse(key, v)?,
            "budget" => self.budget = parse(key, v)?,
            "seed" | "seeds" => self.seeds = parse_seeds(v)?,
            "strategy" | "strategies" => self.strategies = parse_strategies(v)?,
            "entropy_weight" => self.reward.entropy_weight = parse(key, v)?,
            "fitness_clip" => self.reward.fitness_clip = parse(key, v)?,
            "baseline" => self.reward.baseline = parse_baseline(v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "embed_dim" => self.controller.embed_dim = parse(key, v)?,
            "hidden" => self.controller.hidden = parse(key, v)?,
            "init_std" => self.controller.init_std = parse(key, v)?,
            "target" => self.target_fraction = parse(key, v)?,
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.space.check().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.evolution
            .check()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.maturity.check().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.reward.check().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.strategies.is_empty() {
            return bad("no strategies".into());
        }
        let pop = self.evolution.population as u64;
        if self.budget < pop {
            return bad(format!(
                "budget {} is smaller than the initial population {pop}",
                self.budget
            ));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return bad(format!("target {} outside (0, 1]", self.target_fraction));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate {}", self.adam.lr));
        }
        if self.controller.embed_dim == 0 || self.controller.hidden == 0 {
            return bad("controller sizes must be positive".into());
        }
        if !(self.controller.init_std >= 0.0 && self.controller.init_std.is_finite()) {
            return bad(format!("init_std {}", self.controller.init_std));
        }
        Ok(())
    }
}
