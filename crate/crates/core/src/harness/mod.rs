//! Experiment harness: strategy runners, run logs and replay, and the
//! multi-seed comparison report.

pub mod config;
pub mod construct;
pub mod log;
pub mod report;
pub mod run;
pub mod stats;

use rand::Rng;
use thiserror::Error;

use crate::evaluators::{FitnessOracle, Landscape, MaturityModel, OracleError, TabularOracle};
use crate::evolution::EvolutionError;
use crate::nn::NnError;
use crate::reinforce::ReinforceError;
use crate::space::{CellSpec, SpaceConfig};

pub use config::{OracleSpec, SearchConfig, Strategy};
pub use construct::{ConstructEpisode, ConstructParams, ConstructPolicy};
pub use log::{read_log, write_log, LogEvent, LOG_VERSION};
pub use report::{compare, write_runs_csv, Comparison, Curves, RunReport, Speedup, StrategyReport};
pub use run::{replay, run_strategy, EvalPoint, ReplayReport, RunSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Reinforce(#[from] ReinforceError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("run log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Whether the error stems from user-supplied settings rather than a
    /// failure during the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Oracle(
                    OracleError::Space(_) | OracleError::SpaceMismatch | OracleError::Format(_) | OracleError::Io(_)
                )
        )
    }
}

/// The oracles a config can name, behind one concrete type.
#[derive(Debug, Clone)]
pub enum Oracle {
    Tabular(TabularOracle),
    Landscape(Landscape),
}

impl Oracle {
    pub fn build(cfg: &SearchConfig) -> Result<Oracle, HarnessError> {
        Ok(match &cfg.oracle {
            OracleSpec::Tabular => Oracle::Tabular(
                TabularOracle::build(cfg.space, cfg.landscape, cfg.landscape_seed)?.with_maturity(cfg.maturity),
            ),
            OracleSpec::Landscape => {
                let mut l = Landscape::new(cfg.space, cfg.landscape, cfg.landscape_seed)?;
                l.maturity = cfg.maturity;
                Oracle::Landscape(l)
            }
            OracleSpec::File { path } => {
                let table = TabularOracle::load(path)?;
                if table.space.num_blocks != cfg.space.num_blocks || table.space.num_ops != cfg.space.num_ops {
                    return Err(HarnessError::Config(format!(
                        "{} holds a {}-block, {}-op table but the config asks for {} blocks and {} ops",
                        path.display(),
                        table.space.num_blocks,
                        table.space.num_ops,
                        cfg.space.num_blocks,
                        cfg.space.num_ops
                    )));
                }
                Oracle::Tabular(table.with_maturity(cfg.maturity))
            }
        })
    }
}

impl FitnessOracle for Oracle {
    fn space(&self) -> &SpaceConfig {
        match self {
            Oracle::Tabular(t) => t.space(),
            Oracle::Landscape(l) => l.space(),
        }
    }

    fn true_fitness(&self, cell: &CellSpec) -> Result<f64, OracleError> {
        match self {
            Oracle::Tabular(t) => t.true_fitness(cell),
            Oracle::Landscape(l) => l.true_fitness(cell),
        }
    }

    fn optimum(&self) -> Option<f64> {
        match self {
            Oracle::Tabular(t) => t.optimum(),
            Oracle::Landscape(l) => l.optimum(),
        }
    }

    fn maturity(&self) -> &MaturityModel {
        match self {
            Oracle::Tabular(t) => t.maturity(),
            Oracle::Landscape(l) => l.maturity(),
        }
    }

    fn evaluate<R: Rng + ?Sized>(&self, cell: &CellSpec, maturity: f64, rng: &mut R) -> Result<f64, OracleError> {
        match self {
            Oracle::Tabular(t) => t.evaluate(cell, maturity, rng),
            Oracle::Landscape(l) => l.evaluate(cell, maturity, rng),
        }
    }
}
