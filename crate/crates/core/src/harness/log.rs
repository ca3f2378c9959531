//! JSON-lines run logs. A log holds everything needed to re-derive its run.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::evolution::{Individual, StepRecord};
use crate::reinforce::Diagnostics;

use super::{HarnessError, SearchConfig, Strategy};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Header {
        version: u32,
        strategy: Strategy,
        seed: u64,
        config: SearchConfig,
    },
    /// A member of the initial population.
    Init { individual: Individual },
    /// One tournament step.
    Step { record: StepRecord },
    /// One independently sampled cell (random search, sequential construction).
    Sample {
        individual: Individual,
        diagnostics: Option<Diagnostics>,
    },
    /// The final population after retraining.
    Final { members: Vec<Individual> },
}

pub fn write_log<W: Write>(mut w: W, events: &[LogEvent]) -> Result<(), HarnessError> {
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(|e| HarnessError::Log(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogEvent>, HarnessError> {
    let mut events = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| HarnessError::Log(format!("line {}: {e}", n + 1)))?;
        events.push(e);
    }
    Ok(events)
}
