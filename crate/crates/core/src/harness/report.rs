//! The strategy-by-seed comparison grid and its outputs.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::evaluators::FitnessOracle;
use crate::evolution::mean_var;

use super::stats::{median, median_ci, median_ratio_ci, rank_sum, RankSum};
use super::{run_strategy, HarnessError, Oracle, RunSummary, SearchConfig, Strategy};

const CI_LEVEL: f64 = 0.95;
const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: u64,
    pub target: f64,
    pub evals_to_target: u64,
    pub reached_target: bool,
    pub best_true_fitness: f64,
    pub final_fitness: Vec<f64>,
    pub final_mean: f64,
    pub final_var: f64,
    pub wall_time_secs: f64,
}

impl From<&RunSummary> for RunReport {
    fn from(run: &RunSummary) -> Self {
        let final_fitness = run.final_fitness();
        let (final_mean, final_var) = mean_var(final_fitness.iter().copied());
        RunReport {
            strategy: run.strategy,
            seed: run.seed,
            budget: run.budget,
            target: run.target,
            evals_to_target: run.evals_to_target,
            reached_target: run.reached_target(),
            best_true_fitness: run.best_true(),
            final_fitness,
            final_mean,
            final_var,
            wall_time_secs: run.wall_time_secs,
        }
    }
}

/// Per-evaluation averages over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub best_true: Vec<f64>,
    pub pop_mean: Vec<f64>,
    pub pop_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    /// Censored runs count as `budget + 1`.
    pub evals_to_target: Vec<u64>,
    pub reached: usize,
    pub median_evals: f64,
    pub median_ci: (f64, f64),
    pub median_best_true: f64,
    pub mean_wall_time_secs: f64,
    pub curves: Curves,
}

impl StrategyReport {
    pub fn evals_f64(&self) -> Vec<f64> {
        self.evals_to_target.iter().map(|&e| e as f64).collect()
    }
}

/// How many times more evaluations `baseline` needs than the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub reference: Strategy,
    pub baseline: Strategy,
    pub ratio: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config: SearchConfig,
    pub optimum: f64,
    pub target: f64,
    pub strategies: Vec<StrategyReport>,
    /// Relative to renas, when it is part of the comparison.
    pub speedups: Vec<Speedup>,
    /// Rank-sum of renas against ea_random evaluations-to-target.
    pub renas_vs_ea_random: Option<RankSum>,
    /// Rank-sum of renas_nonbi against renas evaluations-to-target.
    pub nonbi_vs_renas: Option<RankSum>,
    pub runs: Vec<RunReport>,
}

impl Comparison {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategyReport> {
        self.strategies.iter().find(|r| r.strategy == s)
    }

    pub fn speedup_over(&self, baseline: Strategy) -> Option<&Speedup> {
        self.speedups.iter().find(|s| s.baseline == baseline)
    }
}

fn curves(runs: &[&RunSummary]) -> Curves {
    let len = runs.first().map_or(0, |r| r.trajectory.len());
    let n = runs.len() as f64;
    let avg = |f: &dyn Fn(usize, &RunSummary) -> f64| -> Vec<f64> {
        (0..len)
            .map(|i| runs.iter().map(|r| f(i, r)).sum::<f64>() / n)
            .collect()
    };
    Curves {
        best_true: avg(&|i, r| r.trajectory[i].best_true),
        pop_mean: avg(&|i, r| r.trajectory[i].pop_mean),
        pop_var: avg(&|i, r| r.trajectory[i].pop_var),
    }
}

fn strategy_report(strategy: Strategy, runs: &[&RunSummary]) -> StrategyReport {
    let evals: Vec<u64> = runs.iter().map(|r| r.evals_to_target).collect();
    let ef: Vec<f64> = evals.iter().map(|&e| e as f64).collect();
    let best: Vec<f64> = runs.iter().map(|r| r.best_true()).collect();
    StrategyReport {
        strategy,
        reached: runs.iter().filter(|r| r.reached_target()).count(),
        median_evals: median(&ef),
        median_ci: median_ci(&ef, CI_LEVEL),
        median_best_true: median(&best),
        mean_wall_time_secs: runs.iter().map(|r| r.wall_time_secs).sum::<f64>() / runs.len() as f64,
        curves: curves(runs),
        evals_to_target: evals,
    }
}

/// Runs every configured strategy on every seed, `jobs` runs at a time.
///
/// `on_run` sees each finished run (with its log events) before the events
/// are dropped; runs come back in strategy-major, seed-minor order whatever
/// the completion order.
pub fn compare(
    cfg: &SearchConfig,
    oracle: &Oracle,
    jobs: usize,
    on_run: &(dyn Fn(&RunSummary) -> Result<(), HarnessError> + Sync),
) -> Result<(Comparison, Vec<RunSummary>), HarnessError> {
    cfg.check()?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = cfg.strategies.iter().find(|s| !seen.insert(**s)) {
        return Err(HarnessError::Config(format!("strategy {dup} listed twice")));
    }
    let grid: Vec<(Strategy, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunSummary, HarnessError>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(strategy, seed)) = grid.get(i) else { break };
        let result = run_strategy(cfg, oracle, strategy, seed).and_then(|mut run| {
            on_run(&run)?;
            run.events = Vec::new();
            Ok(run)
        });
        let failed = result.is_err();
        slots.lock().expect("no panics while holding the lock")[i] = Some(result);
        if failed {
            // Stop handing out work; runs already started still finish.
            next.store(grid.len(), Ordering::Relaxed);
        }
    };
    let jobs = jobs.clamp(1, grid.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let runs: Vec<RunSummary> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .flatten()
        .collect::<Result<_, _>>()?;

    let optimum = oracle.optimum().expect("checked by run_strategy");
    let reports: Vec<StrategyReport> = cfg
        .strategies
        .iter()
        .map(|&s| strategy_report(s, &runs.iter().filter(|r| r.strategy == s).collect::<Vec<_>>()))
        .collect();
    let find = |s: Strategy| reports.iter().find(|r| r.strategy == s);
    let mut speedups = Vec::new();
    if let Some(renas) = find(Strategy::Renas) {
        for other in reports.iter().filter(|r| r.strategy != Strategy::Renas) {
            let (a, b) = (other.evals_f64(), renas.evals_f64());
            speedups.push(Speedup {
                reference: Strategy::Renas,
                baseline: other.strategy,
                ratio: other.median_evals / renas.median_evals,
                ci: median_ratio_ci(&a, &b, CI_LEVEL, BOOTSTRAP_RESAMPLES, 0),
            });
        }
    }
    let test = |x: Strategy, y: Strategy| Some(rank_sum(&find(x)?.evals_f64(), &find(y)?.evals_f64()));
    let comparison = Comparison {
        config: cfg.clone(),
        optimum,
        target: cfg.target_fraction * optimum,
        renas_vs_ea_random: test(Strategy::Renas, Strategy::EaRandom),
        nonbi_vs_renas: test(Strategy::RenasNonbi, Strategy::Renas),
        strategies: reports,
        speedups,
        runs: runs.iter().map(RunReport::from).collect(),
    };
    Ok((comparison, runs))
}

#[derive(Serialize)]
struct CsvRow {
    strategy: Strategy,
    seed: u64,
    evaluation: u64,
    observed_fitness: f64,
    true_fitness: f64,
    maturity: f64,
    best_true_fitness: f64,
    pop_mean: f64,
    pop_var: f64,
}

/// One row per evaluation per run. Contains no timings, so identical
/// configurations give identical bytes.
pub fn write_runs_csv<W: Write>(w: W, runs: &[RunSummary]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| HarnessError::Log(e.to_string());
    for run in runs {
        for p in &run.trajectory {
            out.serialize(CsvRow {
                strategy: run.strategy,
                seed: run.seed,
                evaluation: p.evaluation,
                observed_fitness: p.observed,
                true_fitness: p.true_fitness,
                maturity: p.maturity,
                best_true_fitness: p.best_true,
                pop_mean: p.pop_mean,
                pop_var: p.pop_var,
            })
            .map_err(err)?;
        }
    }
    out.flush()?;
    Ok(())
}
