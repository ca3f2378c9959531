use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nas_core::evaluators::TabularOracle;
use nas_core::harness::{
    compare, read_log, replay, run_strategy, write_log, write_runs_csv, Comparison, HarnessError, Oracle, RunReport,
    RunSummary, SearchConfig,
};

/// Reinforced evolutionary architecture search against synthetic fitness
/// oracles.
#[derive(Parser)]
#[command(name = "nas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy on one seed.
    Search {
        #[command(flatten)]
        common: Common,
        /// renas, renas_nonbi, ea_random, rl_construct or random.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a strategy-by-seed grid and report the comparison.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list, or `all`.
        #[arg(long, alias = "strategy")]
        strategies: Option<String>,
        /// `0,3,5` or the half-open range `0..20`.
        #[arg(long, alias = "seed")]
        seeds: Option<String>,
        /// Runs in flight at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Build or export tabulated oracles.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Re-derive a logged run and check it reproduces bit for bit.
    Replay { log: PathBuf },
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum OracleCommand {
    /// Tabulate the landscape for the configured space.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a table as `cell<TAB>fitness` lines.
    Export {
        #[arg(long)]
        oracle: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Settings shared by every command that builds a configuration. Flags win
/// over `--config`, which wins over built-in defaults.
#[derive(Args)]
struct Common {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    ops: Option<usize>,
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    sample: Option<usize>,
    /// Total evaluations per run, including the initial population.
    #[arg(long)]
    budget: Option<u64>,
    /// `tabular`, `landscape`, or the path of a saved table.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    landscape_seed: Option<u64>,
    /// Evaluation noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// `none`, `ema` or `ema:<decay>`.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    entropy_weight: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Fraction of the optimum that counts as reaching the target.
    #[arg(long)]
    target: Option<f64>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        put("blocks", self.blocks.map(|v| v.to_string()));
        put("ops", self.ops.map(|v| v.to_string()));
        put("pop", self.pop.map(|v| v.to_string()));
        put("sample", self.sample.map(|v| v.to_string()));
        put("budget", self.budget.map(|v| v.to_string()));
        put("oracle", self.oracle.clone());
        put("landscape_seed", self.landscape_seed.map(|v| v.to_string()));
        put("noise", self.noise.map(|v| v.to_string()));
        put("baseline", self.baseline.clone());
        put("entropy_weight", self.entropy_weight.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("hidden", self.hidden.map(|v| v.to_string()));
        put("embed_dim", self.embed_dim.map(|v| v.to_string()));
        put("target", self.target.map(|v| v.to_string()));
        kv
    }

    fn build(&self, extra: &[(&str, Option<String>)]) -> Result<SearchConfig, HarnessError> {
        let mut cfg = SearchConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("reading {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        }
        for (k, v) in self.overrides() {
            cfg.set(&k, &v)?;
        }
        for (k, v) in extra {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("--set expects key=value, got `{item}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, run: &RunSummary) -> Result<(), HarnessError> {
    let file = File::create(path)?;
    write_log(BufWriter::new(file), &run.events)
}

fn search(common: &Common, strategy: Option<String>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = common.build(&[("strategy", strategy), ("seed", seed.map(|s| s.to_string()))])?;
    if cfg.strategies.len() != 1 || cfg.seeds.len() != 1 {
        return Err(HarnessError::Config("search runs one strategy on one seed; use compare for grids".into()).into());
    }
    let oracle = Oracle::build(&cfg)?;
    let run = run_strategy(&cfg, &oracle, cfg.strategies[0], cfg.seeds[0])?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_runs_csv(create(&out.join("runs.csv"))?, std::slice::from_ref(&run))?;
    write_trace(&out.join("trace.jsonl"), &run)?;
    let report = RunReport::from(&run);
    write_json(&out.join("summary.json"), serde_json::to_value(&report)?)?;
    let reached = if report.reached_target {
        format!(
            "reached target {:.4} at evaluation {}",
            report.target, report.evals_to_target
        )
    } else {
        format!("did not reach target {:.4}", report.target)
    };
    println!(
        "{} seed {}: best true fitness {:.4}, {reached}; final population mean {:.4}",
        report.strategy, report.seed, report.best_true_fitness, report.final_mean
    );
    Ok(())
}

fn print_comparison(c: &Comparison) {
    println!(
        "target {:.4} (optimum {:.4}); censored runs count as {}",
        c.target,
        c.optimum,
        c.config.budget + 1
    );
    println!("{:<14}{:>10}{:>22}{:>10}", "strategy", "median", "95% CI", "reached");
    for s in &c.strategies {
        println!(
            "{:<14}{:>10}{:>22}{:>7}/{}",
            s.strategy.as_str(),
            s.median_evals,
            format!("[{}, {}]", s.median_ci.0, s.median_ci.1),
            s.reached,
            s.evals_to_target.len()
        );
    }
    for sp in &c.speedups {
        println!(
            "speedup of {} over {}: {:.2} [{:.2}, {:.2}]",
            sp.reference, sp.baseline, sp.ratio, sp.ci.0, sp.ci.1
        );
    }
    if let Some(rs) = &c.renas_vs_ea_random {
        println!(
            "rank-sum renas vs ea_random: U = {}, two-sided p = {:.4}",
            rs.u, rs.p_two_sided
        );
    }
}

fn run_compare(
    common: &Common,
    strategies: Option<String>,
    seeds: Option<String>,
    jobs: usize,
    out: &Path,
) -> Result<()> {
    let cfg = common.build(&[("strategies", strategies), ("seeds", seeds)])?;
    let oracle = Oracle::build(&cfg)?;
    let traces = out.join("traces");
    fs::create_dir_all(&traces).with_context(|| format!("creating {}", traces.display()))?;
    let (report, runs) = compare(&cfg, &oracle, jobs, &|run| {
        write_trace(&traces.join(format!("{}_seed{}.jsonl", run.strategy, run.seed)), run)
    })?;
    write_runs_csv(create(&out.join("runs.csv"))?, &runs)?;
    write_json(&out.join("summary.json"), serde_json::to_value(&report)?)?;
    print_comparison(&report);
    Ok(())
}

fn oracle_build(common: &Common, out: &Path) -> Result<()> {
    let cfg = common.build(&[])?;
    let table = TabularOracle::build(cfg.space, cfg.landscape, cfg.landscape_seed).map_err(HarnessError::from)?;
    table.save(out).map_err(HarnessError::from)?;
    println!(
        "{} cells, optimum {:.6} at {}",
        table.len(),
        table.best_fitness(),
        table.best_cell()
    );
    Ok(())
}

fn oracle_export(oracle: &Path, out: Option<&Path>) -> Result<()> {
    let table = TabularOracle::load(oracle).map_err(HarnessError::from)?;
    match out {
        Some(path) => table.export_text(create(path)?),
        None => table.export_text(io::stdout().lock()),
    }
    .map_err(HarnessError::from)?;
    Ok(())
}

fn run_replay(log: &Path) -> Result<ExitCode> {
    let file = File::open(log).map_err(|e| HarnessError::Config(format!("opening {}: {e}", log.display())))?;
    let events = read_log(BufReader::new(file))?;
    let report = replay(&events, None)?;
    if report.is_exact() {
        println!(
            "{} seed {}: {} events reproduced; final fitness matches bit for bit",
            report.strategy, report.seed, report.events_checked
        );
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{} seed {}: replay diverged", report.strategy, report.seed);
        for m in &report.mismatches {
            println!("  {m}");
        }
        if report.mismatches.is_empty() {
            println!("  final fitness differs");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Search {
            common,
            strategy,
            seed,
            out,
        } => search(&common, strategy, seed, &out)?,
        Command::Compare {
            common,
            strategies,
            seeds,
            jobs,
            out,
        } => run_compare(&common, strategies, seeds, jobs, &out)?,
        Command::Oracle { command } => match command {
            OracleCommand::Build { common, out } => oracle_build(&common, &out)?,
            OracleCommand::Export { oracle, out } => oracle_export(&oracle, out.as_deref())?,
        },
        Command::Replay { log } => return run_replay(&log),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
