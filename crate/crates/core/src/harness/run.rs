//! Single runs of each strategy, and their replay from logs.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::MutationController;
use crate::evaluators::FitnessOracle;
use crate::evolution::{
    mean_var, Evolution, Individual, MutationPolicy, RandomMutation, ReinforcedMutation, ReplayMutation, RngStreams,
};
use crate::reinforce::{Diagnostics, Trainer};
use crate::space::{random_cell, CellSpec, SpaceConfig};

use super::{ConstructEpisode, ConstructPolicy, HarnessError, LogEvent, Oracle, SearchConfig, Strategy, LOG_VERSION};

/// One evaluation as seen by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// 1-based.
    pub evaluation: u64,
    pub observed: f64,
    pub true_fitness: f64,
    pub maturity: f64,
    /// Best true fitness among evaluations so far.
    pub best_true: f64,
    /// Observed-fitness moments of the population after this evaluation.
    /// Strategies without a population use the last `#P` evaluations.
    pub pop_mean: f64,
    pub pop_var: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: u64,
    /// Absolute true-fitness threshold.
    pub target: f64,
    pub trajectory: Vec<EvalPoint>,
    /// 1-based evaluation that first met the target, `budget + 1` if none did.
    pub evals_to_target: u64,
    pub final_members: Vec<Individual>,
    pub wall_time_secs: f64,
    pub events: Vec<LogEvent>,
}

impl RunSummary {
    pub fn reached_target(&self) -> bool {
        self.evals_to_target <= self.budget
    }

    pub fn best_true(&self) -> f64 {
        self.trajectory.last().map_or(0.0, |p| p.best_true)
    }

    pub fn final_fitness(&self) -> Vec<f64> {
        self.final_members.iter().map(|m| m.fitness).collect()
    }
}

struct Recorder {
    target: f64,
    best: f64,
    hit: Option<u64>,
    points: Vec<EvalPoint>,
    events: Vec<LogEvent>,
}

impl Recorder {
    fn new(target: f64, header: LogEvent) -> Recorder {
        Recorder {
            target,
            best: f64::NEG_INFINITY,
            hit: None,
            points: Vec::new(),
            events: vec![header],
        }
    }

    fn point(&mut self, ind: &Individual, (pop_mean, pop_var): (f64, f64)) {
        let evaluation = self.points.len() as u64 + 1;
        self.best = self.best.max(ind.true_fitness);
        if self.hit.is_none() && ind.true_fitness >= self.target {
            self.hit = Some(evaluation);
        }
        self.points.push(EvalPoint {
            evaluation,
            observed: ind.fitness,
            true_fitness: ind.true_fitness,
            maturity: ind.maturity,
            best_true: self.best,
            pop_mean,
            pop_var,
        });
    }
}

/// Where independently sampled strategies get their next cell.
trait CellSource {
    fn next(&mut self, streams: &mut RngStreams) -> Result<CellSpec, HarnessError>;
    fn learn(&mut self, fitness: f64) -> Result<Option<Diagnostics>, HarnessError>;
}

/// Draws from the `init` stream, so the first `#P` samples coincide with the
/// evolutionary strategies' initial population under the same seed.
struct UniformSource(SpaceConfig);

impl CellSource for UniformSource {
    fn next(&mut self, streams: &mut RngStreams) -> Result<CellSpec, HarnessError> {
        Ok(random_cell(&self.0, &mut streams.init))
    }

    fn learn(&mut self, _fitness: f64) -> Result<Option<Diagnostics>, HarnessError> {
        Ok(None)
    }
}

struct ConstructSource {
    policy: ConstructPolicy,
    trainer: Trainer,
    pending: Option<ConstructEpisode>,
}

impl CellSource for ConstructSource {
    fn next(&mut self, streams: &mut RngStreams) -> Result<CellSpec, HarnessError> {
        let ep = self.policy.sample(&mut streams.mutate)?;
        let cell = ep.cell.clone();
        self.pending = Some(ep);
        Ok(cell)
    }

    fn learn(&mut self, fitness: f64) -> Result<Option<Diagnostics>, HarnessError> {
        let ep = self.pending.take().expect("sampled before learning");
        Ok(Some(self.trainer.update(&mut self.policy, &ep, fitness)?))
    }
}

struct LoggedSource(VecDeque<CellSpec>);

impl CellSource for LoggedSource {
    fn next(&mut self, _streams: &mut RngStreams) -> Result<CellSpec, HarnessError> {
        self.0
            .pop_front()
            .ok_or_else(|| HarnessError::Log("ran out of sampled cells".into()))
    }

    fn learn(&mut self, _fitness: f64) -> Result<Option<Diagnostics>, HarnessError> {
        Ok(None)
    }
}

fn run_evolution<P: MutationPolicy>(
    cfg: &SearchConfig,
    oracle: &Oracle,
    policy: P,
    streams: RngStreams,
    steps: u64,
    rec: &mut Recorder,
) -> Result<Vec<Individual>, HarnessError> {
    let mut evo = Evolution::new(oracle, policy, cfg.evolution, streams)?;
    let init = evo.population().members.clone();
    for (i, ind) in init.iter().enumerate() {
        rec.point(ind, mean_var(init[..=i].iter().map(|m| m.fitness)));
        rec.events.push(LogEvent::Init {
            individual: ind.clone(),
        });
    }
    for _ in 0..steps {
        let record = evo.step()?;
        rec.point(&record.child, evo.population().mean_var());
        rec.events.push(LogEvent::Step { record });
    }
    Ok(evo.finish()?.0.members)
}

fn run_sampling(
    cfg: &SearchConfig,
    oracle: &Oracle,
    source: &mut dyn CellSource,
    mut streams: RngStreams,
    count: u64,
    rec: &mut Recorder,
) -> Result<Vec<Individual>, HarnessError> {
    let maturity = oracle.maturity().init_maturity;
    let window_len = cfg.evolution.population;
    let mut window = VecDeque::with_capacity(window_len + 1);
    let mut all = Vec::with_capacity(count as usize);
    for id in 0..count {
        let cell = source.next(&mut streams)?;
        let fitness = oracle.evaluate(&cell, maturity, &mut streams.noise)?;
        let ind = Individual {
            id,
            true_fitness: oracle.true_fitness(&cell)?,
            cell,
            fitness,
            maturity,
            parent_id: None,
            birth_step: id,
        };
        let diagnostics = source.learn(fitness)?;
        window.push_back(fitness);
        if window.len() > window_len {
            window.pop_front();
        }
        rec.point(&ind, mean_var(window.iter().copied()));
        rec.events.push(LogEvent::Sample {
            individual: ind.clone(),
            diagnostics,
        });
        all.push(ind);
    }
    // The final population is the observed top #P, retrained from scratch.
    all.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.id.cmp(&b.id)));
    all.truncate(window_len);
    for m in &mut all {
        m.fitness = oracle.evaluate(&m.cell, maturity, &mut streams.noise)?;
        m.maturity = maturity;
    }
    Ok(all)
}

fn check_compatible(cfg: &SearchConfig, oracle: &Oracle) -> Result<f64, HarnessError> {
    cfg.check()?;
    let s = oracle.space();
    if (s.num_blocks, s.num_ops) != (cfg.space.num_blocks, cfg.space.num_ops) {
        return Err(HarnessError::Config(
            "oracle space differs from the configured space".into(),
        ));
    }
    let optimum = oracle
        .optimum()
        .ok_or_else(|| HarnessError::Config("oracle has no known optimum to set a target from".into()))?;
    Ok(cfg.target_fraction * optimum)
}

fn finish(
    strategy: Strategy,
    seed: u64,
    cfg: &SearchConfig,
    mut rec: Recorder,
    final_members: Vec<Individual>,
    start: Instant,
) -> RunSummary {
    rec.events.push(LogEvent::Final {
        members: final_members.clone(),
    });
    RunSummary {
        strategy,
        seed,
        budget: cfg.budget,
        target: rec.target,
        evals_to_target: rec.hit.unwrap_or(cfg.budget + 1),
        trajectory: rec.points,
        final_members,
        wall_time_secs: start.elapsed().as_secs_f64(),
        events: rec.events,
    }
}

/// Runs one strategy for `cfg.budget` evaluations.
pub fn run_strategy(
    cfg: &SearchConfig,
    oracle: &Oracle,
    strategy: Strategy,
    seed: u64,
) -> Result<RunSummary, HarnessError> {
    let start = Instant::now();
    let target = check_compatible(cfg, oracle)?;
    let header = LogEvent::Header {
        version: LOG_VERSION,
        strategy,
        seed,
        config: cfg.clone(),
    };
    let mut rec = Recorder::new(target, header);
    let mut streams = RngStreams::new(seed);
    let steps = cfg.budget - cfg.evolution.population as u64;
    let space = cfg.space;
    let members = match strategy {
        Strategy::Renas | Strategy::RenasNonbi => {
            let mut ccfg = cfg.controller;
            ccfg.bidirectional = strategy == Strategy::Renas;
            let controller = MutationController::new(space, ccfg, &mut streams.params);
            let policy = ReinforcedMutation::new(controller, Trainer::new(cfg.reward, cfg.adam)?);
            run_evolution(cfg, oracle, policy, streams, steps, &mut rec)?
        }
        Strategy::EaRandom => run_evolution(cfg, oracle, RandomMutation { space }, streams, steps, &mut rec)?,
        Strategy::Random => run_sampling(cfg, oracle, &mut UniformSource(space), streams, cfg.budget, &mut rec)?,
        Strategy::RlConstruct => {
            let c = &cfg.controller;
            let policy = ConstructPolicy::new(space, c.embed_dim, c.hidden, c.init_std, &mut streams.params);
            let mut source = ConstructSource {
                policy,
                trainer: Trainer::new(cfg.reward, cfg.adam)?,
                pending: None,
            };
            run_sampling(cfg, oracle, &mut source, streams, cfg.budget, &mut rec)?
        }
    };
    Ok(finish(strategy, seed, cfg, rec, members, start))
}

/// Outcome of re-deriving a logged run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub events_checked: usize,
    /// Descriptions of the first few diverging events.
    pub mismatches: Vec<String>,
    pub logged_final: Vec<f64>,
    pub replayed_final: Vec<f64>,
}

impl ReplayReport {
    /// Whether every event matched and the final fitness values agree bit
    /// for bit.
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
            && self.logged_final.len() == self.replayed_final.len()
            && self
                .logged_final
                .iter()
                .zip(&self.replayed_final)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Controller diagnostics are not re-derived by replay.
fn without_diagnostics(e: &LogEvent) -> LogEvent {
    let mut e = e.clone();
    match &mut e {
        LogEvent::Step { record } => record.diagnostics = None,
        LogEvent::Sample { diagnostics, .. } => *diagnostics = None,
        _ => {}
    }
    e
}

/// Re-derives a run from its log: logged mutation traces drive evolution,
/// logged cells drive the sampling strategies. Randomness for selection and
/// evaluation noise is regenerated from the seed.
pub fn replay(events: &[LogEvent], oracle: Option<&Oracle>) -> Result<ReplayReport, HarnessError> {
    let Some(LogEvent::Header {
        version,
        strategy,
        seed,
        config,
    }) = events.first()
    else {
        return Err(HarnessError::Log("log does not start with a header".into()));
    };
    if *version != LOG_VERSION {
        return Err(HarnessError::Log(format!("unsupported log version {version}")));
    }
    let (strategy, seed) = (*strategy, *seed);
    let built;
    let oracle = match oracle {
        Some(o) => o,
        None => {
            built = Oracle::build(config)?;
            &built
        }
    };
    let target = check_compatible(config, oracle)?;
    let mut rec = Recorder::new(target, events[0].clone());
    let streams = RngStreams::new(seed);
    let members = if strategy.is_evolutionary() {
        let traces: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Step { record } => Some(record.trace.clone()),
                _ => None,
            })
            .collect();
        let steps = traces.len() as u64;
        run_evolution(config, oracle, ReplayMutation::new(traces), streams, steps, &mut rec)?
    } else {
        let cells: VecDeque<_> = events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Sample { individual, .. } => Some(individual.cell.clone()),
                _ => None,
            })
            .collect();
        let count = cells.len() as u64;
        run_sampling(config, oracle, &mut LoggedSource(cells), streams, count, &mut rec)?
    };
    let replayed = finish(strategy, seed, config, rec, members, Instant::now());

    let mut mismatches = Vec::new();
    if replayed.events.len() != events.len() {
        mismatches.push(format!(
            "log has {} events, replay produced {}",
            events.len(),
            replayed.events.len()
        ));
    }
    for (i, (a, b)) in events.iter().zip(&replayed.events).enumerate() {
        if without_diagnostics(a) != without_diagnostics(b) && mismatches.len() < 5 {
            mismatches.push(format!("event {} differs", i + 1));
        }
    }
    let logged_final = match events.last() {
        Some(LogEvent::Final { members }) => members.iter().map(|m| m.fitness).collect(),
        _ => {
            mismatches.push("log has no final population".into());
            Vec::new()
        }
    };
    Ok(ReplayReport {
        strategy,
        seed,
        events_checked: events.len().min(replayed.events.len()),
        mismatches,
        logged_final,
        replayed_final: replayed.final_fitness(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(strategy: Strategy) -> SearchConfig {
        let mut cfg = SearchConfig {
            space: SpaceConfig::new(2, 3),
            ..SearchConfig::default()
        };
        cfg.evolution.population = 8;
        cfg.evolution.sample = 3;
        cfg.budget = 60;
        cfg.controller.embed_dim = 6;
        cfg.controller.hidden = 6;
        cfg.strategies = vec![strategy];
        cfg
    }

    #[test]
    fn every_strategy_yields_budget_length_trajectories() {
        for strategy in Strategy::ALL {
            let cfg = small_cfg(strategy);
            let oracle = Oracle::build(&cfg).unwrap();
            let run = run_strategy(&cfg, &oracle, strategy, 4).unwrap();
            assert_eq!(run.trajectory.len() as u64, cfg.budget, "{strategy}");
            assert_eq!(run.final_members.len(), cfg.evolution.population, "{strategy}");
            for (i, p) in run.trajectory.iter().enumerate() {
                assert_eq!(p.evaluation, i as u64 + 1);
                assert!(p.pop_var >= 0.0 && p.pop_mean.is_finite());
                if i > 0 {
                    assert!(p.best_true >= run.trajectory[i - 1].best_true);
                }
            }
            let first_hit = run.trajectory.iter().find(|p| p.true_fitness >= run.target);
            assert_eq!(run.evals_to_target, first_hit.map_or(cfg.budget + 1, |p| p.evaluation));
        }
    }

    #[test]
    fn random_search_shares_initial_population() {
        let cfg = small_cfg(Strategy::Random);
        let oracle = Oracle::build(&cfg).unwrap();
        let random = run_strategy(&cfg, &oracle, Strategy::Random, 9).unwrap();
        let renas = run_strategy(&cfg, &oracle, Strategy::Renas, 9).unwrap();
        let ea = run_strategy(&cfg, &oracle, Strategy::EaRandom, 9).unwrap();
        let pop = cfg.evolution.population;
        assert_eq!(renas.trajectory[..pop], ea.trajectory[..pop]);
        for (a, b) in random.trajectory[..pop].iter().zip(&renas.trajectory[..pop]) {
            assert_eq!((a.observed, a.true_fitness), (b.observed, b.true_fitness));
        }
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        for strategy in [Strategy::Renas, Strategy::RlConstruct] {
            let cfg = small_cfg(strategy);
            let oracle = Oracle::build(&cfg).unwrap();
            let a = run_strategy(&cfg, &oracle, strategy, 2).unwrap();
            let b = run_strategy(&cfg, &oracle, strategy, 2).unwrap();
            assert_eq!(a.trajectory, b.trajectory);
            assert_eq!(a.events, b.events);
            let c = run_strategy(&cfg, &oracle, strategy, 3).unwrap();
            assert_ne!(a.trajectory, c.trajectory);
        }
    }

    #[test]
    fn replay_reproduces_every_strategy() {
        for strategy in Strategy::ALL {
            let mut cfg = small_cfg(strategy);
            cfg.maturity.noise_sigma = 0.02;
            let oracle = Oracle::build(&cfg).unwrap();
            let run = run_strategy(&cfg, &oracle, strategy, 11).unwrap();
            let report = replay(&run.events, None).unwrap();
            assert!(report.is_exact(), "{strategy}: {report:?}");
            assert_eq!(report.events_checked, run.events.len());
        }
    }

    #[test]
    fn replay_detects_tampering() {
        let cfg = small_cfg(Strategy::EaRandom);
        let oracle = Oracle::build(&cfg).unwrap();
        let mut events = run_strategy(&cfg, &oracle, Strategy::EaRandom, 1).unwrap().events;
        let step = events
            .iter_mut()
            .find_map(|e| match e {
                LogEvent::Step { record } => Some(record),
                _ => None,
            })
            .unwrap();
        step.child.fitness += 1e-12;
        let report = replay(&events, Some(&oracle)).unwrap();
        assert!(!report.mismatches.is_empty());
        assert!(!report.is_exact());

        let mut events = run_strategy(&cfg, &oracle, Strategy::EaRandom, 1).unwrap().events;
        if let Some(LogEvent::Final { members }) = events.last_mut() {
            members[0].fitness = f64::from_bits(members[0].fitness.to_bits() + 1);
        }
        assert!(!replay(&events, Some(&oracle)).unwrap().is_exact());
    }

    #[test]
    fn mismatched_oracle_is_a_config_error() {
        let cfg = small_cfg(Strategy::Random);
        let mut other = cfg.clone();
        other.space = SpaceConfig::new(1, 3);
        let oracle = Oracle::build(&other).unwrap();
        let err = run_strategy(&cfg, &oracle, Strategy::Random, 0).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn random_mutation_targets_are_uniform() {
        use rand::SeedableRng;
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let space = SpaceConfig::new(1, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0u64; 4];
        for _ in 0..100_000 {
            let trace = crate::controller::random_mutation(&space, &mut rng);
            counts[trace.actions[0].target.index()] += 1;
        }
        let expected = 25_000.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(p > 0.01, "{counts:?} p={p}");
    }

    #[test]
    fn random_search_best_matches_order_statistics() {
        let mut cfg = small_cfg(Strategy::Random);
        cfg.budget = 30;
        let oracle = Oracle::build(&cfg).unwrap();
        let Oracle::Tabular(table) = &oracle else {
            unreachable!()
        };
        let mut v = table.values().to_vec();
        v.sort_by(f64::total_cmp);
        let (n, size) = (cfg.budget as i32, v.len() as f64);
        // E[max of n uniform draws with replacement].
        let expected: f64 = v
            .iter()
            .enumerate()
            .map(|(i, x)| x * (((i + 1) as f64 / size).powi(n) - (i as f64 / size).powi(n)))
            .sum();
        let bests: Vec<f64> = (0..400)
            .map(|seed| run_strategy(&cfg, &oracle, Strategy::Random, seed).unwrap().best_true())
            .collect();
        let (mean, var) = mean_var(bests.iter().copied());
        let se = (var / bests.len() as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{mean} vs {expected} (se {se})");
    }
}
