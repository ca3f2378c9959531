//! Tournament-based evolution with pluggable mutation policies.
//!
//! Each step samples `#S` members without replacement, mutates the fittest
//! of the sample, evaluates the child with inherited maturity, removes the
//! least fit of the sample and inserts the child. The mutation policy then
//! learns from the child's observed fitness.

use std::collections::VecDeque;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    apply_mutation, random_mutation, ControllerError, MutationController, MutationTrace, TraceScore,
};
use crate::evaluators::{FitnessOracle, OracleError};
use crate::reinforce::{Diagnostics, ReinforceError, Trainer};
use crate::space::{random_cell, CellSpec, SpaceConfig};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Reinforce(#[from] ReinforceError),
    #[error("replay log ran out of mutations at step {0}")]
    ReplayExhausted(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: u64,
    pub cell: CellSpec,
    /// Observed fitness.
    pub fitness: f64,
    pub maturity: f64,
    pub parent_id: Option<u64>,
    pub birth_step: u64,
    /// Noise-free fitness from the oracle, kept for reporting only; selection
    /// never reads it.
    pub true_fitness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population: usize,
    pub sample: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 20,
            sample: 5,
        }
    }
}

impl EvolutionConfig {
    pub fn check(&self) -> Result<(), EvolutionError> {
        if self.population < 2 {
            return Err(EvolutionError::Config(format!(
                "population {} is below 2",
                self.population
            )));
        }
        if self.sample < 2 || self.sample > self.population {
            return Err(EvolutionError::Config(format!(
                "sample size {} outside [2, {}]",
                self.sample, self.population
            )));
        }
        Ok(())
    }
}

/// Independent random streams derived from one run seed, so that changing
/// how one consumer draws never shifts another.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub select: ChaCha8Rng,
    pub mutate: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub params: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> RngStreams {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        RngStreams {
            init: stream(1),
            select: stream(2),
            mutate: stream(3),
            noise: stream(4),
            params: stream(5),
        }
    }
}

/// Members plus every individual ever evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<Individual>,
    pub capacity: usize,
    pub history: Vec<Individual>,
    next_id: u64,
}

impl Population {
    /// `capacity` random cells, each trained from scratch.
    pub fn initialize<O: FitnessOracle>(
        oracle: &O,
        capacity: usize,
        init_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<Population, EvolutionError> {
        if capacity < 2 {
            return Err(EvolutionError::Config(format!("population {capacity} is below 2")));
        }
        let mut pop = Population {
            members: Vec::with_capacity(capacity),
            capacity,
            history: Vec::new(),
            next_id: 0,
        };
        let maturity = oracle.maturity().init_maturity;
        for _ in 0..capacity {
            let cell = random_cell(oracle.space(), init_rng);
            let ind = pop.evaluate_new(oracle, cell, maturity, None, 0, noise_rng)?;
            pop.members.push(ind);
        }
        Ok(pop)
    }

    fn evaluate_new<O: FitnessOracle>(
        &mut self,
        oracle: &O,
        cell: CellSpec,
        maturity: f64,
        parent_id: Option<u64>,
        birth_step: u64,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<Individual, EvolutionError> {
        let fitness = oracle.evaluate(&cell, maturity, noise_rng)?;
        let ind = Individual {
            id: self.next_id,
            true_fitness: oracle.true_fitness(&cell)?,
            cell,
            fitness,
            maturity,
            parent_id,
            birth_step,
        };
        self.next_id += 1;
        self.history.push(ind.clone());
        Ok(ind)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean_var(&self) -> (f64, f64) {
        mean_var(self.members.iter().map(|m| m.fitness))
    }

    pub fn best(&self) -> Option<&Individual> {
        self.members.iter().reduce(|a, b| if beats(b, a) { b } else { a })
    }
}

pub fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Strictly fitter, with the lower id winning ties.
fn beats(a: &Individual, b: &Individual) -> bool {
    a.fitness > b.fitness || (a.fitness == b.fitness && a.id < b.id)
}

/// Indices into `members` of the sample's best and worst.
pub fn select(members: &[Individual], sample: &[usize]) -> (usize, usize) {
    let mut best = sample[0];
    let mut worst = sample[0];
    for &i in &sample[1..] {
        if beats(&members[i], &members[best]) {
            best = i;
        }
        if beats(&members[worst], &members[i]) {
            worst = i;
        }
    }
    (best, worst)
}

/// Source of child edits, optionally learning from their fitness.
pub trait MutationPolicy {
    fn propose(&mut self, parent: &CellSpec, rng: &mut ChaCha8Rng) -> Result<MutationTrace, EvolutionError>;

    /// Feedback for the most recent proposal.
    fn learn(&mut self, fitness: f64) -> Result<Option<Diagnostics>, EvolutionError>;
}

/// Learned mutation: a controller trained by REINFORCE after every child.
pub struct ReinforcedMutation {
    pub controller: MutationController,
    pub trainer: Trainer,
    pending: Option<TraceScore>,
}

impl ReinforcedMutation {
    pub fn new(controller: MutationController, trainer: Trainer) -> ReinforcedMutation {
        ReinforcedMutation {
            controller,
            trainer,
            pending: None,
        }
    }
}

impl MutationPolicy for ReinforcedMutation {
    fn propose(&mut self, parent: &CellSpec, rng: &mut ChaCha8Rng) -> Result<MutationTrace, EvolutionError> {
        let (trace, score) = self.controller.sample_scored(parent, rng)?;
        self.pending = Some(score);
        Ok(trace)
    }

    fn learn(&mut self, fitness: f64) -> Result<Option<Diagnostics>, EvolutionError> {
        let score = self
            .pending
            .take()
            .ok_or_else(|| EvolutionError::Config("learn called without a proposal".into()))?;
        Ok(Some(self.trainer.update(&mut self.controller, &score, fitness)?))
    }
}

/// Uniform field and uniform legal replacement per block; never learns.
pub struct RandomMutation {
    pub space: SpaceConfig,
}

impl MutationPolicy for RandomMutation {
    fn propose(&mut self, _parent: &CellSpec, rng: &mut ChaCha8Rng) -> Result<MutationTrace, EvolutionError> {
        Ok(random_mutation(&self.space, rng))
    }

    fn learn(&mut self, _fitness: f64) -> Result<Option<Diagnostics>, EvolutionError> {
        Ok(None)
    }
}

/// Replays recorded traces in order.
pub struct ReplayMutation {
    traces: VecDeque<MutationTrace>,
    used: u64,
}

impl ReplayMutation {
    pub fn new(traces: impl IntoIterator<Item = MutationTrace>) -> ReplayMutation {
        ReplayMutation {
            traces: traces.into_iter().collect(),
            used: 0,
        }
    }
}

impl MutationPolicy for ReplayMutation {
    fn propose(&mut self, _parent: &CellSpec, _rng: &mut ChaCha8Rng) -> Result<MutationTrace, EvolutionError> {
        self.used += 1;
        self.traces
            .pop_front()
            .ok_or(EvolutionError::ReplayExhausted(self.used))
    }

    fn learn(&mut self, _fitness: f64) -> Result<Option<Diagnostics>, EvolutionError> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Ids of the tournament sample, in draw order.
    pub sampled: Vec<u64>,
    pub parent_id: u64,
    pub parent_fitness: f64,
    pub trace: MutationTrace,
    pub child: Individual,
    pub removed_id: u64,
    pub removed_fitness: f64,
    pub diagnostics: Option<Diagnostics>,
}

/// A running evolution. Borrowing the oracle keeps it shared and immutable
/// across runs.
pub struct Evolution<'a, O, P> {
    oracle: &'a O,
    pub policy: P,
    pub config: EvolutionConfig,
    pub streams: RngStreams,
    pop: Population,
    step: u64,
}

impl<'a, O: FitnessOracle, P: MutationPolicy> Evolution<'a, O, P> {
    /// Builds the initial population from the `init` and `noise` streams.
    pub fn new(
        oracle: &'a O,
        policy: P,
        config: EvolutionConfig,
        mut streams: RngStreams,
    ) -> Result<Self, EvolutionError> {
        config.check()?;
        let pop = Population::initialize(oracle, config.population, &mut streams.init, &mut streams.noise)?;
        Ok(Evolution {
            oracle,
            policy,
            config,
            streams,
            pop,
            step: 0,
        })
    }

    pub fn population(&self) -> &Population {
        &self.pop
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self) -> Result<StepRecord, EvolutionError> {
        let step = self.step + 1;
        let sample = index::sample(&mut self.streams.select, self.pop.members.len(), self.config.sample).into_vec();
        let (b, w) = select(&self.pop.members, &sample);
        let parent = self.pop.members[b].clone();
        let removed = self.pop.members[w].clone();

        let trace = self.policy.propose(&parent.cell, &mut self.streams.mutate)?;
        let space = *self.oracle.space();
        let child_cell = apply_mutation(&parent.cell, &trace, &space)?;
        let maturity = self
            .oracle
            .maturity()
            .inherit(parent.maturity, &parent.cell, &child_cell)?;
        let child = self.pop.evaluate_new(
            self.oracle,
            child_cell,
            maturity,
            Some(parent.id),
            step,
            &mut self.streams.noise,
        )?;

        self.pop.members.remove(w);
        self.pop.members.push(child.clone());
        let diagnostics = self.policy.learn(child.fitness)?;
        self.step = step;
        Ok(StepRecord {
            step,
            sampled: sample.iter().map(|&i| self.pop_id_before(i, w, &removed)).collect(),
            parent_id: parent.id,
            parent_fitness: parent.fitness,
            trace,
            child,
            removed_id: removed.id,
            removed_fitness: removed.fitness,
            diagnostics,
        })
    }

    /// Id of the member that sat at index `i` before the worst (at `w`) was
    /// removed.
    fn pop_id_before(&self, i: usize, w: usize, removed: &Individual) -> u64 {
        match i.cmp(&w) {
            std::cmp::Ordering::Less => self.pop.members[i].id,
            std::cmp::Ordering::Equal => removed.id,
            std::cmp::Ordering::Greater => self.pop.members[i - 1].id,
        }
    }

    /// Retrains every member from scratch and returns the final population.
    pub fn finish(mut self) -> Result<(Population, P), EvolutionError> {
        let maturity = self.oracle.maturity().init_maturity;
        for m in &mut self.pop.members {
            m.fitness = self.oracle.evaluate(&m.cell, maturity, &mut self.streams.noise)?;
            m.maturity = maturity;
        }
        Ok((self.pop, self.policy))
    }
}

/// Runs `budget` steps, passing each record to `on_step`.
pub fn run<O: FitnessOracle, P: MutationPolicy>(
    oracle: &O,
    policy: P,
    config: EvolutionConfig,
    seed: u64,
    budget: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(Population, P), EvolutionError> {
    let mut evo = Evolution::new(oracle, policy, config, RngStreams::new(seed))?;
    for _ in 0..budget {
        let rec = evo.step()?;
        on_step(&rec);
    }
    evo.finish()
}
