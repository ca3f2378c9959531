//! Fitness oracles standing in for network training.
//!
//! [`Landscape`] is a seeded synthetic objective: per-block op and input
//! terms plus interactions between the op pairs of adjacent blocks, squashed
//! through a logistic and rescaled so the global minimum maps to 0.05 and the
//! maximum to 0.95. Its extremes are found exactly by dynamic programming over
//! the block chain. [`TabularOracle`] materializes a landscape over an
//! enumerable space. [`MaturityModel`] turns true fitness into an observed,
//! noisy value depending on how much training a model has accumulated.

use std::fmt;
use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{CellSpec, SpaceConfig, SpaceError, Violation};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid cell: {0}")]
    Invalid(#[from] Violation),
    #[error("invalid maturity model: {0}")]
    Maturity(String),
    #[error("cells come from different spaces")]
    SpaceMismatch,
    #[error("oracle file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fitness never reaches 1.
pub const MAX_OBSERVED: f64 = 0.999;
pub const FITNESS_FLOOR: f64 = 0.05;
pub const FITNESS_CEIL: f64 = 0.95;

/// Maps accumulated training to the fraction of true fitness observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaturityModel {
    /// Time constant of the training curve, in epoch units.
    pub tau: f64,
    /// Epoch units in a full from-scratch training run; maturity 1 means
    /// this much training.
    pub full_epochs: f64,
    /// Epoch units added by fine-tuning an inheriting child.
    pub finetune_epochs: f64,
    /// Standard deviation of additive evaluation noise.
    pub noise_sigma: f64,
    /// Maturity of freshly trained models (initial population, random
    /// samples, retrained finalists).
    pub init_maturity: f64,
}

impl Default for MaturityModel {
    fn default() -> Self {
        MaturityModel {
            tau: 3.0,
            full_epochs: 20.0,
            finetune_epochs: 1.0,
            noise_sigma: 0.01,
            init_maturity: 1.0,
        }
    }
}

impl MaturityModel {
    pub fn noiseless() -> MaturityModel {
        MaturityModel {
            noise_sigma: 0.0,
            ..MaturityModel::default()
        }
    }

    pub fn check(&self) -> Result<(), OracleError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.tau) || !positive(self.full_epochs) {
            return Err(OracleError::Maturity("tau and full_epochs must be positive".into()));
        }
        if !(self.finetune_epochs.is_finite() && self.finetune_epochs >= 0.0) {
            return Err(OracleError::Maturity("finetune_epochs must be non-negative".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(OracleError::Maturity("noise_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.init_maturity) {
            return Err(OracleError::Maturity("init_maturity must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `1 - exp(-maturity * full_epochs / tau)`.
    pub fn factor(&self, maturity: f64) -> f64 {
        let epochs = maturity.clamp(0.0, 1.0) * self.full_epochs;
        1.0 - (-epochs / self.tau).exp()
    }

    /// `clamp(true * factor(maturity) + N(0, sigma), 0, MAX_OBSERVED)`.
    /// Draws exactly one normal variate from `rng` whatever sigma is, so
    /// the noise stream stays aligned across configurations.
    pub fn observe<R: Rng + ?Sized>(&self, true_fitness: f64, maturity: f64, rng: &mut R) -> f64 {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        (true_fitness * self.factor(maturity) + self.noise_sigma * z).clamp(0.0, MAX_OBSERVED)
    }

    /// Maturity carried over before fine-tuning: the parent's maturity
    /// scaled by the fraction of the `4#B` variable fields left unchanged.
    pub fn inherited(&self, parent_maturity: f64, parent: &CellSpec, child: &CellSpec) -> Result<f64, OracleError> {
        if parent.blocks.len() != child.blocks.len() || parent.num_ops != child.num_ops {
            return Err(OracleError::SpaceMismatch);
        }
        let fields = 4 * parent.blocks.len();
        let unchanged = fields - parent.hamming(child);
        Ok(parent_maturity.clamp(0.0, 1.0) * unchanged as f64 / fields as f64)
    }

    /// Inherited maturity plus one fine-tuning pass, capped at 1.
    pub fn inherit(&self, parent_maturity: f64, parent: &CellSpec, child: &CellSpec) -> Result<f64, OracleError> {
        let carried = self.inherited(parent_maturity, parent, child)?;
        Ok((carried + self.finetune_epochs / self.full_epochs).min(1.0))
    }

    /// Epoch units spent obtaining one evaluation.
    pub fn cost(&self, inherited: bool) -> f64 {
        if inherited {
            self.finetune_epochs
        } else {
            self.init_maturity * self.full_epochs
        }
    }
}

/// Anything that scores cells.
pub trait FitnessOracle {
    fn space(&self) -> &SpaceConfig;

    /// Noise-free fitness of a fully trained cell, in `[0, 1)`.
    fn true_fitness(&self, cell: &CellSpec) -> Result<f64, OracleError>;

    /// Best true fitness over the whole space, when known.
    fn optimum(&self) -> Option<f64>;

    fn maturity(&self) -> &MaturityModel;

    fn evaluate<R: Rng + ?Sized>(&self, cell: &CellSpec, maturity: f64, rng: &mut R) -> Result<f64, OracleError>
    where
        Self: Sized,
    {
        let f = self.true_fitness(cell)?;
        Ok(self.maturity().observe(f, maturity, rng))
    }

    fn cost(&self, inherited: bool) -> f64 {
        self.maturity().cost(inherited)
    }
}

/// Shape of a synthetic landscape. Standard deviations are relative; the
/// whole sum is rescaled so its standard deviation over uniform random cells
/// equals `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    /// Quality of each op shared by every op field of every block.
    pub shared_op_std: f64,
    /// Main effect of each op field, per block.
    pub op_std: f64,
    /// Main effect of each input field, per block.
    pub input_std: f64,
    /// Interaction between the two op fields, and between the two input
    /// fields, of one block.
    pub joint_std: f64,
    /// Interaction between the op pairs of adjacent blocks.
    pub pair_std: f64,
    /// Standard deviation of the logit before squashing.
    pub scale: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            shared_op_std: 3.0,
            op_std: 0.5,
            input_std: 0.6,
            joint_std: 0.25,
            pair_std: 0.25,
            scale: 0.5,
        }
    }
}

/// Seeded additive-plus-pairwise objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub space: SpaceConfig,
    pub config: LandscapeConfig,
    pub seed: u64,
    pub maturity: MaturityModel,
    /// Per block, `k x k` table over `(o1, o2)`.
    op_terms: Vec<Vec<f64>>,
    /// Per block `b`, `(b+1) x (b+1)` table over the input digits.
    input_terms: Vec<Vec<f64>>,
    /// Between blocks `b` and `b+1`, `k^2 x k^2` over their op pairs.
    pair_terms: Vec<Vec<f64>>,
    x_min: f64,
    x_max: f64,
    best: CellSpec,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Landscape {
    pub fn new(space: SpaceConfig, config: LandscapeConfig, seed: u64) -> Result<Landscape, OracleError> {
        space.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw =
            |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| std * normal.sample(&mut rng)).collect::<Vec<f64>>() };
        let k = space.num_ops;
        let nb = space.num_blocks;
        // Per-block table over two fields with `n` values each: two main
        // effects plus a pure interaction.
        let shared = draw(k, config.shared_op_std);
        let field_pair =
            |draw: &mut dyn FnMut(usize, f64) -> Vec<f64>, n: usize, main: f64, common: &[f64]| -> Vec<f64> {
                let first = draw(n, main);
                let second = draw(n, main);
                let mut joint = draw(n * n, config.joint_std);
                double_center(&mut joint, n);
                let c = |v: usize| common.get(v).copied().unwrap_or(0.0);
                (0..n * n)
                    .map(|i| c(i / n) + c(i % n) + first[i / n] + second[i % n] + joint[i])
                    .collect()
            };
        let mut op_terms: Vec<Vec<f64>> = (0..nb)
            .map(|_| field_pair(&mut draw, k, config.op_std, &shared))
            .collect();
        let mut input_terms: Vec<Vec<f64>> = (1..=nb)
            .map(|b| field_pair(&mut draw, b + 1, config.input_std, &[]))
            .collect();
        let mut pair_terms: Vec<Vec<f64>> = (1..nb).map(|_| draw(k.pow(4), config.pair_std)).collect();

        for t in &mut pair_terms {
            double_center(t, k * k);
        }
        // Under uniform cells the terms are pairwise uncorrelated, so the
        // variance of the sum is the sum of the tables' variances.
        let var = |t: &[f64]| {
            let m = t.iter().sum::<f64>() / t.len() as f64;
            t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64
        };
        let total: f64 = op_terms
            .iter()
            .chain(&input_terms)
            .chain(&pair_terms)
            .map(|t| var(t))
            .sum();
        let factor = if total > 0.0 { config.scale / total.sqrt() } else { 0.0 };
        for t in op_terms.iter_mut().chain(&mut input_terms).chain(&mut pair_terms) {
            t.iter_mut().for_each(|v| *v *= factor);
        }

        let mut land = Landscape {
            space,
            config,
            seed,
            maturity: MaturityModel::default(),
            op_terms,
            input_terms,
            pair_terms,
            x_min: 0.0,
            x_max: 0.0,
            best: CellSpec::new(Vec::new(), k),
        };
        let (x_max, best) = land.extreme(true);
        let (x_min, _) = land.extreme(false);
        land.x_min = x_min;
        land.x_max = x_max;
        land.best = best;
        Ok(land)
    }

    /// Unsquashed objective.
    pub fn raw(&self, cell: &CellSpec) -> f64 {
        let k = self.space.num_ops;
        let pair = |blk: &crate::space::BlockSpec| blk.o1.code() * k + blk.o2.code();
        let mut x = 0.0;
        for (idx, blk) in cell.blocks.iter().enumerate() {
            let b = idx + 1;
            x += self.op_terms[idx][pair(blk)];
            x += self.input_terms[idx][blk.i1.digit() * (b + 1) + blk.i2.digit()];
            if let Some(next) = cell.blocks.get(idx + 1) {
                x += self.pair_terms[idx][pair(blk) * k * k + pair(next)];
            }
        }
        x
    }

    pub fn raw_range(&self) -> (f64, f64) {
        (self.x_min, self.x_max)
    }

    /// A cell attaining the maximum.
    pub fn best_cell(&self) -> &CellSpec {
        &self.best
    }

    fn squash(&self, x: f64) -> f64 {
        let lo = sigmoid(self.x_min);
        let hi = sigmoid(self.x_max);
        if hi - lo <= 0.0 {
            return FITNESS_FLOOR;
        }
        let u = ((sigmoid(x) - lo) / (hi - lo)).clamp(0.0, 1.0);
        FITNESS_FLOOR + (FITNESS_CEIL - FITNESS_FLOOR) * u
    }

    pub fn fitness_unchecked(&self, cell: &CellSpec) -> f64 {
        self.squash(self.raw(cell))
    }

    /// Exact max (or min) of the raw objective via dynamic programming over
    /// the chain of blocks, returning an attaining cell. Input terms are
    /// independent per block; op pairs couple neighbours.
    fn extreme(&self, maximize: bool) -> (f64, CellSpec) {
        let better = |a: f64, b: f64| if maximize { a > b } else { a < b };
        let k = self.space.num_ops;
        let kk = k * k;
        let nb = self.space.num_blocks;
        let mut inputs = Vec::with_capacity(nb);
        let mut input_total = 0.0;
        for (idx, table) in self.input_terms.iter().enumerate() {
            let (arg, val) = table.iter().enumerate().fold(
                (0, table[0]),
                |acc, (i, &v)| if better(v, acc.1) { (i, v) } else { acc },
            );
            input_total += val;
            inputs.push((arg / (idx + 2), arg % (idx + 2)));
        }
        // score[s]: best value of blocks 1..=b with block b's op pair = s.
        let mut score: Vec<f64> = self.op_terms[0].clone();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(nb);
        for b in 1..nb {
            let mut next = vec![0.0; kk];
            let mut arg = vec![0usize; kk];
            for s in 0..kk {
                let mut best_val = score[0] + self.pair_terms[b - 1][s];
                let mut best_prev = 0;
                for (p, &sp) in score.iter().enumerate().skip(1) {
                    let v = sp + self.pair_terms[b - 1][p * kk + s];
                    if better(v, best_val) {
                        best_val = v;
                        best_prev = p;
                    }
                }
                next[s] = best_val + self.op_terms[b][s];
                arg[s] = best_prev;
            }
            score = next;
            back.push(arg);
        }
        let (mut state, mut val) = (0, score[0]);
        for (s, &v) in score.iter().enumerate() {
            if better(v, val) {
                state = s;
                val = v;
            }
        }
        let mut states = vec![0; nb];
        states[nb - 1] = state;
        for b in (1..nb).rev() {
            state = back[b - 1][state];
            states[b - 1] = state;
        }
        let blocks = (0..nb)
            .map(|idx| crate::space::BlockSpec {
                i1: crate::space::InputRef::from_digit(inputs[idx].0),
                i2: crate::space::InputRef::from_digit(inputs[idx].1),
                o1: crate::space::OpChoice::ALL[states[idx] / k],
                o2: crate::space::OpChoice::ALL[states[idx] % k],
            })
            .collect();
        (val + input_total, CellSpec::new(blocks, k))
    }
}

/// Removes row and column means so a pair table carries pure interaction:
/// its conditional mean given either neighbour's op pair is zero, making it
/// uncorrelated with every unary term and with the other pair tables.
fn double_center(t: &mut [f64], n: usize) {
    let grand = t.iter().sum::<f64>() / (n * n) as f64;
    let rows: Vec<f64> = (0..n)
        .map(|p| t[p * n..(p + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let cols: Vec<f64> = (0..n)
        .map(|q| (0..n).map(|p| t[p * n + q]).sum::<f64>() / n as f64)
        .collect();
    for p in 0..n {
        for q in 0..n {
            t[p * n + q] += grand - rows[p] - cols[q];
        }
    }
}

impl FitnessOracle for Landscape {
    fn space(&self) -> &SpaceConfig {
        &self.space
    }

    fn true_fitness(&self, cell: &CellSpec) -> Result<f64, OracleError> {
        cell.validate(&self.space)?;
        Ok(self.fitness_unchecked(cell))
    }

    fn optimum(&self) -> Option<f64> {
        Some(FITNESS_CEIL)
    }

    fn maturity(&self) -> &MaturityModel {
        &self.maturity
    }
}

/// Exhaustive table of true fitness over an enumerable space, indexed by
/// [`CellSpec::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularOracle {
    pub space: SpaceConfig,
    pub landscape: LandscapeConfig,
    pub seed: u64,
    pub maturity: MaturityModel,
    values: Vec<f64>,
    best_index: u64,
}

const MAGIC: &[u8; 8] = b"NASTABLE";
pub const TABLE_VERSION: u32 = 1;

impl TabularOracle {
    /// Enumerates `space` and records every cell's landscape fitness.
    pub fn build(space: SpaceConfig, landscape: LandscapeConfig, seed: u64) -> Result<TabularOracle, OracleError> {
        let land = Landscape::new(space, landscape, seed)?;
        let cells = crate::space::enumerate_space(&space)?;
        let values: Vec<f64> = cells.map(|c| land.fitness_unchecked(&c)).collect();
        Ok(TabularOracle::from_values(space, landscape, seed, values))
    }

    fn from_values(space: SpaceConfig, landscape: LandscapeConfig, seed: u64, values: Vec<f64>) -> TabularOracle {
        let mut best_index = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best_index] {
                best_index = i;
            }
        }
        TabularOracle {
            space,
            landscape,
            seed,
            maturity: MaturityModel::default(),
            values,
            best_index: best_index as u64,
        }
    }

    pub fn with_maturity(mut self, maturity: MaturityModel) -> TabularOracle {
        self.maturity = maturity;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Lowest-index cell attaining the maximum.
    pub fn best_cell(&self) -> CellSpec {
        CellSpec::from_index(&self.space, self.best_index)
    }

    pub fn best_fitness(&self) -> f64 {
        self.values[self.best_index as usize]
    }

    /// Fraction of cells whose fitness is at least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        self.values.iter().filter(|&&v| v >= threshold).count() as f64 / self.values.len() as f64
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), OracleError> {
        w.write_all(MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.space.num_blocks as u32).to_le_bytes())?;
        w.write_all(&(self.space.num_ops as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let l = &self.landscape;
        for v in [l.shared_op_std, l.op_std, l.input_std, l.joint_std, l.pair_std, l.scale] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<TabularOracle, OracleError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(OracleError::Format("not an oracle table".into()));
        }
        let mut u32_buf = [0u8; 4];
        let mut u64_buf = [0u8; 8];
        let mut read_u32 = |r: &mut R| -> io::Result<u32> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = read_u32(&mut r)?;
        if version != TABLE_VERSION {
            return Err(OracleError::Format(format!("unsupported table version {version}")));
        }
        let num_blocks = read_u32(&mut r)? as usize;
        let num_ops = read_u32(&mut r)? as usize;
        let mut read_u64 = |r: &mut R| -> io::Result<u64> {
            r.read_exact(&mut u64_buf)?;
            Ok(u64::from_le_bytes(u64_buf))
        };
        let seed = read_u64(&mut r)?;
        let mut fields = [0.0; 6];
        for f in &mut fields {
            *f = f64::from_bits(read_u64(&mut r)?);
        }
        let count = read_u64(&mut r)?;
        let space = SpaceConfig::new(num_blocks, num_ops);
        space.check()?;
        if space.size_u64() != Some(count) {
            return Err(OracleError::Format(format!(
                "{count} entries for a space of {} cells",
                crate::space::space_size(&space)
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() as u64 != 8 * count {
            return Err(OracleError::Format(format!(
                "expected {} bytes of values, found {}",
                8 * count,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if values.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(OracleError::Format("fitness outside [0, 1)".into()));
        }
        let landscape = LandscapeConfig {
            shared_op_std: fields[0],
            op_std: fields[1],
            input_std: fields[2],
            joint_std: fields[3],
            pair_std: fields[4],
            scale: fields[5],
        };
        Ok(TabularOracle::from_values(space, landscape, seed, values))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), OracleError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<TabularOracle, OracleError> {
        TabularOracle::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Writes `cell<TAB>fitness` lines in index order.
    pub fn export_text<W: Write>(&self, w: W) -> Result<(), OracleError> {
        let mut w = io::BufWriter::new(w);
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{}\t{}", CellSpec::from_index(&self.space, i as u64), v)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl FitnessOracle for TabularOracle {
    fn space(&self) -> &SpaceConfig {
        &self.space
    }

    fn true_fitness(&self, cell: &CellSpec) -> Result<f64, OracleError> {
        cell.validate(&self.space)?;
        Ok(self.values[cell.index(&self.space) as usize])
    }

    fn optimum(&self) -> Option<f64> {
        Some(self.best_fitness())
    }

    fn maturity(&self) -> &MaturityModel {
        &self.maturity
    }
}

impl fmt::Display for TabularOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tabular oracle: {} blocks, {} ops, {} cells, seed {}, best {:.6} at {}",
            self.space.num_blocks,
            self.space.num_ops,
            self.values.len(),
            self.seed,
            self.best_fitness(),
            self.best_cell()
        )
    }
}

/// Oracle backed by a closure, for toy environments.
pub struct FnOracle<F> {
    pub space: SpaceConfig,
    pub maturity: MaturityModel,
    pub optimum: Option<f64>,
    f: F,
}

impl<F: Fn(&CellSpec) -> f64> FnOracle<F> {
    pub fn new(space: SpaceConfig, maturity: MaturityModel, optimum: Option<f64>, f: F) -> FnOracle<F> {
        FnOracle {
            space,
            maturity,
            optimum,
            f,
        }
    }
}

impl<F: Fn(&CellSpec) -> f64> FitnessOracle for FnOracle<F> {
    fn space(&self) -> &SpaceConfig {
        &self.space
    }

    fn true_fitness(&self, cell: &CellSpec) -> Result<f64, OracleError> {
        cell.validate(&self.space)?;
        Ok((self.f)(cell))
    }

    fn optimum(&self) -> Option<f64> {
        self.optimum
    }

    fn maturity(&self) -> &MaturityModel {
        &self.maturity
    }
}
