//! Cell/block genotype space.
//!
//! A cell is an ordered list of `#B` blocks. Each block picks two inputs and
//! two operations and sums the two branches, so a cell is fully described by
//! `4#B` variable tokens plus one fixed combiner token per block.
//!
//! Token vocabulary for a space with `#B` blocks:
//!
//! | token                  | id            |
//! |------------------------|---------------|
//! | previous-previous cell | `0`           |
//! | previous cell          | `1`           |
//! | block `k` output       | `1 + k`       |
//! | operation `m`          | `2 + #B + m`  |
//! | combiner (add)         | `2 + #B + 6`  |
//!
//! The layout is fixed: run logs store token sequences and must replay.

use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on the number of cells [`enumerate_space`] will stream.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Number of operations in the full operation set.
pub const NUM_OPS_TOTAL: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("token sequence has length {found}, expected {expected}")]
    BadLength { expected: usize, found: usize },
    #[error("token id {id} at position {position} is not valid there")]
    OutOfVocabulary { position: usize, id: usize },
    #[error("invalid cell: {0}")]
    Invalid(#[from] Violation),
    #[error("space has {size} cells, more than the enumeration cap {cap}")]
    TooLarge { size: BigUint, cap: u64 },
    #[error("invalid space configuration: {0}")]
    Config(String),
    #[error("cannot parse cell: {0}")]
    Parse(String),
}

/// One of the six candidate operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpChoice {
    /// 3x3 depthwise-separable convolution.
    Sep3,
    /// 5x5 depthwise-separable convolution.
    Sep5,
    /// 7x7 depthwise-separable convolution.
    Sep7,
    /// 3x3 average pooling.
    Avg3,
    /// 3x3 max pooling.
    Max3,
    Ident,
}

impl OpChoice {
    pub const ALL: [OpChoice; NUM_OPS_TOTAL] = [
        OpChoice::Sep3,
        OpChoice::Sep5,
        OpChoice::Sep7,
        OpChoice::Avg3,
        OpChoice::Max3,
        OpChoice::Ident,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<OpChoice> {
        Self::ALL.get(code).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpChoice::Sep3 => "SEP3",
            OpChoice::Sep5 => "SEP5",
            OpChoice::Sep7 => "SEP7",
            OpChoice::Avg3 => "AVG3",
            OpChoice::Max3 => "MAX3",
            OpChoice::Ident => "IDENT",
        }
    }

    pub fn parse(s: &str) -> Option<OpChoice> {
        Self::ALL.iter().copied().find(|op| op.as_str() == s)
    }
}

impl fmt::Display for OpChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a block branch reads its input from.
///
/// Serialized as the signed tag used in the text format: `-2`, `-1`, or the
/// 1-based index of an earlier block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum InputRef {
    PrevPrevCell,
    PrevCell,
    /// Output of block `k` of the same cell, `k >= 1`.
    Block(usize),
}

impl InputRef {
    pub fn tag(self) -> i64 {
        match self {
            InputRef::PrevPrevCell => -2,
            InputRef::PrevCell => -1,
            InputRef::Block(k) => k as i64,
        }
    }

    pub fn from_tag(tag: i64) -> Option<InputRef> {
        match tag {
            -2 => Some(InputRef::PrevPrevCell),
            -1 => Some(InputRef::PrevCell),
            k if k >= 1 => Some(InputRef::Block(k as usize)),
            _ => None,
        }
    }

    /// Position in the ordered legal set `[c-2, c-1, block 1, block 2, ...]`.
    /// Equal to the token id.
    pub fn digit(self) -> usize {
        match self {
            InputRef::PrevPrevCell => 0,
            InputRef::PrevCell => 1,
            InputRef::Block(k) => 1 + k,
        }
    }

    pub fn from_digit(digit: usize) -> InputRef {
        match digit {
            0 => InputRef::PrevPrevCell,
            1 => InputRef::PrevCell,
            d => InputRef::Block(d - 1),
        }
    }

    /// Whether this reference is legal inside block `block` (1-based).
    pub fn legal_in(self, block: usize) -> bool {
        match self {
            InputRef::Block(k) => k >= 1 && k < block,
            _ => true,
        }
    }
}

impl TryFrom<i64> for InputRef {
    type Error = String;

    fn try_from(tag: i64) -> Result<Self, Self::Error> {
        InputRef::from_tag(tag).ok_or_else(|| format!("invalid input tag {tag}"))
    }
}

impl From<InputRef> for i64 {
    fn from(r: InputRef) -> i64 {
        r.tag()
    }
}

impl fmt::Display for InputRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

/// The four variable fields of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Slot {
    I1,
    I2,
    O1,
    O2,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::I1, Slot::I2, Slot::O1, Slot::O2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_input(self) -> bool {
        matches!(self, Slot::I1 | Slot::I2)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Slot::I1 => "i1",
            Slot::I2 => "i2",
            Slot::O1 => "o1",
            Slot::O2 => "o2",
        };
        f.write_str(s)
    }
}

/// One block: two inputs, two operations, combined by addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub i1: InputRef,
    pub i2: InputRef,
    pub o1: OpChoice,
    pub o2: OpChoice,
}

impl BlockSpec {
    pub fn input(&self, slot: Slot) -> Option<InputRef> {
        match slot {
            Slot::I1 => Some(self.i1),
            Slot::I2 => Some(self.i2),
            _ => None,
        }
    }

    pub fn op(&self, slot: Slot) -> Option<OpChoice> {
        match slot {
            Slot::O1 => Some(self.o1),
            Slot::O2 => Some(self.o2),
            _ => None,
        }
    }
}

/// Search-space configuration. `num_cells` and `num_filters` describe the
/// network the cell is stacked into; they are fixed during search and do not
/// take part in genotype identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub num_blocks: usize,
    pub num_ops: usize,
    pub num_cells: usize,
    pub num_filters: usize,
}

impl SpaceConfig {
    pub fn new(num_blocks: usize, num_ops: usize) -> SpaceConfig {
        SpaceConfig {
            num_blocks,
            num_ops,
            num_cells: 2,
            num_filters: 24,
        }
    }

    pub fn check(&self) -> Result<(), SpaceError> {
        if self.num_blocks == 0 {
            return Err(SpaceError::Config("num_blocks must be >= 1".into()));
        }
        if !(2..=NUM_OPS_TOTAL).contains(&self.num_ops) {
            return Err(SpaceError::Config(format!(
                "num_ops must be in 2..=6, got {}",
                self.num_ops
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.num_blocks + 7
    }

    pub fn op_token(&self, op: OpChoice) -> usize {
        2 + self.num_blocks + op.code()
    }

    pub fn combiner_token(&self) -> usize {
        2 + self.num_blocks + NUM_OPS_TOTAL
    }

    pub fn num_tokens(&self) -> usize {
        5 * self.num_blocks
    }

    /// The active operation subset (a prefix of [`OpChoice::ALL`]).
    pub fn ops(&self) -> &'static [OpChoice] {
        &OpChoice::ALL[..self.num_ops]
    }

    /// Mixed radices of the `4#B` variable fields, most significant first.
    fn radices(&self) -> impl Iterator<Item = u64> + '_ {
        (1..=self.num_blocks).flat_map(move |b| {
            let inputs = (b + 1) as u64;
            let ops = self.num_ops as u64;
            [inputs, inputs, ops, ops]
        })
    }

    /// Number of cells as a `u64`, if it fits.
    pub fn size_u64(&self) -> Option<u64> {
        self.radices().try_fold(1u64, |acc, r| acc.checked_mul(r))
    }
}

/// Which rule a cell broke.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Violation {
    #[error("cell has {found} blocks, expected {expected}")]
    BlockCount { expected: usize, found: usize },
    #[error("cell was built for {found} ops, space has {expected}")]
    OpCount { expected: usize, found: usize },
    #[error("block {block} field {slot}: input {input} is not an earlier block or previous cell")]
    Input { block: usize, slot: Slot, input: InputRef },
    #[error("block {block} field {slot}: op {op} is outside the {num_ops} active ops")]
    Op {
        block: usize,
        slot: Slot,
        op: OpChoice,
        num_ops: usize,
    },
}

/// A cell genotype.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub blocks: Vec<BlockSpec>,
    pub num_ops: usize,
}

impl CellSpec {
    pub fn new(blocks: Vec<BlockSpec>, num_ops: usize) -> CellSpec {
        CellSpec { blocks, num_ops }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Checks every invariant under `cfg`, reporting the first violation in
    /// block order, then field order.
    pub fn validate(&self, cfg: &SpaceConfig) -> Result<(), Violation> {
        if self.blocks.len() != cfg.num_blocks {
            return Err(Violation::BlockCount {
                expected: cfg.num_blocks,
                found: self.blocks.len(),
            });
        }
        if self.num_ops != cfg.num_ops {
            return Err(Violation::OpCount {
                expected: cfg.num_ops,
                found: self.num_ops,
            });
        }
        for (idx, block) in self.blocks.iter().enumerate() {
            let b = idx + 1;
            for (slot, input) in [(Slot::I1, block.i1), (Slot::I2, block.i2)] {
                if !input.legal_in(b) {
                    return Err(Violation::Input { block: b, slot, input });
                }
            }
            for (slot, op) in [(Slot::O1, block.o1), (Slot::O2, block.o2)] {
                if op.code() >= cfg.num_ops {
                    return Err(Violation::Op {
                        block: b,
                        slot,
                        op,
                        num_ops: cfg.num_ops,
                    });
                }
            }
        }
        Ok(())
    }

    /// Token encoding, `[i1, i2, o1, o2, ADD]` per block.
    pub fn encode_tokens(&self, cfg: &SpaceConfig) -> Result<Vec<usize>, SpaceError> {
        self.validate(cfg)?;
        Ok(self.tokens_unchecked(cfg))
    }

    pub(crate) fn tokens_unchecked(&self, cfg: &SpaceConfig) -> Vec<usize> {
        let mut out = Vec::with_capacity(cfg.num_tokens());
        for block in &self.blocks {
            out.push(block.i1.digit());
            out.push(block.i2.digit());
            out.push(cfg.op_token(block.o1));
            out.push(cfg.op_token(block.o2));
            out.push(cfg.combiner_token());
        }
        out
    }

    /// Position of this cell in the lexicographic token order.
    pub fn index(&self, cfg: &SpaceConfig) -> u64 {
        let digits = self.blocks.iter().flat_map(|blk| {
            [
                blk.i1.digit() as u64,
                blk.i2.digit() as u64,
                blk.o1.code() as u64,
                blk.o2.code() as u64,
            ]
        });
        cfg.radices()
            .zip(digits)
            .fold(0u64, |acc, (radix, digit)| acc * radix + digit)
    }

    /// Inverse of [`CellSpec::index`]. `index` must be below the space size.
    pub fn from_index(cfg: &SpaceConfig, mut index: u64) -> CellSpec {
        let radices: Vec<u64> = cfg.radices().collect();
        let mut digits = vec![0u64; radices.len()];
        for (pos, radix) in radices.iter().enumerate().rev() {
            digits[pos] = index % radix;
            index /= radix;
        }
        let blocks = digits
            .chunks(4)
            .map(|d| BlockSpec {
                i1: InputRef::from_digit(d[0] as usize),
                i2: InputRef::from_digit(d[1] as usize),
                o1: OpChoice::ALL[d[2] as usize],
                o2: OpChoice::ALL[d[3] as usize],
            })
            .collect();
        CellSpec::new(blocks, cfg.num_ops)
    }

    /// Number of variable fields in which two same-shape cells differ.
    pub fn hamming(&self, other: &CellSpec) -> usize {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| {
                usize::from(a.i1 != b.i1)
                    + usize::from(a.i2 != b.i2)
                    + usize::from(a.o1 != b.o1)
                    + usize::from(a.o2 != b.o2)
            })
            .sum()
    }

    /// Parses the canonical text form, e.g. `-2,-1,SEP3,IDENT|1,-1,MAX3,SEP5`.
    pub fn parse(text: &str, cfg: &SpaceConfig) -> Result<CellSpec, SpaceError> {
        let mut blocks = Vec::new();
        for (idx, part) in text.trim().split('|').enumerate() {
            let fields: Vec<&str> = part.split(',').collect();
            if fields.len() != 4 {
                return Err(SpaceError::Parse(format!(
                    "block {} has {} fields, expected 4",
                    idx + 1,
                    fields.len()
                )));
            }
            let input = |s: &str| {
                s.parse::<i64>()
                    .ok()
                    .and_then(InputRef::from_tag)
                    .ok_or_else(|| SpaceError::Parse(format!("bad input tag {s:?}")))
            };
            let op = |s: &str| OpChoice::parse(s).ok_or_else(|| SpaceError::Parse(format!("bad op {s:?}")));
            blocks.push(BlockSpec {
                i1: input(fields[0])?,
                i2: input(fields[1])?,
                o1: op(fields[2])?,
                o2: op(fields[3])?,
            });
        }
        let cell = CellSpec::new(blocks, cfg.num_ops);
        cell.validate(cfg)?;
        Ok(cell)
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (idx, b) in self.blocks.iter().enumerate() {
            if idx > 0 {
                f.write_str("|")?;
            }
            write!(f, "{},{},{},{}", b.i1, b.i2, b.o1, b.o2)?;
        }
        Ok(())
    }
}

/// Inverse of [`CellSpec::encode_tokens`].
pub fn decode_tokens(tokens: &[usize], cfg: &SpaceConfig) -> Result<CellSpec, SpaceError> {
    cfg.check()?;
    if tokens.len() != cfg.num_tokens() {
        return Err(SpaceError::BadLength {
            expected: cfg.num_tokens(),
            found: tokens.len(),
        });
    }
    let op_base = 2 + cfg.num_blocks;
    let input = |position: usize| {
        let id = tokens[position];
        if id < op_base {
            Ok(InputRef::from_digit(id))
        } else {
            Err(SpaceError::OutOfVocabulary { position, id })
        }
    };
    let op = |position: usize| {
        let id = tokens[position];
        id.checked_sub(op_base)
            .filter(|&m| m < NUM_OPS_TOTAL)
            .map(|m| OpChoice::ALL[m])
            .ok_or(SpaceError::OutOfVocabulary { position, id })
    };
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        let base = 5 * b;
        if tokens[base + 4] != cfg.combiner_token() {
            return Err(SpaceError::OutOfVocabulary {
                position: base + 4,
                id: tokens[base + 4],
            });
        }
        blocks.push(BlockSpec {
            i1: input(base)?,
            i2: input(base + 1)?,
            o1: op(base + 2)?,
            o2: op(base + 3)?,
        });
    }
    let cell = CellSpec::new(blocks, cfg.num_ops);
    cell.validate(cfg)?;
    Ok(cell)
}

/// Draws a cell uniformly: each input over its `b + 1` legal choices, each op
/// over the active subset.
pub fn random_cell<R: Rng + ?Sized>(cfg: &SpaceConfig, rng: &mut R) -> CellSpec {
    let blocks = (1..=cfg.num_blocks)
        .map(|b| BlockSpec {
            i1: InputRef::from_digit(rng.random_range(0..=b)),
            i2: InputRef::from_digit(rng.random_range(0..=b)),
            o1: OpChoice::ALL[rng.random_range(0..cfg.num_ops)],
            o2: OpChoice::ALL[rng.random_range(0..cfg.num_ops)],
        })
        .collect();
    CellSpec::new(blocks, cfg.num_ops)
}

/// `(num_ops^#B * prod_{b=1..#B} (b+1))^2`, exactly.
pub fn space_size(cfg: &SpaceConfig) -> BigUint {
    let mut per_node = BigUint::from(1u32);
    for b in 1..=cfg.num_blocks {
        per_node *= BigUint::from(cfg.num_ops) * BigUint::from(b + 1);
    }
    &per_node * &per_node
}

/// Streams every cell once, in lexicographic token order.
pub fn enumerate_space(cfg: &SpaceConfig) -> Result<CellIter, SpaceError> {
    enumerate_space_capped(cfg, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_space_capped(cfg: &SpaceConfig, cap: u64) -> Result<CellIter, SpaceError> {
    cfg.check()?;
    let size = space_size(cfg);
    match cfg.size_u64() {
        Some(n) if n <= cap => Ok(CellIter {
            cfg: *cfg,
            next: 0,
            end: n,
        }),
        _ => Err(SpaceError::TooLarge { size, cap }),
    }
}

#[derive(Debug, Clone)]
pub struct CellIter {
    cfg: SpaceConfig,
    next: u64,
    end: u64,
}

impl Iterator for CellIter {
    type Item = CellSpec;

    fn next(&mut self) -> Option<CellSpec> {
        if self.next >= self.end {
            return None;
        }
        let cell = CellSpec::from_index(&self.cfg, self.next);
        self.next += 1;
        Some(cell)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for CellIter {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn blk(i1: i64, i2: i64, o1: OpChoice, o2: OpChoice) -> BlockSpec {
        BlockSpec {
            i1: InputRef::from_tag(i1).unwrap(),
            i2: InputRef::from_tag(i2).unwrap(),
            o1,
            o2,
        }
    }

    #[test]
    fn one_block_cell_only_reads_previous_cells() {
        let cfg = SpaceConfig::new(1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let cell = random_cell(&cfg, &mut rng);
            for input in [cell.blocks[0].i1, cell.blocks[0].i2] {
                assert!(matches!(input, InputRef::PrevCell | InputRef::PrevPrevCell));
            }
        }
    }

    #[test]
    fn random_cells_always_validate() {
        let cfg = SpaceConfig::new(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            random_cell(&cfg, &mut rng).validate(&cfg).unwrap();
        }
    }

    #[test]
    fn block_three_input_marginal_is_uniform() {
        let cfg = SpaceConfig::new(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0u64; 4];
        for _ in 0..n {
            counts[random_cell(&cfg, &mut rng).blocks[2].i1.digit()] += 1;
        }
        let expected = n as f64 / 4.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}, counts = {counts:?}");
    }

    #[test]
    fn forward_reference_is_reported() {
        let cfg = SpaceConfig::new(2, 6);
        let cell = CellSpec::new(
            vec![
                blk(-2, -1, OpChoice::Sep3, OpChoice::Ident),
                blk(2, -1, OpChoice::Sep3, OpChoice::Ident),
            ],
            6,
        );
        assert_eq!(
            cell.validate(&cfg),
            Err(Violation::Input {
                block: 2,
                slot: Slot::I1,
                input: InputRef::Block(2)
            })
        );
    }

    #[test]
    fn op_outside_active_subset_is_reported() {
        let cfg = SpaceConfig::new(1, 3);
        let cell = CellSpec::new(vec![blk(-2, -1, OpChoice::Sep3, OpChoice::Max3)], 3);
        assert!(matches!(
            cell.validate(&cfg),
            Err(Violation::Op {
                block: 1,
                slot: Slot::O2,
                ..
            })
        ));
    }

    #[test]
    fn op_code_seven_is_out_of_vocabulary() {
        // An op token for code 7 lands past the combiner id.
        let cfg = SpaceConfig::new(1, 6);
        let tokens = [0, 1, 2 + 1 + 7, 8, 9];
        assert!(matches!(
            decode_tokens(&tokens, &cfg),
            Err(SpaceError::OutOfVocabulary { position: 2, .. })
        ));
    }

    #[test]
    fn encode_single_block_by_hand() {
        let cfg = SpaceConfig::new(1, 6);
        let cell = CellSpec::new(vec![blk(-2, -1, OpChoice::Sep3, OpChoice::Ident)], 6);
        assert_eq!(cell.encode_tokens(&cfg).unwrap(), vec![0, 1, 3, 8, 9]);
    }

    #[test]
    fn decode_rejects_bad_length() {
        let cfg = SpaceConfig::new(2, 6);
        assert_eq!(
            decode_tokens(&[0, 1, 4, 4, 10], &cfg),
            Err(SpaceError::BadLength { expected: 10, found: 5 })
        );
    }

    #[test]
    fn space_size_matches_reference_values() {
        assert_eq!(
            space_size(&SpaceConfig::new(5, 6)),
            BigUint::from(31_345_665_638_400u64)
        );
        assert_eq!(space_size(&SpaceConfig::new(1, 6)), BigUint::from(144u32));
        assert_eq!(space_size(&SpaceConfig::new(2, 3)), BigUint::from(2916u32));
    }

    #[test]
    fn enumeration_counts_and_order() {
        let cfg = SpaceConfig::new(2, 3);
        let cells: Vec<_> = enumerate_space(&cfg).unwrap().collect();
        assert_eq!(cells.len(), 2916);
        let encodings: Vec<_> = cells.iter().map(|c| c.encode_tokens(&cfg).unwrap()).collect();
        assert!(encodings.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(enumerate_space(&SpaceConfig::new(1, 2)).unwrap().count(), 16);
    }

    #[test]
    fn enumeration_matches_formula_for_small_spaces() {
        for blocks in 1..=3 {
            for ops in 2..=6 {
                let cfg = SpaceConfig::new(blocks, ops);
                let size = space_size(&cfg);
                if size > BigUint::from(100_000u32) {
                    continue;
                }
                let mut count = 0u64;
                for cell in enumerate_space(&cfg).unwrap() {
                    cell.validate(&cfg).unwrap();
                    count += 1;
                }
                assert_eq!(BigUint::from(count), size, "{cfg:?}");
            }
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let err = enumerate_space(&SpaceConfig::new(5, 6)).unwrap_err();
        assert!(matches!(err, SpaceError::TooLarge { .. }));
    }

    #[test]
    fn text_format_round_trips() {
        let cfg = SpaceConfig::new(2, 6);
        let text = "-2,-1,SEP3,IDENT|1,-1,MAX3,SEP5";
        let cell = CellSpec::parse(text, &cfg).unwrap();
        assert_eq!(cell.to_string(), text);
        assert!(CellSpec::parse("-2,-1,SEP3|1,-1,MAX3,SEP5", &cfg).is_err());
        assert!(CellSpec::parse("-3,-1,SEP3,IDENT|1,-1,MAX3,SEP5", &cfg).is_err());
    }

    #[test]
    fn duplicated_branches_are_permitted() {
        let cfg = SpaceConfig::new(1, 6);
        let cell = CellSpec::new(vec![blk(-1, -1, OpChoice::Sep5, OpChoice::Sep5)], 6);
        assert!(cell.validate(&cfg).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tokens_round_trip(seed in any::<u64>(), blocks in 1usize..7, ops in 2usize..=6) {
            let cfg = SpaceConfig::new(blocks, ops);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let cell = random_cell(&cfg, &mut rng);
                let tokens = cell.encode_tokens(&cfg).unwrap();
                prop_assert_eq!(tokens.len(), 5 * blocks);
                prop_assert!(tokens.iter().all(|&t| t < cfg.vocab_size()));
                prop_assert_eq!(decode_tokens(&tokens, &cfg).unwrap(), cell.clone());
                prop_assert_eq!(CellSpec::parse(&cell.to_string(), &cfg).unwrap(), cell.clone());
                prop_assert_eq!(CellSpec::from_index(&cfg, cell.index(&cfg)), cell);
            }
        }
    }
}
