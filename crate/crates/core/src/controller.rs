//! Reinforced mutation controller.
//!
//! The parent cell's `5#B` tokens are embedded and run through a recurrent
//! encoder (bidirectional by default). For every block the controller then
//! makes two decisions from that one encoding:
//!
//! 1. the router scores the states of `i1, i2, o1, o2` with a shared scalar
//!    head and samples which field to edit;
//! 2. the input mutator (for `i1`/`i2`) scores each legal source
//!    `[H_A^1 .. H_A^{b-1}, H^{c-1}, H^{c-2}]` concatenated with the chosen
//!    field's state, or the op mutator (for `o1`/`o2`) maps the chosen state
//!    to one logit per active op.
//!
//! Every softmax sees logits passed through [`LogitShaping`]. Replacements
//! may equal the current value.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    bidir_backward, bidir_encode, embed, embed_backward, linear, linear_backward, lstm_backward, lstm_forward,
    BidirTape, Categorical, LogitShaping, LstmParams, LstmTape, NnError, Parameters, Tensor2,
};
use crate::space::{CellSpec, InputRef, OpChoice, Slot, SpaceConfig, SpaceError, Violation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("illegal mutation: {0}")]
    IllegalAction(String),
}

impl From<Violation> for ControllerError {
    fn from(v: Violation) -> Self {
        ControllerError::Space(SpaceError::Invalid(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    /// Standard deviation of the normal parameter initialization.
    pub init_std: f64,
    pub shaping: LogitShaping,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            embed_dim: 100,
            hidden: 100,
            bidirectional: true,
            init_std: 0.01,
            shaping: LogitShaping::default(),
        }
    }
}

impl ControllerConfig {
    /// Width of one encoder output state.
    pub fn state_width(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }
}

/// All learnable tensors of the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    /// `vocab x E`
    pub embedding: Tensor2,
    pub fwd: LstmParams,
    /// Absent for the unidirectional variant.
    pub bwd: Option<LstmParams>,
    /// `H^{c-1}`, `D x 1`. Also seeds the encoder's initial hidden state.
    pub begin_prev: Tensor2,
    /// `H^{c-2}`, `D x 1`.
    pub begin_prev_prev: Tensor2,
    /// Router scoring head, `1 x D` and `1 x 1`.
    pub router_w: Tensor2,
    pub router_b: Tensor2,
    /// Input-mutator scoring head over `[H_ID ; candidate]`, `1 x 2D`.
    pub input_w: Tensor2,
    pub input_b: Tensor2,
    /// Op-mutator head, `num_ops x D`.
    pub op_w: Tensor2,
    pub op_b: Tensor2,
}

impl ControllerParams {
    pub fn randn<R: Rng + ?Sized>(space: &SpaceConfig, cfg: &ControllerConfig, rng: &mut R) -> Self {
        let std = cfg.init_std;
        let d = cfg.state_width();
        ControllerParams {
            embedding: Tensor2::randn(space.vocab_size(), cfg.embed_dim, std, rng),
            fwd: LstmParams::randn(cfg.embed_dim, cfg.hidden, std, rng),
            bwd: cfg
                .bidirectional
                .then(|| LstmParams::randn(cfg.embed_dim, cfg.hidden, std, rng)),
            begin_prev: Tensor2::randn(d, 1, std, rng),
            begin_prev_prev: Tensor2::randn(d, 1, std, rng),
            router_w: Tensor2::randn(1, d, std, rng),
            router_b: Tensor2::randn(1, 1, std, rng),
            input_w: Tensor2::randn(1, 2 * d, std, rng),
            input_b: Tensor2::randn(1, 1, std, rng),
            op_w: Tensor2::randn(space.num_ops, d, std, rng),
            op_b: Tensor2::randn(space.num_ops, 1, std, rng),
        }
    }
}

impl Parameters for ControllerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        f("embedding", &self.embedding);
        self.fwd.visit(&mut |n, t| f(&format!("fwd.{n}"), t));
        if let Some(bwd) = &self.bwd {
            bwd.visit(&mut |n, t| f(&format!("bwd.{n}"), t));
        }
        f("begin_prev", &self.begin_prev);
        f("begin_prev_prev", &self.begin_prev_prev);
        f("router_w", &self.router_w);
        f("router_b", &self.router_b);
        f("input_w", &self.input_w);
        f("input_b", &self.input_b);
        f("op_w", &self.op_w);
        f("op_b", &self.op_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        f("embedding", &mut self.embedding);
        self.fwd.visit_mut(&mut |n, t| f(&format!("fwd.{n}"), t));
        if let Some(bwd) = &mut self.bwd {
            bwd.visit_mut(&mut |n, t| f(&format!("bwd.{n}"), t));
        }
        f("begin_prev", &mut self.begin_prev);
        f("begin_prev_prev", &mut self.begin_prev_prev);
        f("router_w", &mut self.router_w);
        f("router_b", &mut self.router_b);
        f("input_w", &mut self.input_w);
        f("input_b", &mut self.input_b);
        f("op_w", &mut self.op_w);
        f("op_b", &mut self.op_b);
    }
}

/// The new value written into the targeted field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    Input(InputRef),
    Op(OpChoice),
}

/// The controller's edit of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationAction {
    /// 1-based block index.
    pub block: usize,
    pub target: Slot,
    pub replacement: Replacement,
    pub router_logprob: f64,
    pub replace_logprob: f64,
    pub router_entropy: f64,
    pub replace_entropy: f64,
}

/// One edit per block, in block order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationTrace {
    pub actions: Vec<MutationAction>,
    pub total_logprob: f64,
    pub total_entropy: f64,
}

impl MutationTrace {
    pub fn from_actions(actions: Vec<MutationAction>) -> MutationTrace {
        let total_logprob = actions.iter().map(|a| a.router_logprob + a.replace_logprob).sum();
        let total_entropy = actions.iter().map(|a| a.router_entropy + a.replace_entropy).sum();
        MutationTrace {
            actions,
            total_logprob,
            total_entropy,
        }
    }

    /// Number of categorical decisions; always twice the action count.
    pub fn num_decisions(&self) -> usize {
        2 * self.actions.len()
    }
}

/// Position of a legal input within the input mutator's candidate list
/// `[block 1 .. block b-1, c-1, c-2]`.
pub fn candidate_index(input: InputRef, block: usize) -> usize {
    match input {
        InputRef::Block(k) => k - 1,
        InputRef::PrevCell => block - 1,
        InputRef::PrevPrevCell => block,
    }
}

pub fn candidate_input(index: usize, block: usize) -> InputRef {
    match index {
        i if i + 1 < block => InputRef::Block(i + 1),
        i if i + 1 == block => InputRef::PrevCell,
        _ => InputRef::PrevPrevCell,
    }
}

/// Applies one edit per block. Each action must target its own block with a
/// replacement of the right kind that is legal there.
pub fn apply_mutation(
    cell: &CellSpec,
    trace: &MutationTrace,
    space: &SpaceConfig,
) -> Result<CellSpec, ControllerError> {
    cell.validate(space)?;
    check_trace_shape(trace, space)?;
    let mut child = cell.clone();
    for action in &trace.actions {
        let blk = &mut child.blocks[action.block - 1];
        match (action.target, action.replacement) {
            (Slot::I1, Replacement::Input(r)) => blk.i1 = r,
            (Slot::I2, Replacement::Input(r)) => blk.i2 = r,
            (Slot::O1, Replacement::Op(op)) => blk.o1 = op,
            (Slot::O2, Replacement::Op(op)) => blk.o2 = op,
            (target, rep) => {
                return Err(ControllerError::IllegalAction(format!(
                    "block {}: {rep:?} cannot replace {target}",
                    action.block
                )))
            }
        }
    }
    child.validate(space)?;
    Ok(child)
}

fn check_trace_shape(trace: &MutationTrace, space: &SpaceConfig) -> Result<(), ControllerError> {
    if trace.actions.len() != space.num_blocks {
        return Err(ControllerError::IllegalAction(format!(
            "{} actions for {} blocks",
            trace.actions.len(),
            space.num_blocks
        )));
    }
    for (idx, a) in trace.actions.iter().enumerate() {
        if a.block != idx + 1 {
            return Err(ControllerError::IllegalAction(format!(
                "action {} addresses block {}",
                idx + 1,
                a.block
            )));
        }
        match a.replacement {
            Replacement::Input(r) if !a.target.is_input() || !r.legal_in(a.block) => {
                return Err(ControllerError::IllegalAction(format!(
                    "block {}: input {r} for {}",
                    a.block, a.target
                )))
            }
            Replacement::Op(op) if a.target.is_input() || op.code() >= space.num_ops => {
                return Err(ControllerError::IllegalAction(format!(
                    "block {}: op {op} for {}",
                    a.block, a.target
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Field whose encoder state is requested: one of the four variable slots or
/// the block's combiner token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenField {
    Slot(Slot),
    Combiner,
}

#[derive(Debug, Clone)]
enum EncoderTape {
    Bidir(BidirTape),
    Forward(LstmTape),
}

/// Encoder output for one parent cell.
#[derive(Debug, Clone)]
pub struct CellEncoding {
    tokens: Vec<usize>,
    embedded: Vec<Vec<f64>>,
    /// One state per token, width `D`.
    pub states: Vec<Vec<f64>>,
    pub begin_prev: Vec<f64>,
    pub begin_prev_prev: Vec<f64>,
    tape: EncoderTape,
}

impl CellEncoding {
    pub fn state(&self, block: usize, field: TokenField) -> &[f64] {
        let offset = match field {
            TokenField::Slot(s) => s.index(),
            TokenField::Combiner => 4,
        };
        &self.states[5 * (block - 1) + offset]
    }

    /// Candidate states for the input mutator of `block`.
    fn candidate(&self, block: usize, index: usize) -> &[f64] {
        match candidate_input(index, block) {
            InputRef::Block(k) => self.state(k, TokenField::Combiner),
            InputRef::PrevCell => &self.begin_prev,
            InputRef::PrevPrevCell => &self.begin_prev_prev,
        }
    }
}

/// Raw and shaped logits of one decision, kept for the backward pass.
struct Decision {
    raw: Vec<f64>,
    dist: Categorical,
}

#[derive(Debug, Clone)]
pub struct MutationController {
    pub space: SpaceConfig,
    pub config: ControllerConfig,
    pub params: ControllerParams,
}

impl MutationController {
    pub fn new<R: Rng + ?Sized>(space: SpaceConfig, config: ControllerConfig, rng: &mut R) -> Self {
        let params = ControllerParams::randn(&space, &config, rng);
        MutationController { space, config, params }
    }

    /// A forward-only counterpart: keeps the embedding and forward LSTM,
    /// drops the backward direction, and re-initializes the begin states and
    /// heads at the narrower state width.
    pub fn unidirectional_variant<R: Rng + ?Sized>(&self, rng: &mut R) -> MutationController {
        let config = ControllerConfig {
            bidirectional: false,
            ..self.config
        };
        let mut params = ControllerParams::randn(&self.space, &config, rng);
        params.embedding = self.params.embedding.clone();
        params.fwd = self.params.fwd.clone();
        MutationController {
            space: self.space,
            config,
            params,
        }
    }

    pub fn encode_cell(&self, cell: &CellSpec) -> Result<CellEncoding, ControllerError> {
        let tokens = cell.encode_tokens(&self.space)?;
        let p = &self.params;
        let embedded = embed(&p.embedding, &tokens)?;
        let hid = self.config.hidden;
        let begin = p.begin_prev.as_slice();
        let (states, tape) = match &p.bwd {
            Some(bwd) => {
                let (s, t) = bidir_encode(&p.fwd, bwd, &embedded, &begin[..hid], &begin[hid..])?;
                (s, EncoderTape::Bidir(t))
            }
            None => {
                let (s, t) = lstm_forward(&p.fwd, &embedded, begin, &vec![0.0; hid])?;
                (s, EncoderTape::Forward(t))
            }
        };
        Ok(CellEncoding {
            tokens,
            embedded,
            states,
            begin_prev: begin.to_vec(),
            begin_prev_prev: p.begin_prev_prev.as_slice().to_vec(),
            tape,
        })
    }

    fn router_decision(&self, enc: &CellEncoding, block: usize) -> Result<Decision, NnError> {
        let p = &self.params;
        let raw = Slot::ALL
            .iter()
            .map(|&s| Ok(linear(&p.router_w, &p.router_b, enc.state(block, TokenField::Slot(s)))?[0]))
            .collect::<Result<Vec<f64>, NnError>>()?;
        let dist = Categorical::from_logits(&self.config.shaping.apply(&raw))?;
        Ok(Decision { raw, dist })
    }

    fn replace_decision(&self, enc: &CellEncoding, block: usize, target: Slot) -> Result<Decision, NnError> {
        let p = &self.params;
        let h_id = enc.state(block, TokenField::Slot(target));
        let raw = if target.is_input() {
            (0..=block)
                .map(|j| {
                    let joint = [h_id, enc.candidate(block, j)].concat();
                    Ok(linear(&p.input_w, &p.input_b, &joint)?[0])
                })
                .collect::<Result<Vec<f64>, NnError>>()?
        } else {
            linear(&p.op_w, &p.op_b, h_id)?
        };
        let dist = Categorical::from_logits(&self.config.shaping.apply(&raw))?;
        Ok(Decision { raw, dist })
    }

    /// Samples one edit per block from a single encoding of `cell`.
    pub fn sample_mutation<R: Rng + ?Sized>(
        &self,
        cell: &CellSpec,
        rng: &mut R,
    ) -> Result<MutationTrace, ControllerError> {
        Ok(self.sample_scored(cell, rng)?.0)
    }

    /// Like [`MutationController::sample_mutation`], also returning the
    /// forward state needed for [`MutationController::score_backward`].
    pub fn sample_scored<R: Rng + ?Sized>(
        &self,
        cell: &CellSpec,
        rng: &mut R,
    ) -> Result<(MutationTrace, TraceScore), ControllerError> {
        let enc = self.encode_cell(cell)?;
        let mut actions = Vec::with_capacity(self.space.num_blocks);
        let mut decisions = Vec::with_capacity(self.space.num_blocks);
        for block in 1..=self.space.num_blocks {
            let router = self.router_decision(&enc, block)?;
            let t = router.dist.sample(rng);
            let target = Slot::ALL[t];
            let replace = self.replace_decision(&enc, block, target)?;
            let r = replace.dist.sample(rng);
            let replacement = if target.is_input() {
                Replacement::Input(candidate_input(r, block))
            } else {
                Replacement::Op(OpChoice::ALL[r])
            };
            actions.push(MutationAction {
                block,
                target,
                replacement,
                router_logprob: router.dist.log_probs[t],
                replace_logprob: replace.dist.log_probs[r],
                router_entropy: router.dist.entropy(),
                replace_entropy: replace.dist.entropy(),
            });
            decisions.push((router, t, replace, r));
        }
        let trace = MutationTrace::from_actions(actions);
        let score = TraceScore {
            logprob: trace.total_logprob,
            entropy: trace.total_entropy,
            enc,
            decisions,
            actions: trace.actions.clone(),
        };
        Ok((trace, score))
    }

    /// Exact log-probability and entropy of `trace` under the current
    /// parameters.
    pub fn trace_logprob(&self, cell: &CellSpec, trace: &MutationTrace) -> Result<(f64, f64), ControllerError> {
        let fwd = self.score_forward(cell, trace)?;
        Ok((fwd.logprob, fwd.entropy))
    }

    /// Forward pass of [`MutationController::trace_logprob`], retaining what
    /// the backward pass needs.
    pub fn score_forward(&self, cell: &CellSpec, trace: &MutationTrace) -> Result<TraceScore, ControllerError> {
        check_trace_shape(trace, &self.space)?;
        let enc = self.encode_cell(cell)?;
        let mut logprob = 0.0;
        let mut entropy = 0.0;
        let mut decisions = Vec::with_capacity(trace.actions.len());
        for a in &trace.actions {
            let router = self.router_decision(&enc, a.block)?;
            let t = a.target.index();
            let replace = self.replace_decision(&enc, a.block, a.target)?;
            let r = match a.replacement {
                Replacement::Input(input) => candidate_index(input, a.block),
                Replacement::Op(op) => op.code(),
            };
            logprob += router.dist.log_probs[t] + replace.dist.log_probs[r];
            entropy += router.dist.entropy() + replace.dist.entropy();
            decisions.push((router, t, replace, r));
        }
        Ok(TraceScore {
            logprob,
            entropy,
            enc,
            decisions,
            actions: trace.actions.clone(),
        })
    }

    /// Gradient of `w_lp * logprob + w_ent * entropy` w.r.t. every parameter.
    pub fn score_backward(&self, score: &TraceScore, w_lp: f64, w_ent: f64) -> ControllerParams {
        let p = &self.params;
        let shaping = &self.config.shaping;
        let enc = &score.enc;
        let d = self.config.state_width();
        let mut g = p.zeros_like();
        let mut d_states = vec![vec![0.0; d]; enc.states.len()];
        let mut d_begin_prev = vec![0.0; d];
        let mut d_begin_prev_prev = vec![0.0; d];
        let state_pos = |block: usize, offset: usize| 5 * (block - 1) + offset;

        for (a, (router, t, replace, r)) in score.actions.iter().zip(&score.decisions) {
            let b = a.block;
            let d_shaped = router.dist.backward(*t, w_lp, w_ent);
            let d_raw = shaping.backward(&router.raw, &d_shaped);
            for (slot, &dr) in Slot::ALL.iter().zip(&d_raw) {
                let pos = state_pos(b, slot.index());
                let dx = linear_backward(&p.router_w, &enc.states[pos], &[dr], &mut g.router_w, &mut g.router_b);
                crate::nn::axpy(1.0, &dx, &mut d_states[pos]);
            }

            let d_shaped = replace.dist.backward(*r, w_lp, w_ent);
            let d_raw = shaping.backward(&replace.raw, &d_shaped);
            let id_pos = state_pos(b, a.target.index());
            if a.target.is_input() {
                for (j, &dr) in d_raw.iter().enumerate() {
                    let joint = [enc.states[id_pos].as_slice(), enc.candidate(b, j)].concat();
                    let dx = linear_backward(&p.input_w, &joint, &[dr], &mut g.input_w, &mut g.input_b);
                    crate::nn::axpy(1.0, &dx[..d], &mut d_states[id_pos]);
                    let d_cand = &dx[d..];
                    match candidate_input(j, b) {
                        InputRef::Block(k) => crate::nn::axpy(1.0, d_cand, &mut d_states[state_pos(k, 4)]),
                        InputRef::PrevCell => crate::nn::axpy(1.0, d_cand, &mut d_begin_prev),
                        InputRef::PrevPrevCell => crate::nn::axpy(1.0, d_cand, &mut d_begin_prev_prev),
                    }
                }
            } else {
                let dx = linear_backward(&p.op_w, &enc.states[id_pos], &d_raw, &mut g.op_w, &mut g.op_b);
                crate::nn::axpy(1.0, &dx, &mut d_states[id_pos]);
            }
        }

        let hid = self.config.hidden;
        let d_embedded = match (&enc.tape, &p.bwd, &mut g.bwd) {
            (EncoderTape::Bidir(tape), Some(bwd), Some(g_bwd)) => {
                let grads = bidir_backward(&p.fwd, bwd, tape, &d_states, &mut g.fwd, g_bwd);
                crate::nn::axpy(1.0, &grads.d_h0_fwd, &mut d_begin_prev[..hid]);
                crate::nn::axpy(1.0, &grads.d_h0_bwd, &mut d_begin_prev[hid..]);
                grads.d_inputs
            }
            (EncoderTape::Forward(tape), None, None) => {
                let grads = lstm_backward(&p.fwd, tape, &d_states, &mut g.fwd);
                crate::nn::axpy(1.0, &grads.d_h0, &mut d_begin_prev);
                grads.d_inputs
            }
            _ => unreachable!("encoder tape does not match parameter layout"),
        };
        debug_assert_eq!(d_embedded.len(), enc.embedded.len());
        embed_backward(&mut g.embedding, &enc.tokens, &d_embedded);
        crate::nn::axpy(1.0, &d_begin_prev, g.begin_prev.as_mut_slice());
        crate::nn::axpy(1.0, &d_begin_prev_prev, g.begin_prev_prev.as_mut_slice());
        g
    }

    /// Router distribution over `[i1, i2, o1, o2]` for each block.
    pub fn router_probs(&self, cell: &CellSpec) -> Result<Vec<Vec<f64>>, ControllerError> {
        let enc = self.encode_cell(cell)?;
        (1..=self.space.num_blocks)
            .map(|b| Ok(self.router_decision(&enc, b)?.dist.probs))
            .collect()
    }

    /// Replacement distribution of `block` given the router chose `target`.
    pub fn replacement_probs(&self, cell: &CellSpec, block: usize, target: Slot) -> Result<Vec<f64>, ControllerError> {
        let enc = self.encode_cell(cell)?;
        Ok(self.replace_decision(&enc, block, target)?.dist.probs)
    }
}

/// A scored trace with the intermediate values needed for gradients.
pub struct TraceScore {
    pub logprob: f64,
    pub entropy: f64,
    enc: CellEncoding,
    decisions: Vec<(Decision, usize, Decision, usize)>,
    actions: Vec<MutationAction>,
}

/// Uniform random mutation: per block a uniformly chosen field and a
/// uniformly chosen legal replacement. Log-probs and entropies describe that
/// uniform policy.
pub fn random_mutation<R: Rng + ?Sized>(space: &SpaceConfig, rng: &mut R) -> MutationTrace {
    let actions = (1..=space.num_blocks)
        .map(|block| {
            let target = Slot::ALL[rng.random_range(0..4)];
            let (replacement, n) = if target.is_input() {
                let j = rng.random_range(0..=block);
                (Replacement::Input(candidate_input(j, block)), block + 1)
            } else {
                let k = rng.random_range(0..space.num_ops);
                (Replacement::Op(OpChoice::ALL[k]), space.num_ops)
            };
            MutationAction {
                block,
                target,
                replacement,
                router_logprob: -(4f64).ln(),
                replace_logprob: -(n as f64).ln(),
                router_entropy: (4f64).ln(),
                replace_entropy: (n as f64).ln(),
            }
        })
        .collect();
    MutationTrace::from_actions(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::space::{random_cell, BlockSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(space: SpaceConfig, bidirectional: bool, std: f64, seed: u64) -> MutationController {
        let cfg = ControllerConfig {
            embed_dim: 4,
            hidden: 4,
            bidirectional,
            init_std: std,
            ..ControllerConfig::default()
        };
        MutationController::new(space, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn one_block_encoding_has_five_states() {
        let space = SpaceConfig::new(1, 6);
        let ctl = tiny(space, true, 0.3, 0);
        let cell = random_cell(&space, &mut ChaCha8Rng::seed_from_u64(1));
        let enc = ctl.encode_cell(&cell).unwrap();
        assert_eq!(enc.states.len(), 5);
        assert!(enc.states.iter().all(|s| s.len() == 8));
        assert_eq!(enc.begin_prev.len(), 8);
        assert_eq!(enc.begin_prev_prev.len(), 8);
    }

    #[test]
    fn single_token_change_moves_every_state() {
        let space = SpaceConfig::new(3, 6);
        let ctl = tiny(space, true, 0.3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_cell(&space, &mut rng);
        let mut b = a.clone();
        b.blocks[1].o1 = if a.blocks[1].o1 == OpChoice::Sep3 {
            OpChoice::Sep7
        } else {
            OpChoice::Sep3
        };
        let ea = ctl.encode_cell(&a).unwrap();
        let eb = ctl.encode_cell(&b).unwrap();
        for (sa, sb) in ea.states.iter().zip(&eb.states) {
            assert_ne!(sa, sb);
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let space = SpaceConfig::new(2, 4);
        let mut ctl = tiny(space, true, 0.3, 4);
        ctl.params.embedding.fill(0.0);
        for lstm in [&mut ctl.params.fwd, ctl.params.bwd.as_mut().unwrap()] {
            lstm.visit_mut(&mut |_, t| t.fill(0.0));
        }
        let cell = random_cell(&space, &mut ChaCha8Rng::seed_from_u64(0));
        let enc = ctl.encode_cell(&cell).unwrap();
        assert!(enc.states.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn first_block_input_mutation_is_two_way() {
        let space = SpaceConfig::new(3, 6);
        let ctl = tiny(space, true, 0.3, 5);
        let cell = random_cell(&space, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(ctl.replacement_probs(&cell, 1, Slot::I1).unwrap().len(), 2);
        assert_eq!(ctl.replacement_probs(&cell, 3, Slot::I2).unwrap().len(), 4);
        assert_eq!(ctl.replacement_probs(&cell, 2, Slot::O1).unwrap().len(), 6);
        assert_eq!(candidate_input(0, 1), InputRef::PrevCell);
        assert_eq!(candidate_input(1, 1), InputRef::PrevPrevCell);
    }

    #[test]
    fn candidate_indices_round_trip() {
        for block in 1..6 {
            for j in 0..=block {
                let input = candidate_input(j, block);
                assert!(input.legal_in(block));
                assert_eq!(candidate_index(input, block), j);
            }
        }
    }

    #[test]
    fn sampled_mutations_are_legal_and_rescorable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..200 {
            let space = SpaceConfig::new(1 + trial % 4, 2 + trial % 5);
            let ctl = tiny(space, trial % 2 == 0, 1.0, trial as u64);
            let cell = random_cell(&space, &mut rng);
            let trace = ctl.sample_mutation(&cell, &mut rng).unwrap();
            assert_eq!(trace.actions.len(), space.num_blocks);
            assert_eq!(trace.num_decisions(), 2 * space.num_blocks);
            let child = apply_mutation(&cell, &trace, &space).unwrap();
            assert!(child.hamming(&cell) <= space.num_blocks);
            let (lp, ent) = ctl.trace_logprob(&cell, &trace).unwrap();
            assert!((lp - trace.total_logprob).abs() < 1e-9);
            assert!((ent - trace.total_entropy).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_is_bounded_by_uniform() {
        let space = SpaceConfig::new(3, 5);
        let ctl = tiny(space, true, 1.0, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let cell = random_cell(&space, &mut rng);
            let trace = ctl.sample_mutation(&cell, &mut rng).unwrap();
            let bound: f64 = trace
                .actions
                .iter()
                .map(|a| {
                    let n = if a.target.is_input() {
                        a.block + 1
                    } else {
                        space.num_ops
                    };
                    4f64.ln() + (n as f64).ln()
                })
                .sum();
            assert!(trace.total_entropy <= bound + 1e-12);
        }
    }

    #[test]
    fn no_op_replacement_keeps_parent() {
        let space = SpaceConfig::new(2, 6);
        let cell = CellSpec::new(
            vec![
                BlockSpec {
                    i1: InputRef::PrevPrevCell,
                    i2: InputRef::PrevCell,
                    o1: OpChoice::Sep3,
                    o2: OpChoice::Ident,
                },
                BlockSpec {
                    i1: InputRef::Block(1),
                    i2: InputRef::PrevCell,
                    o1: OpChoice::Max3,
                    o2: OpChoice::Sep5,
                },
            ],
            6,
        );
        let action = |block, target, replacement| MutationAction {
            block,
            target,
            replacement,
            router_logprob: 0.0,
            replace_logprob: 0.0,
            router_entropy: 0.0,
            replace_entropy: 0.0,
        };
        let trace = MutationTrace::from_actions(vec![
            action(1, Slot::I2, Replacement::Input(InputRef::PrevCell)),
            action(2, Slot::O1, Replacement::Op(OpChoice::Max3)),
        ]);
        assert_eq!(apply_mutation(&cell, &trace, &space).unwrap(), cell);

        let bad = MutationTrace::from_actions(vec![
            action(1, Slot::I1, Replacement::Input(InputRef::Block(1))),
            action(2, Slot::O1, Replacement::Op(OpChoice::Max3)),
        ]);
        assert!(apply_mutation(&cell, &bad, &space).is_err());
        let kind = MutationTrace::from_actions(vec![
            action(1, Slot::O1, Replacement::Input(InputRef::PrevCell)),
            action(2, Slot::O1, Replacement::Op(OpChoice::Max3)),
        ]);
        assert!(apply_mutation(&cell, &kind, &space).is_err());
    }

    #[test]
    fn trace_gradients_match_finite_differences() {
        for (seed, bidirectional) in [(21, true), (22, false)] {
            let space = SpaceConfig::new(2, 4);
            let ctl = tiny(space, bidirectional, 0.5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let cell = random_cell(&space, &mut rng);
            let trace = ctl.sample_mutation(&cell, &mut rng).unwrap();
            let score = ctl.score_forward(&cell, &trace).unwrap();
            let grads = ctl.score_backward(&score, 1.3, -0.4);
            let report = gradcheck(&ctl.params, &grads, 1e-5, |p| {
                let probe = MutationController {
                    params: p.clone(),
                    ..ctl.clone()
                };
                let (lp, ent) = probe.trace_logprob(&cell, &trace).unwrap();
                1.3 * lp - 0.4 * ent
            });
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn shaped_router_probabilities_stay_bounded() {
        let space = SpaceConfig::new(3, 6);
        let ctl = tiny(space, true, 5.0, 30);
        let cell = random_cell(&space, &mut ChaCha8Rng::seed_from_u64(31));
        for probs in ctl.router_probs(&cell).unwrap() {
            let max = probs.iter().cloned().fold(0.0, f64::max);
            let min = probs.iter().cloned().fold(1.0, f64::min);
            assert!(max / min <= 5f64.exp() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn unidirectional_variant_narrows_heads() {
        let space = SpaceConfig::new(2, 3);
        let ctl = tiny(space, true, 0.1, 40);
        let uni = ctl.unidirectional_variant(&mut ChaCha8Rng::seed_from_u64(41));
        assert!(uni.params.bwd.is_none());
        assert_eq!(uni.params.router_w.cols(), 4);
        assert_eq!(uni.params.input_w.cols(), 8);
        assert_eq!(uni.params.embedding, ctl.params.embedding);
        let cell = random_cell(&space, &mut ChaCha8Rng::seed_from_u64(42));
        let trace = uni.sample_mutation(&cell, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        apply_mutation(&cell, &trace, &space).unwrap();
    }

    #[test]
    fn trace_serializes_as_json() {
        let space = SpaceConfig::new(2, 3);
        let trace = random_mutation(&space, &mut ChaCha8Rng::seed_from_u64(0));
        let text = serde_json::to_string(&trace).unwrap();
        let back: MutationTrace = serde_json::from_str(&text).unwrap();
        assert_eq!(back, trace);
    }
}
