//! Sequential-construction baseline: a forward LSTM emits the `4#B` fields
//! of a cell one at a time, feeding each choice back as the next input.

use rand::Rng;

use crate::nn::{
    embed, embed_backward, lstm_backward, lstm_step, Categorical, LogitShaping, LstmParams, LstmTape, NnError,
    Parameters, Tensor2,
};
use crate::reinforce::Policy;
use crate::space::{BlockSpec, CellSpec, InputRef, OpChoice, SpaceConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructParams {
    /// `vocab x E`; fed the token of the previous decision.
    pub embedding: Tensor2,
    /// Input at the first step, `E x 1`.
    pub go: Tensor2,
    pub lstm: LstmParams,
    /// One row per input digit; block `b` uses rows `0..=b`.
    pub input_w: Tensor2,
    pub input_b: Tensor2,
    pub op_w: Tensor2,
    pub op_b: Tensor2,
}

impl Parameters for ConstructParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        f("embedding", &self.embedding);
        f("go", &self.go);
        self.lstm.visit(&mut |n, t| f(&format!("lstm.{n}"), t));
        f("input_w", &self.input_w);
        f("input_b", &self.input_b);
        f("op_w", &self.op_w);
        f("op_b", &self.op_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        f("embedding", &mut self.embedding);
        f("go", &mut self.go);
        self.lstm.visit_mut(&mut |n, t| f(&format!("lstm.{n}"), t));
        f("input_w", &mut self.input_w);
        f("input_b", &mut self.input_b);
        f("op_w", &mut self.op_w);
        f("op_b", &mut self.op_b);
    }
}

#[derive(Debug, Clone)]
pub struct ConstructPolicy {
    pub space: SpaceConfig,
    pub shaping: LogitShaping,
    pub params: ConstructParams,
}

struct Decision {
    raw: Vec<f64>,
    dist: Categorical,
    choice: usize,
}

/// One sampled (or rescored) cell with its forward state.
pub struct ConstructEpisode {
    pub cell: CellSpec,
    pub logprob: f64,
    pub entropy: f64,
    /// Token fed at each step after the first.
    fed: Vec<usize>,
    hidden: Vec<Vec<f64>>,
    tape: LstmTape,
    decisions: Vec<Decision>,
}

impl ConstructEpisode {
    pub fn num_decisions(&self) -> usize {
        self.decisions.len()
    }
}

impl ConstructPolicy {
    pub fn new<R: Rng + ?Sized>(space: SpaceConfig, embed_dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        ConstructPolicy {
            space,
            shaping: LogitShaping::default(),
            params: ConstructParams {
                embedding: Tensor2::randn(space.vocab_size(), embed_dim, std, rng),
                go: Tensor2::randn(embed_dim, 1, std, rng),
                lstm: LstmParams::randn(embed_dim, hidden, std, rng),
                input_w: Tensor2::randn(space.num_blocks + 1, hidden, std, rng),
                input_b: Tensor2::randn(space.num_blocks + 1, 1, std, rng),
                op_w: Tensor2::randn(space.num_ops, hidden, std, rng),
                op_b: Tensor2::randn(space.num_ops, 1, std, rng),
            },
        }
    }

    /// Rows of the head used at decision `t`.
    fn head(&self, t: usize) -> (&Tensor2, &Tensor2, usize) {
        let block = t / 4 + 1;
        if t % 4 < 2 {
            (&self.params.input_w, &self.params.input_b, block + 1)
        } else {
            (&self.params.op_w, &self.params.op_b, self.space.num_ops)
        }
    }

    fn token(&self, t: usize, choice: usize) -> usize {
        if t % 4 < 2 {
            InputRef::from_digit(choice).digit()
        } else {
            self.space.op_token(OpChoice::ALL[choice])
        }
    }

    /// Runs the policy, drawing each choice from `pick(t, dist)`.
    fn rollout(
        &self,
        mut pick: impl FnMut(usize, &Categorical) -> Result<usize, NnError>,
    ) -> Result<ConstructEpisode, NnError> {
        let p = &self.params;
        let hid = p.lstm.hidden_size();
        let steps = 4 * self.space.num_blocks;
        let mut h = vec![0.0; hid];
        let mut c = vec![0.0; hid];
        let mut x = p.go.as_slice().to_vec();
        let mut fed = Vec::with_capacity(steps);
        let mut hidden = Vec::with_capacity(steps);
        let mut tape = LstmTape::default();
        let mut decisions = Vec::with_capacity(steps);
        for t in 0..steps {
            lstm_step(&p.lstm, &x, &mut h, &mut c, &mut tape);
            let (w, b, n) = self.head(t);
            let raw: Vec<f64> = (0..n).map(|r| crate::nn::dot(w.row(r), &h) + b.get(r, 0)).collect();
            let dist = Categorical::from_logits(&self.shaping.apply(&raw))?;
            let choice = pick(t, &dist)?;
            if choice >= n {
                return Err(NnError::OutOfRange { index: choice, len: n });
            }
            hidden.push(h.clone());
            decisions.push(Decision { raw, dist, choice });
            if t + 1 < steps {
                let token = self.token(t, choice);
                fed.push(token);
                x = embed(&p.embedding, &[token])?.pop().expect("one row");
            }
        }
        let choices: Vec<usize> = decisions.iter().map(|d| d.choice).collect();
        let blocks = choices
            .chunks(4)
            .map(|d| BlockSpec {
                i1: InputRef::from_digit(d[0]),
                i2: InputRef::from_digit(d[1]),
                o1: OpChoice::ALL[d[2]],
                o2: OpChoice::ALL[d[3]],
            })
            .collect();
        Ok(ConstructEpisode {
            cell: CellSpec::new(blocks, self.space.num_ops),
            logprob: decisions.iter().map(|d| d.dist.log_probs[d.choice]).sum(),
            entropy: decisions.iter().map(|d| d.dist.entropy()).sum(),
            fed,
            hidden,
            tape,
            decisions,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ConstructEpisode, NnError> {
        self.rollout(|_, dist| Ok(dist.sample(rng)))
    }

    /// Rescores a given cell under the current parameters.
    pub fn score(&self, cell: &CellSpec) -> Result<ConstructEpisode, NnError> {
        let choices: Vec<usize> = cell
            .blocks
            .iter()
            .flat_map(|b| [b.i1.digit(), b.i2.digit(), b.o1.code(), b.o2.code()])
            .collect();
        if choices.len() != 4 * self.space.num_blocks {
            return Err(NnError::Shape(format!("cell has {} fields", choices.len())));
        }
        self.rollout(|t, _| Ok(choices[t]))
    }

    /// Gradient of `w_lp * logprob + w_ent * entropy`.
    pub fn backward(&self, ep: &ConstructEpisode, w_lp: f64, w_ent: f64) -> ConstructParams {
        let p = &self.params;
        let mut g = p.zeros_like();
        let hid = p.lstm.hidden_size();
        let mut d_hidden = vec![vec![0.0; hid]; ep.hidden.len()];
        for (t, d) in ep.decisions.iter().enumerate() {
            let d_shaped = d.dist.backward(d.choice, w_lp, w_ent);
            let d_raw = self.shaping.backward(&d.raw, &d_shaped);
            let (w, gw, gb) = if t % 4 < 2 {
                (&p.input_w, &mut g.input_w, &mut g.input_b)
            } else {
                (&p.op_w, &mut g.op_w, &mut g.op_b)
            };
            for (r, &dr) in d_raw.iter().enumerate() {
                crate::nn::axpy(dr, &ep.hidden[t], gw.row_mut(r));
                gb.as_mut_slice()[r] += dr;
                crate::nn::axpy(dr, w.row(r), &mut d_hidden[t]);
            }
        }
        let grads = lstm_backward(&p.lstm, &ep.tape, &d_hidden, &mut g.lstm);
        crate::nn::axpy(1.0, &grads.d_inputs[0], g.go.as_mut_slice());
        embed_backward(&mut g.embedding, &ep.fed, &grads.d_inputs[1..]);
        g
    }
}

impl Policy for ConstructPolicy {
    type Params = ConstructParams;
    type Episode = ConstructEpisode;

    fn episode_stats(&self, ep: &ConstructEpisode) -> (f64, f64) {
        (ep.logprob, ep.entropy)
    }

    fn episode_grad(&self, ep: &ConstructEpisode, w_lp: f64, w_ent: f64) -> ConstructParams {
        self.backward(ep, w_lp, w_ent)
    }

    fn params_mut(&mut self) -> &mut ConstructParams {
        &mut self.params
    }
}
