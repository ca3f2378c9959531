//! Embedding lookup, dense heads, logit shaping and categorical sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, NnError, Tensor2};

/// Gathers rows of `table`.
pub fn embed(table: &Tensor2, ids: &[usize]) -> Result<Vec<Vec<f64>>, NnError> {
    ids.iter()
        .map(|&id| {
            if id < table.rows() {
                Ok(table.row(id).to_vec())
            } else {
                Err(NnError::OutOfRange {
                    index: id,
                    len: table.rows(),
                })
            }
        })
        .collect()
}

/// Scatters `d_out` back into the rows of `grad_table`.
pub fn embed_backward(grad_table: &mut Tensor2, ids: &[usize], d_out: &[Vec<f64>]) {
    for (&id, d) in ids.iter().zip(d_out) {
        axpy(1.0, d, grad_table.row_mut(id));
    }
}

/// `w * x + b` with `w: out x in`, `b: out x 1`.
pub fn linear(w: &Tensor2, b: &Tensor2, x: &[f64]) -> Result<Vec<f64>, NnError> {
    if w.cols() != x.len() || b.rows() != w.rows() || b.cols() != 1 {
        return Err(NnError::Shape(format!(
            "linear {:?} + {:?} applied to width {}",
            w.shape(),
            b.shape(),
            x.len()
        )));
    }
    let mut y = b.as_slice().to_vec();
    w.matvec_acc(x, &mut y);
    Ok(y)
}

/// Accumulates parameter gradients of `linear` and returns `dL/dx`.
pub fn linear_backward(w: &Tensor2, x: &[f64], dy: &[f64], grad_w: &mut Tensor2, grad_b: &mut Tensor2) -> Vec<f64> {
    grad_w.add_outer(dy, x);
    axpy(1.0, dy, grad_b.as_mut_slice());
    let mut dx = vec![0.0; x.len()];
    w.matvec_t_acc(dy, &mut dx);
    dx
}

/// `tanh_constant * tanh(raw / temperature)`, which bounds every logit to
/// `[-tanh_constant, tanh_constant]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitShaping {
    pub tanh_constant: f64,
    pub temperature: f64,
}

impl Default for LogitShaping {
    fn default() -> Self {
        LogitShaping {
            tanh_constant: 2.5,
            temperature: 5.0,
        }
    }
}

impl LogitShaping {
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .map(|r| self.tanh_constant * (r / self.temperature).tanh())
            .collect()
    }

    /// Chain rule through the shaping: returns `dL/draw` given `dL/dshaped`.
    pub fn backward(&self, raw: &[f64], d_shaped: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(d_shaped)
            .map(|(r, d)| {
                let t = (r / self.temperature).tanh();
                d * self.tanh_constant * (1.0 - t * t) / self.temperature
            })
            .collect()
    }
}

/// `2.5 * tanh(raw / 5.0)`.
pub fn shape_logits(raw: &[f64]) -> Vec<f64> {
    LogitShaping::default().apply(raw)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A categorical distribution over logits, with log-probabilities computed
/// stably.
#[derive(Debug, Clone)]
pub struct Categorical {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Categorical {
    pub fn from_logits(logits: &[f64]) -> Result<Categorical, NnError> {
        if logits.is_empty() {
            return Err(NnError::Shape("empty logits".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(NnError::NonFinite("logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|l| l - log_z).collect();
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        Ok(Categorical { probs, log_probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, lp)| p * lp)
            .sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the cumulative sum.
        self.probs.len() - 1
    }

    /// Gradient w.r.t. the logits of `w_lp * log p[choice] + w_ent * entropy`.
    pub fn backward(&self, choice: usize, w_lp: f64, w_ent: f64) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .zip(&self.log_probs)
            .enumerate()
            .map(|(k, (p, lp))| {
                let d_lp = if k == choice { 1.0 - p } else { -p };
                let d_ent = -p * (lp + h);
                w_lp * d_lp + w_ent * d_ent
            })
            .collect()
    }
}

/// One categorical draw: `(index, log-prob, entropy)`.
pub fn softmax_sample<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Result<(usize, f64, f64), NnError> {
    let dist = Categorical::from_logits(logits)?;
    let idx = dist.sample(rng);
    Ok((idx, dist.log_probs[idx], dist.entropy()))
}
