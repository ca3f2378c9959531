//! LSTM recurrence with back-propagation through time, plus a bidirectional
//! wrapper.
//!
//! Gate rows are stacked `[input, forget, candidate, output]`, each `H` rows
//! tall.

use rand::Rng;

use super::{sigmoid, NnError, Parameters, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4H x E`
    pub w_ih: Tensor2,
    /// `4H x H`
    pub w_hh: Tensor2,
    /// `4H x 1`
    pub bias: Tensor2,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_ih: Tensor2::zeros(4 * hidden, input),
            w_hh: Tensor2::zeros(4 * hidden, hidden),
            bias: Tensor2::zeros(4 * hidden, 1),
        }
    }

    pub fn randn<R: Rng + ?Sized>(input: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        LstmParams {
            w_ih: Tensor2::randn(4 * hidden, input, std, rng),
            w_hh: Tensor2::randn(4 * hidden, hidden, std, rng),
            bias: Tensor2::randn(4 * hidden, 1, std, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.cols()
    }
}

impl Parameters for LstmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        f("w_ih", &self.w_ih);
        f("w_hh", &self.w_hh);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        f("w_ih", &mut self.w_ih);
        f("w_hh", &mut self.w_hh);
        f("bias", &mut self.bias);
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, `[i, f, g, o]`, length `4H`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Everything the backward pass needs from one forward run.
#[derive(Debug, Clone, Default)]
pub struct LstmTape {
    steps: Vec<StepCache>,
}

impl LstmTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Gradients flowing out of an LSTM run.
#[derive(Debug, Clone)]
pub struct LstmInputGrads {
    pub d_inputs: Vec<Vec<f64>>,
    pub d_h0: Vec<f64>,
    pub d_c0: Vec<f64>,
}

fn check_inputs(params: &LstmParams, inputs: &[Vec<f64>], h0: &[f64], c0: &[f64]) -> Result<(), NnError> {
    let hidden = params.hidden_size();
    if h0.len() != hidden || c0.len() != hidden {
        return Err(NnError::Shape(format!(
            "initial state widths {}/{} for hidden size {hidden}",
            h0.len(),
            c0.len()
        )));
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != params.input_size()) {
        return Err(NnError::Shape(format!(
            "input width {} for input size {}",
            x.len(),
            params.input_size()
        )));
    }
    Ok(())
}

/// Advances one step from `(h, c)` in place, recording it on `tape`.
pub fn lstm_step(params: &LstmParams, x: &[f64], h: &mut Vec<f64>, c: &mut Vec<f64>, tape: &mut LstmTape) {
    let hid = params.hidden_size();
    let mut gates = params.bias.as_slice().to_vec();
    params.w_ih.matvec_acc(x, &mut gates);
    params.w_hh.matvec_acc(h, &mut gates);
    for (k, g) in gates.iter_mut().enumerate() {
        *g = if (2 * hid..3 * hid).contains(&k) {
            g.tanh()
        } else {
            sigmoid(*g)
        };
    }
    let mut c_new = vec![0.0; hid];
    let mut tanh_c = vec![0.0; hid];
    let mut h_new = vec![0.0; hid];
    for j in 0..hid {
        let (i, f, g, o) = (gates[j], gates[hid + j], gates[2 * hid + j], gates[3 * hid + j]);
        c_new[j] = f * c[j] + i * g;
        tanh_c[j] = c_new[j].tanh();
        h_new[j] = o * tanh_c[j];
    }
    tape.steps.push(StepCache {
        x: x.to_vec(),
        h_prev: std::mem::replace(h, h_new),
        c_prev: std::mem::replace(c, c_new),
        gates,
        tanh_c,
    });
}

/// Runs the recurrence over `inputs` and returns every hidden state.
pub fn lstm_forward(
    params: &LstmParams,
    inputs: &[Vec<f64>],
    h0: &[f64],
    c0: &[f64],
) -> Result<(Vec<Vec<f64>>, LstmTape), NnError> {
    check_inputs(params, inputs, h0, c0)?;
    let mut h = h0.to_vec();
    let mut c = c0.to_vec();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut tape = LstmTape {
        steps: Vec::with_capacity(inputs.len()),
    };
    for x in inputs {
        lstm_step(params, x, &mut h, &mut c, &mut tape);
        outputs.push(h.clone());
    }
    Ok((outputs, tape))
}

/// Back-propagates `d_hidden` (one gradient per output state) through time,
/// accumulating parameter gradients into `grads`.
pub fn lstm_backward(
    params: &LstmParams,
    tape: &LstmTape,
    d_hidden: &[Vec<f64>],
    grads: &mut LstmParams,
) -> LstmInputGrads {
    assert_eq!(d_hidden.len(), tape.steps.len());
    let hid = params.hidden_size();
    let mut dh_next = vec![0.0; hid];
    let mut dc_next = vec![0.0; hid];
    let mut d_inputs = vec![Vec::new(); tape.steps.len()];
    let mut dz = vec![0.0; 4 * hid];
    for (t, step) in tape.steps.iter().enumerate().rev() {
        for j in 0..hid {
            let (i, f, g, o) = (
                step.gates[j],
                step.gates[hid + j],
                step.gates[2 * hid + j],
                step.gates[3 * hid + j],
            );
            let dh = d_hidden[t][j] + dh_next[j];
            let tc = step.tanh_c[j];
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            dz[j] = dc * g * i * (1.0 - i);
            dz[hid + j] = dc * step.c_prev[j] * f * (1.0 - f);
            dz[2 * hid + j] = dc * i * (1.0 - g * g);
            dz[3 * hid + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        grads.w_ih.add_outer(&dz, &step.x);
        grads.w_hh.add_outer(&dz, &step.h_prev);
        super::axpy(1.0, &dz, grads.bias.as_mut_slice());
        let mut dx = vec![0.0; params.input_size()];
        params.w_ih.matvec_t_acc(&dz, &mut dx);
        d_inputs[t] = dx;
        let mut dh_prev = vec![0.0; hid];
        params.w_hh.matvec_t_acc(&dz, &mut dh_prev);
        dh_next = dh_prev;
    }
    LstmInputGrads {
        d_inputs,
        d_h0: dh_next,
        d_c0: dc_next,
    }
}

#[derive(Debug, Clone)]
pub struct BidirTape {
    fwd: LstmTape,
    bwd: LstmTape,
}

/// Encodes left-to-right and right-to-left; position `t` of the output is
/// `concat(fwd_t, bwd_t)`, width `2H`. Cell states start at zero.
pub fn bidir_encode(
    fwd: &LstmParams,
    bwd: &LstmParams,
    inputs: &[Vec<f64>],
    h0_fwd: &[f64],
    h0_bwd: &[f64],
) -> Result<(Vec<Vec<f64>>, BidirTape), NnError> {
    if fwd.hidden_size() != bwd.hidden_size() {
        return Err(NnError::Shape("direction hidden sizes differ".into()));
    }
    let hid = fwd.hidden_size();
    let zeros = vec![0.0; hid];
    let (f_out, f_tape) = lstm_forward(fwd, inputs, h0_fwd, &zeros)?;
    let reversed: Vec<Vec<f64>> = inputs.iter().rev().cloned().collect();
    let (b_out, b_tape) = lstm_forward(bwd, &reversed, h0_bwd, &zeros)?;
    let n = inputs.len();
    let out = (0..n)
        .map(|t| {
            let mut v = f_out[t].clone();
            v.extend_from_slice(&b_out[n - 1 - t]);
            v
        })
        .collect();
    Ok((
        out,
        BidirTape {
            fwd: f_tape,
            bwd: b_tape,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct BidirInputGrads {
    pub d_inputs: Vec<Vec<f64>>,
    pub d_h0_fwd: Vec<f64>,
    pub d_h0_bwd: Vec<f64>,
}

pub fn bidir_backward(
    fwd: &LstmParams,
    bwd: &LstmParams,
    tape: &BidirTape,
    d_out: &[Vec<f64>],
    g_fwd: &mut LstmParams,
    g_bwd: &mut LstmParams,
) -> BidirInputGrads {
    let hid = fwd.hidden_size();
    let n = d_out.len();
    let d_f: Vec<Vec<f64>> = d_out.iter().map(|d| d[..hid].to_vec()).collect();
    let d_b: Vec<Vec<f64>> = (0..n).map(|t| d_out[n - 1 - t][hid..].to_vec()).collect();
    let gf = lstm_backward(fwd, &tape.fwd, &d_f, g_fwd);
    let gb = lstm_backward(bwd, &tape.bwd, &d_b, g_bwd);
    let d_inputs = (0..n)
        .map(|t| {
            let mut d = gf.d_inputs[t].clone();
            super::axpy(1.0, &gb.d_inputs[n - 1 - t], &mut d);
            d
        })
        .collect();
    BidirInputGrads {
        d_inputs,
        d_h0_fwd: gf.d_h0,
        d_h0_bwd: gb.d_h0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| Tensor2::randn(width, 1, 1.0, rng).as_slice().to_vec())
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let p = LstmParams::zeros(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = random_inputs(&mut rng, 4, 3);
        let (hs, _) = lstm_forward(&p, &xs, &[0.0; 5], &[0.0; 5]).unwrap();
        assert!(hs.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // E = 1, H = 2, nonzero h0/c0 so every term participates.
        let mut p = LstmParams::zeros(1, 2);
        let w_ih = [0.5, -0.3, 0.2, 0.1, -0.4, 0.7, 0.6, -0.2];
        let w_hh = [
            0.1, 0.2, //
            -0.1, 0.3, //
            0.05, -0.2, //
            0.4, 0.1, //
            -0.3, 0.2, //
            0.2, 0.2, //
            0.1, -0.5, //
            0.3, 0.0,
        ];
        let bias = [0.01, 0.02, -0.03, 0.04, 0.05, -0.06, 0.07, 0.08];
        p.w_ih.as_mut_slice().copy_from_slice(&w_ih);
        p.w_hh.as_mut_slice().copy_from_slice(&w_hh);
        p.bias.as_mut_slice().copy_from_slice(&bias);
        let x = 0.9;
        let h0 = [0.2, -0.1];
        let c0 = [0.3, 0.5];

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let pre = |row: usize| w_ih[row] * x + w_hh[2 * row] * h0[0] + w_hh[2 * row + 1] * h0[1] + bias[row];
        let mut expected = [0.0; 2];
        for j in 0..2 {
            let i = sig(pre(j));
            let f = sig(pre(2 + j));
            let g = pre(4 + j).tanh();
            let o = sig(pre(6 + j));
            let c = f * c0[j] + i * g;
            expected[j] = o * c.tanh();
        }

        let (hs, _) = lstm_forward(&p, &[vec![x]], &h0, &c0).unwrap();
        for j in 0..2 {
            assert!((hs[0][j] - expected[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = LstmParams::zeros(3, 2);
        assert!(lstm_forward(&p, &[vec![1.0, 2.0]], &[0.0; 2], &[0.0; 2]).is_err());
        assert!(lstm_forward(&p, &[vec![1.0, 2.0, 3.0]], &[0.0; 3], &[0.0; 2]).is_err());
    }

    // Scalar objective: weighted sum of all hidden states.
    fn weighted_sum(hs: &[Vec<f64>], weights: &[Vec<f64>]) -> f64 {
        hs.iter().zip(weights).map(|(h, w)| crate::nn::dot(h, w)).sum()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LstmParams::randn(4, 4, 0.5, &mut rng);
        let xs = random_inputs(&mut rng, 5, 4);
        let weights = random_inputs(&mut rng, 5, 4);
        let h0 = Tensor2::randn(4, 1, 0.5, &mut rng).as_slice().to_vec();
        let c0 = Tensor2::randn(4, 1, 0.5, &mut rng).as_slice().to_vec();

        let (_, tape) = lstm_forward(&p, &xs, &h0, &c0).unwrap();
        let mut grads = p.zeros_like();
        let dx = lstm_backward(&p, &tape, &weights, &mut grads);

        let report = gradcheck(&p, &grads, 1e-5, |q| {
            let (hs, _) = lstm_forward(q, &xs, &h0, &c0).unwrap();
            weighted_sum(&hs, &weights)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");

        // Input, h0 and c0 gradients through the same finite-difference lens.
        let f = |xs: &[Vec<f64>], h0: &[f64], c0: &[f64]| {
            let (hs, _) = lstm_forward(&p, xs, h0, c0).unwrap();
            weighted_sum(&hs, &weights)
        };
        let h = 1e-5;
        for t in 0..5 {
            for k in 0..4 {
                let mut up = xs.clone();
                up[t][k] += h;
                let mut down = xs.clone();
                down[t][k] -= h;
                let num = (f(&up, &h0, &c0) - f(&down, &h0, &c0)) / (2.0 * h);
                assert!((num - dx.d_inputs[t][k]).abs() < 1e-8);
            }
        }
        for k in 0..4 {
            let (mut hu, mut hd) = (h0.clone(), h0.clone());
            hu[k] += h;
            hd[k] -= h;
            let num = (f(&xs, &hu, &c0) - f(&xs, &hd, &c0)) / (2.0 * h);
            assert!((num - dx.d_h0[k]).abs() < 1e-8);
            let (mut cu, mut cd) = (c0.clone(), c0.clone());
            cu[k] += h;
            cd[k] -= h;
            let num = (f(&xs, &h0, &cu) - f(&xs, &h0, &cd)) / (2.0 * h);
            assert!((num - dx.d_c0[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn bidir_length_one_is_two_single_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = LstmParams::randn(3, 2, 0.5, &mut rng);
        let b = LstmParams::randn(3, 2, 0.5, &mut rng);
        let x = vec![vec![0.3, -0.2, 0.9]];
        let (out, _) = bidir_encode(&f, &b, &x, &[0.0; 2], &[0.0; 2]).unwrap();
        let (hf, _) = lstm_forward(&f, &x, &[0.0; 2], &[0.0; 2]).unwrap();
        let (hb, _) = lstm_forward(&b, &x, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(out[0], [hf[0].clone(), hb[0].clone()].concat());
    }

    #[test]
    fn bidir_reversal_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = LstmParams::randn(3, 2, 0.5, &mut rng);
        let b = LstmParams::randn(3, 2, 0.5, &mut rng);
        let xs = random_inputs(&mut rng, 6, 3);
        let rev: Vec<_> = xs.iter().rev().cloned().collect();
        let (out, _) = bidir_encode(&f, &b, &xs, &[0.0; 2], &[0.0; 2]).unwrap();
        // Swapping the parameter sets and reversing the input mirrors the output.
        let (out_rev, _) = bidir_encode(&b, &f, &rev, &[0.0; 2], &[0.0; 2]).unwrap();
        let n = xs.len();
        for t in 0..n {
            let mirrored = &out_rev[n - 1 - t];
            assert_eq!(out[t][..2], mirrored[2..]);
            assert_eq!(out[t][2..], mirrored[..2]);
        }
    }

    #[derive(Clone)]
    struct Pair(LstmParams, LstmParams);

    impl Parameters for Pair {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
            self.0.visit(f);
            self.1.visit(f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
            self.0.visit_mut(f);
            self.1.visit_mut(f);
        }
    }

    #[test]
    fn bidir_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pair = Pair(
            LstmParams::randn(3, 4, 0.5, &mut rng),
            LstmParams::randn(3, 4, 0.5, &mut rng),
        );
        let xs = random_inputs(&mut rng, 5, 3);
        let weights = random_inputs(&mut rng, 5, 8);
        let h0 = [0.1, -0.2, 0.3, 0.0];
        let (_, tape) = bidir_encode(&pair.0, &pair.1, &xs, &h0, &h0).unwrap();
        let mut g = pair.zeros_like();
        bidir_backward(&pair.0, &pair.1, &tape, &weights, &mut g.0, &mut g.1);
        let report = gradcheck(&pair, &g, 1e-5, |q| {
            let (out, _) = bidir_encode(&q.0, &q.1, &xs, &h0, &h0).unwrap();
            weighted_sum(&out, &weights)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
