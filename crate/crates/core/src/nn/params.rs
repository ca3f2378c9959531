//! Named parameter containers and the checkpoint format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor2};

/// A fixed, ordered collection of named tensors.
///
/// Gradients use the same type as the parameters they belong to, so the
/// optimizer and the gradient checker can walk both in lockstep.
pub trait Parameters: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, t| t.fill(0.0));
        out
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t.as_slice()));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }

    fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.as_slice().iter().map(|v| v * v).sum::<f64>());
        s.sqrt()
    }

    /// `self += alpha * other`.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            for v in t.as_mut_slice() {
                *v += alpha * flat[offset];
                offset += 1;
            }
        });
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Serializes every tensor as `name -> {shape, data}`.
pub fn save_checkpoint<P: Parameters>(params: &P) -> String {
    let mut tensors = BTreeMap::new();
    params.visit(&mut |name, t| {
        tensors.insert(
            name.to_string(),
            TensorRecord {
                shape: [t.rows(), t.cols()],
                data: t.as_slice().to_vec(),
            },
        );
    });
    serde_json::to_string(&Checkpoint {
        version: CHECKPOINT_VERSION,
        tensors,
    })
    .expect("checkpoint serialization cannot fail")
}

/// Loads a checkpoint into `params`. Names and shapes must match exactly.
pub fn load_checkpoint<P: Parameters>(params: &mut P, text: &str) -> Result<(), NnError> {
    let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    let mut seen = 0;
    let mut err = None;
    params.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match ckpt.tensors.get(name) {
            Some(rec) if rec.shape == [t.rows(), t.cols()] && rec.data.len() == t.len() => {
                t.as_mut_slice().copy_from_slice(&rec.data);
                seen += 1;
            }
            Some(rec) => {
                err = Some(NnError::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    rec.shape,
                    t.shape()
                )))
            }
            None => err = Some(NnError::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != ckpt.tensors.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {seen}",
            ckpt.tensors.len()
        )));
    }
    Ok(())
}
