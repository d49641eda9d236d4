use rand_chacha::ChaCha8Rng;

use super::{uniform, zeros_param, HiddenMap, LayerError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Two affine layers `H → max(1, H/2) → 1` with a tanh between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn inner_width(hidden: usize) -> usize {
    (hidden / 2).max(1)
}

impl MlpParams {
    pub fn init(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = inner_width(hidden);
        let b_in = 1.0 / (hidden as f64).sqrt();
        let b_mid = 1.0 / (mid as f64).sqrt();
        Self {
            w1: uniform(rng, vec![mid, hidden], b_in),
            b1: uniform(rng, vec![mid], b_in),
            w2: uniform(rng, vec![1, mid], b_mid),
            b2: uniform(rng, vec![1], b_mid),
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        let mid = inner_width(hidden);
        Self {
            w1: zeros_param(vec![mid, hidden]),
            b1: zeros_param(vec![mid]),
            w2: zeros_param(vec![1, mid]),
            b2: zeros_param(vec![1]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
        }
    }
}

/// Mean-pools the unmasked rows and maps them to a single logit. The risk
/// is `sigmoid(logit)`; the logit is returned so the loss can use the
/// overflow-free cross-entropy form.
pub fn mlp_head(tape: &mut Tape, f: &HiddenMap, p: &MlpVars) -> Result<Var> {
    let rows = f.unmasked_rows();
    if rows.is_empty() {
        return Err(LayerError::AllMasked);
    }
    let hidden = tape.shape(p.w1)[1];
    if tape.shape(f.values).get(1) != Some(&hidden) {
        return Err(LayerError::InputWidth {
            expected: hidden,
            got: tape.shape(f.values).get(1).copied().unwrap_or(0),
        });
    }
    let sel = tape.select_rows(f.values, &rows)?;
    let pooled = tape.mean_rows(sel)?;
    let z = tape.matmul(p.w1, pooled)?;
    let z = tape.add(z, p.b1)?;
    let z = tape.tanh(z);
    let logit = tape.matmul(p.w2, z)?;
    Ok(tape.add(logit, p.b2)?)
}
