use rand_chacha::ChaCha8Rng;

use super::{uniform, zeros_param, HiddenMap, LayerError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters of the joint spatiotemporal attention block.
///
/// Each `(time, feature)` cell of the hidden map is a position. The query of
/// position `(i, j)` is `f[i][j] · wq[j]`, the key is `f[i][j] · wk[j]`:
/// a 1×1 projection whose embedding row depends on the feature coordinate.
/// Values come from the row projection `f[i] · wv`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAttnParams {
    /// `[H×d_a]`
    pub wq: Tensor,
    /// `[H×d_a]`
    pub wk: Tensor,
    /// `[H×H]`
    pub wv: Tensor,
    /// `[1]`, the residual gain.
    pub gamma: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct JointAttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub gamma: Var,
}

impl JointAttnParams {
    /// Query/key embeddings act on a single scalar per position, so their
    /// fan-in is one. `γ` starts at zero.
    pub fn init(hidden: usize, attn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: uniform(rng, vec![hidden, attn_dim], 1.0),
            wk: uniform(rng, vec![hidden, attn_dim], 1.0),
            wv: uniform(rng, vec![hidden, hidden], 1.0 / (hidden as f64).sqrt()),
            gamma: zeros_param(vec![1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wv.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.wq, &self.wk, &self.wv, &self.gamma]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.gamma]
    }

    pub fn bind(&self, tape: &mut Tape) -> JointAttnVars {
        JointAttnVars {
            wq: tape.param(&self.wq),
            wk: tape.param(&self.wk),
            wv: tape.param(&self.wv),
            gamma: tape.param(&self.gamma),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointAttnOutput {
    pub map: HiddenMap,
    /// `a(f)` over the unmasked positions, flattened `[T_unmasked·H]`.
    pub attended: Var,
    /// Raw time index of each compact row.
    pub rows: Vec<usize>,
}

impl JointAttnOutput {
    /// `[P×P]` weights over the `P = T_unmasked·H` unmasked positions,
    /// row = output position, column = source position, both flattened as
    /// `compact_time · H + feature`.
    pub fn weights<'a>(&self, tape: &'a Tape) -> &'a [f64] {
        tape.attention_weights(self.attended).expect("recorded by position_attention")
    }
}

fn compact_rows(tape: &mut Tape, f: &HiddenMap, hidden: usize) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(f.values);
    if shape.len() != 2 || shape[1] != hidden {
        return Err(LayerError::InputWidth {
            expected: hidden,
            got: *shape.last().unwrap_or(&0),
        });
    }
    if f.mask.len() != shape[0] {
        return Err(LayerError::Config(format!("mask length {} for {} rows", f.mask.len(), shape[0])));
    }
    let rows = f.unmasked_rows();
    if rows.is_empty() {
        return Err(LayerError::AllMasked);
    }
    Ok((tape.select_rows(f.values, &rows)?, rows))
}

/// `f′ = f + γ·a(f)`, where `a(f)` at each position is the softmax-weighted
/// average of the values at all unmasked positions, weighted by the
/// alignment of that position's query with every key.
pub fn joint_spatiotemporal_attention(tape: &mut Tape, f: &HiddenMap, p: &JointAttnVars) -> Result<JointAttnOutput> {
    let hidden = tape.shape(p.wv)[0];
    let (fc, rows) = compact_rows(tape, f, hidden)?;
    let t = rows.len();
    let positions = t * hidden;

    let flat = tape.reshape(fc, vec![positions])?;
    // q(i,j)·k(i',l) = f[i][j]·f[i'][l]·(wq[j]·wk[l])
    let wk_t = tape.transpose(p.wk)?;
    let compat = tape.matmul(p.wq, wk_t)?;
    let v = tape.matmul(fc, p.wv)?;
    let v_flat = tape.reshape(v, vec![positions])?;
    let attended = tape.position_attention(flat, compat, v_flat)?;
    let grid = tape.reshape(attended, vec![t, hidden])?;
    let scaled = tape.scalar_mul(p.gamma, grid)?;
    let adjusted = tape.add(fc, scaled)?;
    let values = tape.scatter_rows(adjusted, &rows, f.mask.len())?;
    Ok(JointAttnOutput {
        map: HiddenMap {
            values,
            mask: f.mask.clone(),
        },
        attended,
        rows,
    })
}

/// Baseline attention with one weight per time step shared by every feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttnParams {
    /// `[H]`
    pub w: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalAttnVars {
    pub w: Var,
    pub bias: Var,
}

impl TemporalAttnParams {
    pub fn init(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: uniform(rng, vec![hidden], 1.0 / (hidden as f64).sqrt()),
            bias: zeros_param(vec![1]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape) -> TemporalAttnVars {
        TemporalAttnVars {
            w: tape.param(&self.w),
            bias: tape.param(&self.bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemporalAttnOutput {
    pub map: HiddenMap,
    /// `[T_unmasked]` row multipliers `T_unmasked · α_j`.
    pub multipliers: Var,
    pub rows: Vec<usize>,
}

/// Scores `s_j = w·f_j + bias`, `α = softmax(s)` over unmasked steps, and
/// output row `j = (T_unmasked·α_j)·f_j`, so uniform weights are the identity.
pub fn temporal_attention(tape: &mut Tape, f: &HiddenMap, p: &TemporalAttnVars) -> Result<TemporalAttnOutput> {
    let hidden = tape.shape(p.w)[0];
    let (fc, rows) = compact_rows(tape, f, hidden)?;
    let scores = tape.matmul(fc, p.w)?;
    let scores = tape.add_scalar(scores, p.bias)?;
    let alpha = tape.softmax(scores, 0)?;
    let multipliers = tape.scale(alpha, rows.len() as f64);
    let weighted = tape.scale_rows(fc, multipliers)?;
    let values = tape.scatter_rows(weighted, &rows, f.mask.len())?;
    Ok(TemporalAttnOutput {
        map: HiddenMap {
            values,
            mask: f.mask.clone(),
        },
        multipliers,
        rows,
    })
}
