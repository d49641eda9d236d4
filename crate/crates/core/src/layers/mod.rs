//! Recurrent encoders, attention blocks and the prediction head.
//!
//! Every layer records onto a [`Tape`](crate::tensor::Tape); parameter
//! structs own [`Tensor`]s and expose `bind` to place them on a tape as
//! differentiable leaves.

mod attention;
mod lstm;
mod mlp;
mod model;

pub use attention::{
    joint_spatiotemporal_attention, temporal_attention, JointAttnOutput, JointAttnParams, JointAttnVars,
    TemporalAttnOutput, TemporalAttnParams, TemporalAttnVars,
};
pub use lstm::{
    local_lstm_forward, lstm_cell_step, stacked_lstm_forward, LocalLstmConfig, LstmCellParams, LstmCellVars,
    StackedLstmConfig, StackedLstmParams,
};
pub use mlp::{mlp_head, MlpParams, MlpVars};
pub use model::{AttentionParams, Encoder, Model, ModelConfig, ModelVars, Variant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence has no rows")]
    EmptySequence,
    #[error("every time step is masked")]
    AllMasked,
    #[error("input width {got} does not match layer width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter {name:?}: {reason}")]
    Param { name: String, reason: String },
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// A `T×H` latent map on a tape together with its time mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMap {
    pub values: Var,
    pub mask: Vec<bool>,
}

impl HiddenMap {
    pub fn unmasked_rows(&self) -> Vec<usize> {
        unmasked(&self.mask)
    }
}

pub(crate) fn unmasked(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
}

/// `uniform(−bound, +bound)` initialised tensor that requires gradients.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::param(shape, data).expect("init shapes are positive")
}

pub(crate) fn zeros_param(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).expect("init shapes are positive")
}
