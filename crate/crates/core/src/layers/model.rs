use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    joint_spatiotemporal_attention, local_lstm_forward, mlp_head, stacked_lstm_forward, temporal_attention,
    HiddenMap, JointAttnParams, JointAttnVars, LayerError, LstmCellParams, LstmCellVars, MlpParams, MlpVars,
    Result, StackedLstmConfig, StackedLstmParams, TemporalAttnParams, TemporalAttnVars,
};
use crate::data::FeatureSequence;
use crate::tensor::{accumulate, Tape, Tensor, Var};

/// The five model rows of the comparison: a clinical score and four
/// recurrent networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Clinical,
    Lstm,
    LstmTemporal,
    LstmJoint,
    LocalJoint,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Clinical,
        Variant::Lstm,
        Variant::LstmTemporal,
        Variant::LstmJoint,
        Variant::LocalJoint,
    ];

    pub const NEURAL: [Variant; 4] = [Variant::Lstm, Variant::LstmTemporal, Variant::LstmJoint, Variant::LocalJoint];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clinical => "clinical",
            Variant::Lstm => "lstm",
            Variant::LstmTemporal => "lstm-temporal",
            Variant::LstmJoint => "lstm-joint",
            Variant::LocalJoint => "local-joint",
        }
    }

    pub fn is_neural(self) -> bool {
        self != Variant::Clinical
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LayerError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub hidden: usize,
    /// Stacked layers of the full-sequence encoder.
    pub num_layers: usize,
    /// Local-LSTM window length.
    pub window: usize,
    /// Query/key embedding width of the joint attention block.
    pub attn_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.variant.is_neural() {
            return Err(LayerError::Config("the clinical baseline has no network parameters".into()));
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("num_layers", self.num_layers),
            ("window", self.window),
            ("attn_dim", self.attn_dim),
        ] {
            if v == 0 {
                return Err(LayerError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Stacked(StackedLstmParams),
    Local(LstmCellParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    None,
    Temporal(TemporalAttnParams),
    Joint(JointAttnParams),
}

#[derive(Debug, Clone)]
pub enum EncoderVars {
    Stacked(Vec<LstmCellVars>),
    Local(LstmCellVars),
}

#[derive(Debug, Clone)]
pub enum AttentionVars {
    None,
    Temporal(TemporalAttnVars),
    Joint(JointAttnVars),
}

/// Parameters of one model bound to a tape; `all` follows
/// [`Model::named_params`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub attention: AttentionVars,
    pub head: MlpVars,
    pub all: Vec<Var>,
}

/// Encoder, optional attention and prediction head for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub attention: AttentionParams,
    pub head: MlpParams,
}

impl Model {
    /// Seeded initialisation: encoder, then attention, then head draw from
    /// one ChaCha stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let encoder = match config.variant {
            Variant::LocalJoint => Encoder::Local(LstmCellParams::init(config.input_dim, h, &mut rng)),
            _ => Encoder::Stacked(StackedLstmParams::init(
                config.input_dim,
                StackedLstmConfig {
                    num_layers: config.num_layers,
                    hidden_size: h,
                },
                &mut rng,
            )?),
        };
        let attention = match config.variant {
            Variant::LstmTemporal => AttentionParams::Temporal(TemporalAttnParams::init(h, &mut rng)),
            Variant::LstmJoint | Variant::LocalJoint => {
                AttentionParams::Joint(JointAttnParams::init(h, config.attn_dim, &mut rng))
            }
            _ => AttentionParams::None,
        };
        let head = MlpParams::init(h, &mut rng);
        Ok(Self {
            config,
            encoder,
            attention,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.encoder {
            Encoder::Stacked(s) => {
                for (l, layer) in s.layers.iter().enumerate() {
                    for (n, t) in ["w", "u", "b"].iter().zip(layer.tensors()) {
                        out.push((format!("encoder.layer{l}.{n}"), t));
                    }
                }
            }
            Encoder::Local(p) => {
                for (n, t) in ["w", "u", "b"].iter().zip(p.tensors()) {
                    out.push((format!("encoder.local.{n}"), t));
                }
            }
        }
        match &self.attention {
            AttentionParams::None => {}
            AttentionParams::Temporal(p) => {
                for (n, t) in ["w", "bias"].iter().zip(p.tensors()) {
                    out.push((format!("attention.temporal.{n}"), t));
                }
            }
            AttentionParams::Joint(p) => {
                for (n, t) in ["wq", "wk", "wv", "gamma"].iter().zip(p.tensors()) {
                    out.push((format!("attention.joint.{n}"), t));
                }
            }
        }
        for (n, t) in ["w1", "b1", "w2", "b2"].iter().zip(self.head.tensors()) {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        match &mut self.encoder {
            Encoder::Stacked(s) => s.layers.iter_mut().for_each(|l| out.extend(l.tensors_mut())),
            Encoder::Local(p) => out.extend(p.tensors_mut()),
        }
        match &mut self.attention {
            AttentionParams::None => {}
            AttentionParams::Temporal(p) => out.extend(p.tensors_mut()),
            AttentionParams::Joint(p) => out.extend(p.tensors_mut()),
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds a model from named tensors, checking every name and shape
    /// against a fresh model of the same configuration.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(LayerError::Param {
                name: "model".into(),
                reason: format!("expected {} tensors, got {}", expected.len(), named.len()),
            });
        }
        for ((want_name, want_shape), ((name, t), slot)) in
            expected.iter().zip(named.into_iter().zip(model.params_mut()))
        {
            if &name != want_name || t.shape() != want_shape.as_slice() {
                return Err(LayerError::Param {
                    name,
                    reason: format!("expected {want_name} with shape {want_shape:?}, got shape {:?}", t.shape()),
                });
            }
            let mut t = t;
            t.set_requires_grad(true);
            *slot = t;
        }
        Ok(model)
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut all = Vec::new();
        let encoder = match &self.encoder {
            Encoder::Stacked(s) => {
                let vars: Vec<LstmCellVars> = s.layers.iter().map(|l| l.bind(tape)).collect();
                vars.iter().for_each(|v| all.extend([v.w, v.u, v.b]));
                EncoderVars::Stacked(vars)
            }
            Encoder::Local(p) => {
                let v = p.bind(tape);
                all.extend([v.w, v.u, v.b]);
                EncoderVars::Local(v)
            }
        };
        let attention = match &self.attention {
            AttentionParams::None => AttentionVars::None,
            AttentionParams::Temporal(p) => {
                let v = p.bind(tape);
                all.extend([v.w, v.bias]);
                AttentionVars::Temporal(v)
            }
            AttentionParams::Joint(p) => {
                let v = p.bind(tape);
                all.extend([v.wq, v.wk, v.wv, v.gamma]);
                AttentionVars::Joint(v)
            }
        };
        let head = self.head.bind(tape);
        all.extend([head.w1, head.b1, head.w2, head.b2]);
        ModelVars {
            encoder,
            attention,
            head,
            all,
        }
    }

    /// Encoder → attention → head, returning the pre-sigmoid logit.
    pub fn forward_logit(&self, tape: &mut Tape, vars: &ModelVars, seq: &FeatureSequence) -> Result<Var> {
        if seq.is_empty() {
            return Err(LayerError::EmptySequence);
        }
        if seq.width() != self.config.input_dim {
            return Err(LayerError::InputWidth {
                expected: self.config.input_dim,
                got: seq.width(),
            });
        }
        let x = tape.constant(&seq.matrix);
        let encoded: HiddenMap = match &vars.encoder {
            EncoderVars::Stacked(layers) => stacked_lstm_forward(tape, x, &seq.mask, layers)?,
            EncoderVars::Local(p) => local_lstm_forward(tape, x, &seq.mask, self.config.window, p)?,
        };
        let attended = match &vars.attention {
            AttentionVars::None => encoded,
            AttentionVars::Temporal(p) => temporal_attention(tape, &encoded, p)?.map,
            AttentionVars::Joint(p) => joint_spatiotemporal_attention(tape, &encoded, p)?.map,
        };
        mlp_head(tape, &attended, &vars.head)
    }

    /// Predicted risk in `(0, 1)`.
    pub fn risk(&self, seq: &FeatureSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logit = self.forward_logit(&mut tape, &vars, seq)?;
        let risk = tape.sigmoid(logit);
        Ok(tape.value(risk)[0])
    }

    /// Pre-sigmoid score. Ranks identically to [`Model::risk`] but does not
    /// saturate, so it is what AUC is computed from.
    pub fn logit(&self, seq: &FeatureSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logit = self.forward_logit(&mut tape, &vars, seq)?;
        Ok(tape.value(logit)[0])
    }

    /// Binary cross-entropy for one labelled sequence; gradients are added
    /// to the parameters' gradient slots.
    pub fn accumulate_loss_grad(&mut self, seq: &FeatureSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logit = self.forward_logit(&mut tape, &vars, seq)?;
        let loss = tape.bce_with_logits(logit, if seq.label { 1.0 } else { 0.0 })?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        accumulate(&grads, &vars.all, &mut self.params_mut())?;
        Ok(value)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_dim: 4,
            hidden: 4,
            num_layers: 2,
            window: 3,
            attn_dim: 3,
        }
    }

    fn sequence(seed: u64, t: usize, d: usize) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..t).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        FeatureSequence::new("p", rows, (0..d).map(|i| format!("f{i}")).collect(), true).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("gru".parse::<Variant>().is_err());
    }

    #[test]
    fn clinical_has_no_network() {
        assert!(Model::init(config(Variant::Clinical), 1).is_err());
    }

    #[test]
    fn joint_with_zero_gamma_matches_plain_lstm() {
        let joint = Model::init(config(Variant::LstmJoint), 3).unwrap();
        let plain = Model {
            config: config(Variant::Lstm),
            encoder: joint.encoder.clone(),
            attention: AttentionParams::None,
            head: joint.head.clone(),
        };
        for seed in 0..5 {
            let seq = sequence(seed, 5, 4);
            assert_eq!(joint.risk(&seq).unwrap(), plain.risk(&seq).unwrap());
        }
    }

    #[test]
    fn named_params_round_trip_through_from_named() {
        for v in Variant::NEURAL {
            let m = Model::init(config(v), 9).unwrap();
            let named: Vec<(String, Tensor)> = m.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
            let back = Model::from_named(m.config, named.clone()).unwrap();
            assert_eq!(back, m);
            let mut broken = named;
            broken.pop();
            assert!(Model::from_named(m.config, broken).is_err());
        }
    }

    #[test]
    fn padding_never_changes_risk() {
        for v in Variant::NEURAL {
            let mut m = Model::init(config(v), 4).unwrap();
            if let AttentionParams::Joint(p) = &mut m.attention {
                p.gamma.data_mut()[0] = 0.9;
            }
            let seq = sequence(11, 5, 4);
            assert_eq!(m.risk(&seq).unwrap(), m.risk(&seq.padded(9)).unwrap(), "{v}");
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let m = Model::init(config(Variant::Lstm), 1).unwrap();
        assert!(matches!(m.risk(&sequence(1, 3, 5)), Err(LayerError::InputWidth { .. })));
    }
}
