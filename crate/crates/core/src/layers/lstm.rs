use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{uniform, unmasked, zeros_param, HiddenMap, LayerError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Gate weights of one LSTM cell, gate order (input, forget, candidate, output).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// `[4H×D_in]`
    pub w: Tensor,
    /// `[4H×H]`
    pub u: Tensor,
    /// `[4H]`
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmCellVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = uniform(rng, vec![4 * hidden, input], 1.0 / (input as f64).sqrt());
        let u = uniform(rng, vec![4 * hidden, hidden], 1.0 / (hidden as f64).sqrt());
        let mut b = uniform(rng, vec![4 * hidden], 1.0 / (hidden as f64).sqrt());
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Self { w, u, b }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: zeros_param(vec![4 * hidden, input]),
            u: zeros_param(vec![4 * hidden, hidden]),
            b: zeros_param(vec![4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let ok = self.w.shape().len() == 2
            && self.w.shape()[0] == 4 * h
            && self.u.shape() == [4 * h, h]
            && self.b.shape() == [4 * h];
        if !ok {
            return Err(LayerError::Param {
                name: "lstm".into(),
                reason: format!(
                    "inconsistent shapes w={:?} u={:?} b={:?}",
                    self.w.shape(),
                    self.u.shape(),
                    self.b.shape()
                ),
            });
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.u, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmCellVars {
        LstmCellVars {
            w: tape.param(&self.w),
            u: tape.param(&self.u),
            b: tape.param(&self.b),
            hidden: self.hidden(),
        }
    }
}

/// Gate arithmetic given the precomputed input projection `wx = W·x`.
/// `state == None` is the zero state, whose recurrent terms vanish exactly.
fn cell_from_projection(tape: &mut Tape, wx: Var, state: Option<(Var, Var)>, p: &LstmCellVars) -> Result<(Var, Var)> {
    let h = p.hidden;
    let mut pre = tape.add(wx, p.b)?;
    if let Some((h_prev, _)) = state {
        let uh = tape.matmul(p.u, h_prev)?;
        pre = tape.add(pre, uh)?;
    }
    let i_pre = tape.slice(pre, 0, h)?;
    let f_pre = tape.slice(pre, h, h)?;
    let g_pre = tape.slice(pre, 2 * h, h)?;
    let o_pre = tape.slice(pre, 3 * h, h)?;
    let i = tape.sigmoid(i_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let ig = tape.mul(i, g)?;
    let c_new = match state {
        Some((_, c_prev)) => {
            let f = tape.sigmoid(f_pre);
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// One LSTM step: `c′ = f⊙c + i⊙g`, `h′ = o⊙tanh(c′)`.
pub fn lstm_cell_step(tape: &mut Tape, x: Var, h: Var, c: Var, p: &LstmCellVars) -> Result<(Var, Var)> {
    let hidden = p.hidden;
    if tape.shape(h) != [hidden] || tape.shape(c) != [hidden] {
        return Err(LayerError::InputWidth {
            expected: hidden,
            got: tape.shape(h)[0],
        });
    }
    let wx = tape.matmul(p.w, x)?;
    cell_from_projection(tape, wx, Some((h, c)), p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedLstmConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalLstmConfig {
    pub window: usize,
    pub hidden_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstmParams {
    pub layers: Vec<LstmCellParams>,
}

impl StackedLstmParams {
    pub fn init(input: usize, config: StackedLstmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.num_layers == 0 || config.hidden_size == 0 {
            return Err(LayerError::Config("stacked LSTM needs N ≥ 1 and H ≥ 1".into()));
        }
        let layers = (0..config.num_layers)
            .map(|l| {
                let d = if l == 0 { input } else { config.hidden_size };
                LstmCellParams::init(d, config.hidden_size, rng)
            })
            .collect();
        Ok(Self { layers })
    }
}

/// Input projections `X_sel·Wᵀ` for the unmasked rows of `x`.
fn project_rows(tape: &mut Tape, x: Var, rows: &[usize], p: &LstmCellVars) -> Result<Var> {
    let sel = tape.select_rows(x, rows)?;
    let wt = tape.transpose(p.w)?;
    Ok(tape.matmul(sel, wt)?)
}

fn check_input(tape: &Tape, x: Var, mask: &[bool], width: usize) -> Result<Vec<usize>> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(LayerError::EmptySequence);
    }
    if shape[1] != width {
        return Err(LayerError::InputWidth {
            expected: width,
            got: shape[1],
        });
    }
    if mask.len() != shape[0] {
        return Err(LayerError::Config(format!("mask length {} for {} rows", mask.len(), shape[0])));
    }
    let rows = unmasked(mask);
    if rows.is_empty() {
        return Err(LayerError::AllMasked);
    }
    Ok(rows)
}

/// Runs `layers` in sequence over the `T×D` input `x`, returning the top
/// layer's hidden state at every step. Masked steps leave the recurrent
/// state untouched and produce zero rows.
pub fn stacked_lstm_forward(tape: &mut Tape, x: Var, mask: &[bool], layers: &[LstmCellVars]) -> Result<HiddenMap> {
    let first = layers
        .first()
        .ok_or_else(|| LayerError::Config("stacked LSTM without layers".into()))?;
    let width = tape.shape(first.w)[1];
    let rows = check_input(tape, x, mask, width)?;
    let total = mask.len();
    let compact: Vec<usize> = (0..rows.len()).collect();

    let mut input = x;
    let mut input_rows = rows.clone();
    for p in layers {
        let proj = project_rows(tape, input, &input_rows, p)?;
        let mut state = None;
        let mut outputs = Vec::with_capacity(rows.len());
        for r in 0..rows.len() {
            let wx = tape.row(proj, r)?;
            let (h, c) = cell_from_projection(tape, wx, state, p)?;
            outputs.push(h);
            state = Some((h, c));
        }
        input = tape.stack_rows(&outputs)?;
        input_rows = compact.clone();
    }
    let values = tape.scatter_rows(input, &rows, total)?;
    Ok(HiddenMap {
        values,
        mask: mask.to_vec(),
    })
}

/// Local-LSTM: output row `p` is the final hidden state of a fresh
/// zero-initialised run over input rows `max(0, p−t+1)..=p`. Windows at the
/// start are truncated rather than padded; masked rows inside a window are
/// skipped and masked rows emit zeros.
pub fn local_lstm_forward(tape: &mut Tape, x: Var, mask: &[bool], window: usize, p: &LstmCellVars) -> Result<HiddenMap> {
    if window == 0 {
        return Err(LayerError::Config("window must be at least 1".into()));
    }
    let width = tape.shape(p.w)[1];
    let rows = check_input(tape, x, mask, width)?;
    let proj = project_rows(tape, x, &rows, p)?;
    let mut compact_of = vec![usize::MAX; mask.len()];
    for (k, &r) in rows.iter().enumerate() {
        compact_of[r] = k;
    }
    let mut wx_rows = Vec::with_capacity(rows.len());
    for k in 0..rows.len() {
        wx_rows.push(tape.row(proj, k)?);
    }
    let mut outputs = Vec::with_capacity(rows.len());
    for &end in &rows {
        let start = (end + 1).saturating_sub(window);
        let mut state = None;
        for raw in start..=end {
            if !mask[raw] {
                continue;
            }
            let (h, c) = cell_from_projection(tape, wx_rows[compact_of[raw]], state, p)?;
            state = Some((h, c));
        }
        let (h, _) = state.expect("window ends on an unmasked row");
        outputs.push(h);
    }
    let stacked = tape.stack_rows(&outputs)?;
    let values = tape.scatter_rows(stacked, &rows, mask.len())?;
    Ok(HiddenMap {
        values,
        mask: mask.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, TensorError};
    use rand::{Rng, SeedableRng};

    fn rand_matrix(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_zero_state() {
        let p = LstmCellParams::zeros(2, 2);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.zeros(vec![2]).unwrap();
        let h = tape.zeros(vec![2]).unwrap();
        let c = tape.zeros(vec![2]).unwrap();
        let (h2, c2) = lstm_cell_step(&mut tape, x, h, c, &v).unwrap();
        assert_eq!(tape.value(h2), &[0.0, 0.0]);
        assert_eq!(tape.value(c2), &[0.0, 0.0]);
    }

    #[test]
    fn zero_params_carry_half_the_cell() {
        let p = LstmCellParams::zeros(2, 2);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.zeros(vec![2]).unwrap();
        let h = tape.zeros(vec![2]).unwrap();
        let c = tape.constant_from(vec![2], vec![1.0, 1.0]).unwrap();
        let (h2, c2) = lstm_cell_step(&mut tape, x, h, c, &v).unwrap();
        assert_eq!(tape.value(c2), &[0.5, 0.5]);
        // sigmoid(0) * tanh(0.5), evaluated by hand
        for v in tape.value(h2) {
            assert!((v - 0.2311).abs() < 5e-5, "{v}");
        }
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = LstmCellParams::init(3, 3, &mut rng);
        let x = Tensor::new(vec![3], vec![0.4, -0.7, 0.2]).unwrap();
        let h0 = Tensor::new(vec![3], vec![0.1, -0.3, 0.5]).unwrap();
        let c0 = Tensor::new(vec![3], vec![-0.2, 0.6, 0.05]).unwrap();
        let weights = Tensor::new(vec![3], vec![0.3, -1.1, 0.7]).unwrap();
        let report = grad_check::<LayerError, _>(
            |tape, v| {
                let vars = LstmCellVars {
                    w: v[0],
                    u: v[1],
                    b: v[2],
                    hidden: 3,
                };
                let (x, h, c) = (tape.constant(&x), tape.constant(&h0), tape.constant(&c0));
                let (h1, _) = lstm_cell_step(tape, x, h, c, &vars)?;
                let wv = tape.constant(&weights);
                let y = tape.mul(h1, wv)?;
                Ok(tape.sum(y))
            },
            &[p.w.clone(), p.u.clone(), p.b.clone()],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn single_step_stack_equals_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmCellParams::init(4, 3, &mut rng);
        let xs = rand_matrix(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(&xs);
        let map = stacked_lstm_forward(&mut tape, x, &[true], &[v]).unwrap();
        let xr = tape.row(x, 0).unwrap();
        let h = tape.zeros(vec![3]).unwrap();
        let c = tape.zeros(vec![3]).unwrap();
        let (h1, _) = lstm_cell_step(&mut tape, xr, h, c, &v).unwrap();
        assert_eq!(tape.value(map.values), tape.value(h1));
    }

    #[test]
    fn two_layers_equal_chained_single_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = StackedLstmConfig {
            num_layers: 2,
            hidden_size: 3,
        };
        let params = StackedLstmParams::init(4, cfg, &mut rng).unwrap();
        let xs = rand_matrix(&mut rng, 5, 4);
        let mask = vec![true; 5];
        let mut tape = Tape::new();
        let vars: Vec<_> = params.layers.iter().map(|l| l.bind(&mut tape)).collect();
        let x = tape.constant(&xs);
        let both = stacked_lstm_forward(&mut tape, x, &mask, &vars).unwrap();
        let first = stacked_lstm_forward(&mut tape, x, &mask, &vars[..1]).unwrap();
        let chained = stacked_lstm_forward(&mut tape, first.values, &mask, &vars[1..]).unwrap();
        assert_eq!(tape.value(both.values), tape.value(chained.values));
    }

    #[test]
    fn trailing_padding_leaves_prefix_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = StackedLstmConfig {
            num_layers: 2,
            hidden_size: 3,
        };
        let params = StackedLstmParams::init(2, cfg, &mut rng).unwrap();
        let xs = rand_matrix(&mut rng, 4, 2);
        let mut padded = xs.data().to_vec();
        padded.extend([9.0, -9.0, 3.0, 3.0]);
        let padded = Tensor::new(vec![6, 2], padded).unwrap();

        let mut tape = Tape::new();
        let vars: Vec<_> = params.layers.iter().map(|l| l.bind(&mut tape)).collect();
        let a = tape.constant(&xs);
        let b = tape.constant(&padded);
        let short = stacked_lstm_forward(&mut tape, a, &[true; 4], &vars).unwrap();
        let long = stacked_lstm_forward(&mut tape, b, &[true, true, true, true, false, false], &vars).unwrap();
        assert_eq!(tape.value(short.values), &tape.value(long.values)[..12]);
        assert!(tape.value(long.values)[12..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_and_fully_masked_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmCellParams::init(2, 2, &mut rng);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.zeros(vec![3, 2]).unwrap();
        assert!(matches!(
            stacked_lstm_forward(&mut tape, x, &[false; 3], &[v]),
            Err(LayerError::AllMasked)
        ));
        assert!(matches!(
            local_lstm_forward(&mut tape, x, &[false; 3], 2, &v),
            Err(LayerError::AllMasked)
        ));
        let wrong = tape.zeros(vec![3, 5]).unwrap();
        assert!(matches!(
            stacked_lstm_forward(&mut tape, wrong, &[true; 3], &[v]),
            Err(LayerError::InputWidth { .. })
        ));
    }

    #[test]
    fn window_of_one_is_one_step_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = LstmCellParams::init(3, 2, &mut rng);
        let xs = rand_matrix(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(&xs);
        let local = local_lstm_forward(&mut tape, x, &[true; 4], 1, &v).unwrap();
        for r in 0..4 {
            let xr = tape.row(x, r).unwrap();
            let h = tape.zeros(vec![2]).unwrap();
            let c = tape.zeros(vec![2]).unwrap();
            let (h1, _) = lstm_cell_step(&mut tape, xr, h, c, &v).unwrap();
            assert_eq!(&tape.value(local.values)[r * 2..r * 2 + 2], tape.value(h1));
        }
    }

    #[test]
    fn wide_window_equals_single_layer_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LstmCellParams::init(3, 4, &mut rng);
        let xs = rand_matrix(&mut rng, 5, 3);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(&xs);
        let stacked = stacked_lstm_forward(&mut tape, x, &[true; 5], &[v]).unwrap();
        for t in [5, 9] {
            let local = local_lstm_forward(&mut tape, x, &[true; 5], t, &v).unwrap();
            assert_eq!(tape.value(local.values), tape.value(stacked.values));
        }
    }

    #[test]
    fn zero_window_rejected() {
        let p = LstmCellParams::zeros(1, 1);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.zeros(vec![2, 1]).unwrap();
        assert!(local_lstm_forward(&mut tape, x, &[true; 2], 0, &v).is_err());
    }

    #[test]
    fn local_perturbation_reaches_only_the_next_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t_len, window, h) = (8, 3, 2);
        let p = LstmCellParams::init(2, h, &mut rng);
        let xs = rand_matrix(&mut rng, t_len, 2);
        let base = {
            let mut tape = Tape::new();
            let v = p.bind(&mut tape);
            let x = tape.constant(&xs);
            let m = local_lstm_forward(&mut tape, x, &[true; 8], window, &v).unwrap();
            tape.value(m.values).to_vec()
        };
        for row in 0..t_len {
            let mut data = xs.data().to_vec();
            data[row * 2] += 0.37;
            let xp = Tensor::new(vec![t_len, 2], data).unwrap();
            let mut tape = Tape::new();
            let v = p.bind(&mut tape);
            let x = tape.constant(&xp);
            let m = local_lstm_forward(&mut tape, x, &[true; 8], window, &v).unwrap();
            let out = tape.value(m.values);
            for r in 0..t_len {
                let changed = out[r * h..(r + 1) * h] != base[r * h..(r + 1) * h];
                let inside = r >= row && r < row + window;
                assert_eq!(changed, inside, "perturbed {row}, output {r}");
            }
        }
    }

    #[test]
    fn tensor_errors_convert() {
        let e: LayerError = TensorError::NonFinite("x").into();
        assert!(e.to_string().contains("non-finite"));
    }
}
