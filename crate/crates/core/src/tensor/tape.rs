use super::{check_shape, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScalarMul { scalar: Var, x: Var },
    AddScalar { x: Var, scalar: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Sum(Var),
    MeanRows(Var),
    Slice { x: Var, start: usize },
    Row { x: Var, index: usize },
    StackRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    ScaleRows { x: Var, s: Var },
    BceWithLogits { logit: Var, target: f64 },
    PositionAttention { f: Var, m: Var, v: Var, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so replaying indices from the
/// loss downwards visits every operation after all of its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss or does not
    /// require gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Folds tape gradients of bound leaves into their parameter tensors.
///
/// `bound[i]` must be the var produced by `tape.param(params[i])`. Leaves
/// that the loss does not reach receive an explicit zero gradient so every
/// parameter ends up with a populated slot.
pub fn accumulate(grads: &Gradients, bound: &[Var], params: &mut [&mut Tensor]) -> Result<()> {
    if bound.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "accumulate",
            lhs: vec![bound.len()],
            rhs: vec![params.len()],
        });
    }
    for (v, p) in bound.iter().zip(params.iter_mut()) {
        if !p.requires_grad() {
            continue;
        }
        match grads.wrt(*v) {
            Some(g) => p.accumulate_grad(g)?,
            None => {
                let zeros = vec![0.0; p.numel()];
                p.accumulate_grad(&zeros)?;
            }
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis length, inner) strides for reducing over `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as an owned tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a parameter leaf; gradients flow to it if the tensor
    /// requires them.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(self.push(shape, vec![0.0; n], Op::Leaf, false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn scalar_check(&self, op: &'static str, s: Var) -> Result<()> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(s).to_vec(),
                rhs: vec![1],
            });
        }
        Ok(())
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[m, n] => Ok((m, n)),
            other => Err(TensorError::InvalidShape {
                shape: other.to_vec(),
                reason: format!("{op} expects a 2-D operand"),
            }),
        }
    }

    /// `[m×k]·[k×n] → [m×n]`, or `[m×k]·[k] → [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let bshape = self.shape(b).to_vec();
        let (kb, n, vec_rhs) = match bshape.as_slice() {
            &[kb, n] => (kb, n, false),
            &[kb] => (kb, 1, true),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: vec![m, k],
                    rhs: bshape,
                })
            }
        };
        if kb != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: bshape,
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("transpose", a)?;
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// Multiplies every element of `x` by the single element of `scalar`.
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        self.scalar_check("scalar_mul", scalar)?;
        let s = self.nodes[scalar.0].value[0];
        let out = self.nodes[x.0].value.iter().map(|&v| s * v).collect();
        let rg = self.rg(scalar) || self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScalarMul { scalar, x }, rg))
    }

    /// Adds the single element of `scalar` to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, scalar: Var) -> Result<Var> {
        self.scalar_check("add_scalar", scalar)?;
        let s = self.nodes[scalar.0].value[0];
        let out = self.nodes[x.0].value.iter().map(|&v| v + s).collect();
        let rg = self.rg(scalar) || self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddScalar { x, scalar }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax along `axis`, stabilised by subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let xv = &self.nodes[x.0].value;
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax input"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(xv[base + a * inner]);
                }
                let mut total = 0.0;
                for a in 0..len {
                    let e = (xv[base + a * inner] - max).exp();
                    out[base + a * inner] = e;
                    total += e;
                }
                for a in 0..len {
                    out[base + a * inner] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Column means of a 2-D tensor: `[m×n] → [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("mean_rows", a)?;
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += av[i * n + j];
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        Ok(self.push(vec![n], out, Op::MeanRows(a), rg))
    }

    /// Contiguous slice `[start, start+len)` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 || start + len > shape[0] || len == 0 {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("cannot slice [{start}, {}) from a 1-D tensor", start + len),
            });
        }
        let out = self.nodes[x.0].value[start..start + len].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len], out, Op::Slice { x, start }, rg))
    }

    /// Row `index` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.require_2d("row", x)?;
        if index >= m {
            return Err(TensorError::IndexOutOfRange { index, len: m });
        }
        let out = self.nodes[x.0].value[index * n..(index + 1) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![n], out, Op::Row { x, index }, rg))
    }

    /// Stacks equally sized 1-D tensors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![0],
            reason: "stack_rows needs at least one row".into(),
        })?;
        let width = self.shape(*first).to_vec();
        if width.len() != 1 {
            return Err(TensorError::InvalidShape {
                shape: width,
                reason: "stack_rows expects 1-D rows".into(),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * width[0]);
        let mut rg = false;
        for r in rows {
            if self.shape(*r) != width.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: width,
                    rhs: self.shape(*r).to_vec(),
                });
            }
            out.extend_from_slice(&self.nodes[r.0].value);
            rg |= self.rg(*r);
        }
        Ok(self.push(vec![rows.len(), width[0]], out, Op::StackRows(rows.to_vec()), rg))
    }

    /// Gathers the listed rows of a 2-D tensor, in order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.require_2d("select_rows", x)?;
        if rows.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![m, n],
                reason: "select_rows needs at least one row".into(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange { index: r, len: m });
            }
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len(), n], out, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Inverse of [`Tape::select_rows`]: places row `k` of `x` at row
    /// `rows[k]` of a `[total×n]` zero matrix. `rows` must be distinct.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.require_2d("scatter_rows", x)?;
        if rows.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: vec![m, n],
                rhs: vec![rows.len()],
            });
        }
        let mut seen = vec![false; total];
        let mut out = vec![0.0; total * n];
        let xv = &self.nodes[x.0].value;
        for (k, &r) in rows.iter().enumerate() {
            if r >= total || seen[r] {
                return Err(TensorError::IndexOutOfRange { index: r, len: total });
            }
            seen[r] = true;
            out[r * n..(r + 1) * n].copy_from_slice(&xv[k * n..(k + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![total, n], out, Op::ScatterRows { x, rows: rows.to_vec() }, rg))
    }

    /// Tiles a `[m×n]` matrix vertically: row `r` of the result is row
    /// `r % m` of `x`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.require_2d("repeat_rows", x)?;
        if times == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![0, n],
                reason: "repeat count must be positive".into(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(times * m * n);
        for _ in 0..times {
            out.extend_from_slice(xv);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![times * m, n], out, Op::RepeatRows { x, times }, rg))
    }

    /// Multiplies row `i` of `x [m×n]` by `s[i]` for `s [m]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.require_2d("scale_rows", x)?;
        if self.shape(s) != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: self.shape(s).to_vec(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] * sv[i];
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(vec![m, n], out, Op::ScaleRows { x, s }, rg))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against a 0/1 target,
    /// evaluated in the overflow-free form `max(z,0) − z·y + ln(1+e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        self.scalar_check("bce_with_logits", logit)?;
        let z = self.nodes[logit.0].value[0];
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let rg = self.rg(logit);
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits { logit, target }, rg))
    }

    /// Scalar-position self-attention over `P = T·H` positions.
    ///
    /// `f [P]` holds one scalar per position (flattened time-major), `m [H×H]`
    /// the feature-pair compatibility and `v [P]` the values. The score of
    /// output position `p = (t, j)` against source `s = (t', l)` is
    /// `f[p]·f[s]·m[j][l]`; each output is the softmax-weighted sum of `v`
    /// over all sources. The `P×P` weights are kept for the backward pass and
    /// readable through [`Tape::attention_weights`].
    pub fn position_attention(&mut self, f: Var, m: Var, v: Var) -> Result<Var> {
        let (h, h2) = self.require_2d("position_attention", m)?;
        let p_len = self.nodes[f.0].value.len();
        if h != h2 || self.shape(f) != [p_len] || self.shape(v) != [p_len] || p_len % h != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "position_attention",
                lhs: self.shape(f).to_vec(),
                rhs: self.shape(m).to_vec(),
            });
        }
        let fv = &self.nodes[f.0].value;
        let mv = &self.nodes[m.0].value;
        let vv = &self.nodes[v.0].value;
        if fv.iter().chain(mv).any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite("position_attention scores"));
        }
        let keys = key_table(fv, mv, h);
        let mut weights = vec![0.0; p_len * p_len];
        let mut out = vec![0.0; p_len];
        for p in 0..p_len {
            let fp = fv[p];
            let krow = &keys[(p % h) * p_len..(p % h + 1) * p_len];
            let wrow = &mut weights[p * p_len..(p + 1) * p_len];
            let mut max = f64::NEG_INFINITY;
            for (w, k) in wrow.iter_mut().zip(krow) {
                *w = fp * k;
                max = max.max(*w);
            }
            let mut total = 0.0;
            for w in wrow.iter_mut() {
                *w = (*w - max).exp();
                total += *w;
            }
            let inv = 1.0 / total;
            let mut acc = 0.0;
            for (w, x) in wrow.iter_mut().zip(vv) {
                *w *= inv;
                acc += *w * x;
            }
            out[p] = acc;
        }
        let rg = self.rg(f) || self.rg(m) || self.rg(v);
        Ok(self.push(vec![p_len], out, Op::PositionAttention { f, m, v, weights }, rg))
    }

    /// Row-stochastic weights recorded by [`Tape::position_attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::PositionAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("backward"));
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        // Adds into the slot for `v`, allocating zeros on first touch.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = g.len() / m;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &mut ga[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(arow, grow[0], bv);
                        } else {
                            for (p, slot) in arow.iter_mut().enumerate() {
                                *slot += dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(gb, g[i], arow);
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &a_ip) in arow.iter().enumerate() {
                            if a_ip != 0.0 {
                                axpy(&mut gb[p * n..(p + 1) * n], a_ip, grow);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::ScalarMul { scalar, x } => {
                let s = val(*scalar)[0];
                let xv = val(*x);
                acc(*scalar, &mut |gs| gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
            }
            Op::AddScalar { x, scalar } => {
                acc(*scalar, &mut |gs| gs[0] += g.iter().sum::<f64>());
                acc(*x, &mut |gx| add_into(gx, g));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let xv = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for a in 0..len {
                                dot += g[base + a * inner] * y[base + a * inner];
                            }
                            for a in 0..len {
                                let p = base + a * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanRows(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let inv = 1.0 / m as f64;
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Slice { x, start } => acc(*x, &mut |gx| add_into(&mut gx[*start..*start + g.len()], g)),
            Op::Row { x, index } => {
                let n = g.len();
                acc(*x, &mut |gx| add_into(&mut gx[index * n..(index + 1) * n], g));
            }
            Op::StackRows(rows) => {
                let n = node.shape[1];
                for (i, r) in rows.iter().enumerate() {
                    acc(*r, &mut |gr| add_into(gr, &g[i * n..(i + 1) * n]));
                }
            }
            Op::SelectRows { x, rows } => {
                let n = node.shape[1];
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { x, rows } => {
                let n = node.shape[1];
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[k * n..(k + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let chunk = self.nodes[x.0].value.len();
                acc(*x, &mut |gx| {
                    for t in 0..*times {
                        add_into(gx, &g[t * chunk..(t + 1) * chunk]);
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let (xv, sv) = (val(*x), val(*s));
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[i * n + j] * sv[i];
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for i in 0..m {
                        let mut t = 0.0;
                        for j in 0..n {
                            t += g[i * n + j] * xv[i * n + j];
                        }
                        gs[i] += t;
                    }
                });
            }
            Op::PositionAttention { f, m, v, weights } => {
                let h = self.nodes[m.0].shape[0];
                let p_len = g.len();
                let (fv, mv, vv) = (val(*f), val(*m), val(*v));
                let out = &node.value;
                let keys = key_table(fv, mv, h);
                // dS(p,s) = g_p·A(p,s)·(v_s − out_p)
                let mut d_keys = vec![0.0; h * p_len];
                let mut d_f = vec![0.0; p_len];
                let mut d_v = vec![0.0; p_len];
                for p in 0..p_len {
                    let gp = g[p];
                    if gp == 0.0 {
                        continue;
                    }
                    let j = p % h;
                    let wrow = &weights[p * p_len..(p + 1) * p_len];
                    let krow = &keys[j * p_len..(j + 1) * p_len];
                    let dkrow = &mut d_keys[j * p_len..(j + 1) * p_len];
                    let fp = fv[p];
                    let mut dfp = 0.0;
                    for s in 0..p_len {
                        let a = wrow[s];
                        d_v[s] += gp * a;
                        let ds = gp * a * (vv[s] - out[p]);
                        dfp += ds * krow[s];
                        dkrow[s] += ds * fp;
                    }
                    d_f[p] += dfp;
                }
                // keys[j][s] = m[j][s % h]·f[s]
                let mut d_m = vec![0.0; h * h];
                for j in 0..h {
                    let dkrow = &d_keys[j * p_len..(j + 1) * p_len];
                    for s in 0..p_len {
                        let l = s % h;
                        d_f[s] += dkrow[s] * mv[j * h + l];
                        d_m[j * h + l] += dkrow[s] * fv[s];
                    }
                }
                acc(*f, &mut |gf| add_into(gf, &d_f));
                acc(*m, &mut |gm| add_into(gm, &d_m));
                acc(*v, &mut |gv| add_into(gv, &d_v));
            }
            Op::BceWithLogits { logit, target } => {
                let z = val(*logit)[0];
                acc(*logit, &mut |gz| gz[0] += g[0] * (sigmoid(z) - target));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `keys[j][s] = m[j][s % h]·f[s]`, so the score of `(p, s)` is `f[p]·keys[p % h][s]`.
fn key_table(f: &[f64], m: &[f64], h: usize) -> Vec<f64> {
    let p_len = f.len();
    let mut keys = vec![0.0; h * p_len];
    for j in 0..h {
        let mrow = &m[j * h..(j + 1) * h];
        for (s, k) in keys[j * p_len..(j + 1) * p_len].iter_mut().enumerate() {
            *k = mrow[s % h] * f[s];
        }
    }
    keys
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy(dst: &mut [f64], alpha: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&a[i * k..(i + 1) * k], b);
        }
        return;
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            axpy(orow, a_ip, &b[p * n..(p + 1) * n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut tape = Tape::new();
        let eye = tape.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]));
        let v = tape.constant(&t(vec![2, 1], vec![5.0, 7.0]));
        let c = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(c), &[5.0, 0.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.zeros(vec![2, 3]).unwrap();
        let b = tape.zeros(vec![2, 2]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![2], vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.constant(&t(vec![1], vec![3.7]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[1.0]);

        let x = tape.constant(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let want = [0.0900, 0.2447, 0.6652];
        for (got, want) in tape.value(y).iter().zip(want) {
            assert!((got - want).abs() < 5e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_along_either_axis_normalises() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![2, 3], vec![1.0, -2.0, 0.5, 300.0, 301.0, -40.0]));
        for axis in 0..2 {
            let y = tape.softmax(x, axis).unwrap();
            let v = tape.value(y);
            if axis == 1 {
                for r in 0..2 {
                    let s: f64 = v[r * 3..r * 3 + 3].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            } else {
                for c in 0..3 {
                    assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![2], vec![f64::NAN, 0.0]));
        assert_eq!(tape.softmax(x, 0).unwrap_err(), TensorError::NonFinite("softmax input"));
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![2], vec![0.0, 2.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s)[0], 0.5);
        assert!((tape.value(s)[1] - 0.8808).abs() < 5e-5);
        let th = tape.tanh(x);
        assert_eq!(tape.value(th)[0], 0.0);
        let y = tape.zeros(vec![3]).unwrap();
        assert!(tape.add(x, y).is_err());
        assert!(tape.mul(x, y).is_err());
    }

    #[test]
    fn sum_and_zero_scaled_grads() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let z = tape.scale(x, 0.0);
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![2], vec![1.0, 2.0]));
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn scatter_inverts_select() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.select_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(s), &[5.0, 6.0, 1.0, 2.0]);
        let back = tape.scatter_rows(s, &[2, 0], 3).unwrap();
        assert_eq!(tape.value(back), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        assert!(tape.scatter_rows(s, &[1, 1], 3).is_err());
    }

    #[test]
    fn bce_matches_direct_formula() {
        for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (8.0, 0.0), (-8.0, 1.0)] {
            let mut tape = Tape::new();
            let l = tape.constant(&Tensor::scalar(z));
            let b = tape.bce_with_logits(l, y).unwrap();
            let p: f64 = 1.0 / (1.0 + (-z as f64).exp());
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            let got = tape.value(b)[0];
            assert!((got - direct).abs() < 1e-9 * direct.max(1.0), "{z} {y}: {got} vs {direct}");
        }
        // far tails stay finite: loss ~ |z|
        let mut tape = Tape::new();
        let l = tape.constant(&Tensor::scalar(800.0));
        let b = tape.bce_with_logits(l, 0.0).unwrap();
        assert_eq!(tape.value(b)[0], 800.0);
    }
}
