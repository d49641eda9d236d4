use super::{Result, Tensor, TensorError};

/// Plain stochastic gradient descent: `p ← p − lr·grad(p)`, then clears
/// every gradient slot.
///
/// All parameters are checked for a populated gradient before any of them
/// is touched, so a failed call leaves the parameters unchanged.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    check_grads(params, lr)?;
    for p in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        for (w, g) in p.data.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
    Ok(())
}

fn check_grads(params: &[&mut Tensor], lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(TensorError::NonFinite("learning rate"));
    }
    for (i, p) in params.iter().enumerate() {
        if p.requires_grad() && p.grad().is_none() {
            return Err(TensorError::MissingGrad(i));
        }
    }
    Ok(())
}

/// Adam with bias-corrected moment estimates. Moment buffers are created
/// on the first step and must see the same parameter list every time.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        check_grads(params, lr)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(TensorError::InvalidShape {
                shape: params.iter().map(|p| p.numel()).collect(),
                reason: "parameter list changed between optimizer steps".into(),
            });
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            for (((w, g), m), v) in p.data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{accumulate, Tape};

    #[test]
    fn one_step_arithmetic() {
        let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
        p.accumulate_grad(&[2.0]).unwrap();
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::param(vec![3], vec![1.5, -2.0, 7.25]).unwrap();
        p.accumulate_grad(&[3.0, 1.0, -9.0]).unwrap();
        sgd_step(&mut [&mut p], 0.0).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0, 7.25]);
    }

    #[test]
    fn missing_grad_rejected_without_side_effects() {
        let mut a = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut b = Tensor::param(vec![1], vec![2.0]).unwrap();
        a.accumulate_grad(&[1.0]).unwrap();
        let err = sgd_step(&mut [&mut a, &mut b], 0.5).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad(1));
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn quadratic_contracts_towards_minimum() {
        // loss (p-3)^2 with lr 0.1 gives p <- 0.8 p + 0.6
        let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let three = Tensor::scalar(3.0);
        let mut expected = 0.0;
        let mut prev_gap = 3.0;
        for _ in 0..10 {
            let mut tape = Tape::new();
            let pv = tape.param(&p);
            let c = tape.constant(&three);
            let d = tape.sub(pv, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            accumulate(&g, &[pv], &mut [&mut p]).unwrap();
            sgd_step(&mut [&mut p], 0.1).unwrap();
            expected = 0.8 * expected + 0.6;
            let gap = 3.0 - p.data()[0];
            assert!(gap > 0.0 && gap < prev_gap);
            assert!((p.data()[0] - expected).abs() < 1e-12);
            prev_gap = gap;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr·g/(|g| + eps).
        let mut p = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        p.accumulate_grad(&[4.0, -0.5]).unwrap();
        let mut opt = Adam::default();
        opt.step(&mut [&mut p], 0.01).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 0.99).abs() < 1e-9);
        assert!(p.grad().is_none());
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 3.0);
            p.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut p], 0.05).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3, "{}", p.data()[0]);
    }

    #[test]
    fn adam_zero_lr_and_missing_grad() {
        let mut a = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut b = Tensor::param(vec![1], vec![2.0]).unwrap();
        a.accumulate_grad(&[1.0]).unwrap();
        let mut opt = Adam::default();
        assert_eq!(opt.step(&mut [&mut a, &mut b], 0.5).unwrap_err(), TensorError::MissingGrad(1));
        assert_eq!(a.data(), &[1.0]);
        b.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut a, &mut b], 0.0).unwrap();
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
    }
}
