//! Adam optimizer with bias correction.
//!
//! One state drives both uses in this crate: network training (lr 1e-4
//! range) and per-sample log-likelihood ascent on action windows (lr 0.1).
//! Ascent is expressed by handing `step` the negated gradient.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>], lr: f32) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[Rc<Tensor>], lr: f32) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        Self::new(&shapes, lr)
    }

    /// One Adam update, minimizing along `grads`. Errors out on non-finite
    /// gradients rather than silently corrupting the parameters.
    pub fn step(&mut self, params: &mut [Rc<Tensor>], grads: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        for g in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite("gradients passed to adam_step".into()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = Rc::make_mut(p);
            for (((pv, gv), mv), vv) in pd
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Rc::new(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]))];
        let before = params[0].data().to_vec();
        let grads = vec![Tensor::new(vec![3], vec![0.3, -0.7, 2.0])];
        let mut adam = AdamState::for_params(&params, 0.1);
        adam.step(&mut params, &grads).unwrap();
        for ((p, b), g) in params[0].data().iter().zip(&before).zip(grads[0].data()) {
            let delta = p - b;
            assert!(
                (delta + 0.1 * g.signum()).abs() < 1e-4,
                "delta {delta} for grad {g}"
            );
        }
    }

    #[test]
    fn minimizes_quadratic_from_zero() {
        // f(x) = (x-3)^2, grad = 2(x-3); 500 steps at lr 0.1
        let mut params = vec![Rc::new(Tensor::scalar(0.0))];
        let mut adam = AdamState::for_params(&params, 0.1);
        for _ in 0..500 {
            let x = params[0].data()[0];
            let g = Tensor::scalar(2.0 * (x - 3.0));
            adam.step(&mut params, &[g]).unwrap();
        }
        let x = params[0].data()[0];
        assert!((x - 3.0).abs() < 0.01, "x = {x}");
    }

    #[test]
    fn ascent_mode_increases_objective_after_warmup() {
        // maximize f(x) = -(x-3)^2 by feeding adam the negated gradient;
        // adam oscillates at convergence, so monotonicity is checked on
        // window-averaged values
        let mut params = vec![Rc::new(Tensor::scalar(0.0))];
        let mut adam = AdamState::for_params(&params, 0.1);
        let f = |x: f32| -(x - 3.0) * (x - 3.0);
        let mut values = Vec::new();
        for _ in 0..200 {
            let x = params[0].data()[0];
            let ascent_grad = Tensor::scalar(-(-2.0 * (x - 3.0)));
            adam.step(&mut params, &[ascent_grad]).unwrap();
            values.push(f(params[0].data()[0]));
        }
        let window = 20;
        let means: Vec<f32> = values
            .chunks(window)
            .map(|c| c.iter().sum::<f32>() / c.len() as f32)
            .collect();
        for (w, pair) in means.windows(2).enumerate() {
            assert!(
                pair[1] >= pair[0] - 1e-3,
                "window {w}: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        assert!(*values.last().unwrap() > -0.01);
    }

    #[test]
    fn nan_gradients_are_rejected() {
        let mut params = vec![Rc::new(Tensor::scalar(0.0))];
        let mut adam = AdamState::for_params(&params, 0.1);
        let err = adam
            .step(&mut params, &[Tensor::scalar(f32::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut grads = vec![Tensor::new(vec![2], vec![30.0, 40.0])];
        let norm = clip_grad_norm(&mut grads, 5.0);
        assert!((norm - 50.0).abs() < 1e-3);
        let new_norm: f32 = grads[0].data().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((new_norm - 5.0).abs() < 1e-3);
    }
}
