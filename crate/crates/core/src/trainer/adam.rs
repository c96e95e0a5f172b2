use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`, shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// State for a single scalar parameter.
    pub fn scalar() -> Self {
        Self::new([&Tensor::scalar(0.0)])
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one Adam step in place.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::update`].
pub fn adam_update(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    state.update(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut s = AdamState::new([&p]);
        for _ in 0..5 {
            adam_update(&mut [&mut p], &[Tensor::zeros(&[2])], &mut s, 0.1).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let mut p = Tensor::scalar(0.0);
        let mut s = AdamState::scalar();
        adam_update(&mut [&mut p], &[Tensor::scalar(1.0)], &mut s, 0.1).unwrap();
        let want = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut s = AdamState::scalar();
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.item();
            adam_update(&mut [&mut p], &[Tensor::scalar(-3.0)], &mut s, 0.01).unwrap();
            last = p.item() - before;
        }
        assert!((last - 0.01).abs() < 1e-8, "{last}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut s = AdamState::new([&p]);
        assert!(s.update(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(s.update(&mut [&mut p], &[], 0.1).is_err());
    }
}
