//! Bias-corrected adaptive-moment updates.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One update of `params` in place. Arithmetic is f64; storage stays f32.
pub fn adam_step(params: &mut Tensor, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    ensure!(
        params.len() == grads.len() && grads.len() == state.len(),
        Shape,
        "adam sizes differ: params {}, grads {}, state {}",
        params.len(),
        grads.len(),
        state.len()
    );
    ensure!(
        grads.iter().all(|g| g.is_finite()),
        InvalidParam,
        "non-finite gradient"
    );
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = (*p as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::new(vec![3], vec![0.25, -1.0, 7.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let grads = [3.0, -0.02, 1e3];
        let mut p = Tensor::zeros(&[3]);
        let mut s = AdamState::new(3);
        adam_step(&mut p, &grads, &mut s, 0.1).unwrap();
        // mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps)
        for (&x, &g) in p.data().iter().zip(&grads) {
            let want = -0.1 * g / (g.abs() + 1e-8);
            assert!((x as f64 - want).abs() < 1e-7, "{x} vs {want}");
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut a = Tensor::full(&[4], 0.5);
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(4), AdamState::new(4));
        let g = [0.1, -0.2, 0.3, 0.0];
        for _ in 0..5 {
            adam_step(&mut a, &g, &mut sa, 0.01).unwrap();
            adam_step(&mut b, &g, &mut sb, 0.01).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(adam_step(&mut a, &[0.0; 3], &mut sa, 0.01).is_err());
    }
}
