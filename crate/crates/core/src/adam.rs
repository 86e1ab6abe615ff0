use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m1: vec![0.0; len],
            m2: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn len(&self) -> usize {
        self.m1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m1.is_empty()
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    ensure!(
        param.len() == grad.len() && grad.len() == state.m1.len() && state.m1.len() == state.m2.len(),
        "adam shape mismatch: param {}, grad {}, m1 {}, m2 {}",
        param.len(),
        grad.len(),
        state.m1.len(),
        state.m2.len()
    );
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m1.iter_mut())
        .zip(state.m2.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Advances the moments and writes the bias-corrected Adam direction
/// `m_hat / (sqrt(v_hat) + eps)` into `dir` without touching any parameter.
pub fn adam_direction(grad: &[f64], state: &mut AdamState, dir: &mut [f64]) -> Result<()> {
    ensure!(
        grad.len() == state.m1.len() && dir.len() == grad.len() && state.m1.len() == state.m2.len(),
        "adam shape mismatch: grad {}, dir {}, m1 {}",
        grad.len(),
        dir.len(),
        state.m1.len()
    );
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (((d, &g), m), v) in dir.iter_mut().zip(grad).zip(state.m1.iter_mut()).zip(state.m2.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *d = (*m / bc1) / ((*v / bc2).sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_matches_step() {
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![1.0, 2.0, 3.0];
        let mut s1 = AdamState::new(3);
        let mut s2 = AdamState::new(3);
        let mut d = vec![0.0; 3];
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s1, 0.1).unwrap();
            adam_direction(&g, &mut s2, &mut d).unwrap();
        }
        assert_eq!(s1, s2);
        let mut q = vec![1.0, 2.0, 3.0];
        let mut s3 = AdamState::new(3);
        for _ in 0..3 {
            adam_direction(&g, &mut s3, &mut d).unwrap();
            q.iter_mut().zip(&d).for_each(|(q, d)| *q -= 0.1 * d);
        }
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn zero_grad_keeps_param() {
        let mut p = vec![0.5, -1.0, 2.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.5).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1 -> 0.1 * 1 / (1 + 1e-8)
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, 0.1).is_err());
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut p: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
            let mut s = AdamState::new(10);
            for it in 0..25 {
                let g: Vec<f64> = p.iter().map(|x| (x * 3.0 + it as f64).sin()).collect();
                adam_step(&mut p, &g, &mut s, 0.05).unwrap();
            }
            (p, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
