use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};

/// Bias-corrected Adam. Moment buffers are allocated on the first update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// One update over arbitrary parameter slices. Rejects the whole update,
    /// leaving parameters and moments untouched, if any gradient is not finite.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::Schema("gradient shapes do not match parameters".into()));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::UpdateRejected("non-finite gradient".into()));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::Schema("optimizer state shape mismatch".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let step_size = self.learning_rate / (1.0 - b1.powi(t));
        let inv_sqrt_c2 = 1.0 / (1.0 - b2.powi(t)).sqrt();
        let eps = self.epsilon;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to every trainable tensor of `net`.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let mut params = net.trainable_mut();
    state.update(&mut params, &grads.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut adam = AdamState::new(1e-3);
        adam.update(&mut [&mut p[..]], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.5, -3.0, 1e3] {
            let mut p = vec![2.0];
            let mut adam = AdamState::new(1e-2);
            adam.update(&mut [&mut p[..]], &[vec![g]]).unwrap();
            let moved = 2.0 - p[0];
            assert!((moved.abs() - 1e-2).abs() < 1e-9, "g={g} moved {moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut p = vec![1.0, 2.0];
        let mut adam = AdamState::new(1e-2);
        adam.update(&mut [&mut p[..]], &[vec![0.1, 0.2]]).unwrap();
        let snapshot = (p.clone(), adam.clone());
        let err = adam.update(&mut [&mut p[..]], &[vec![f64::NAN, 0.2]]);
        assert!(matches!(err, Err(Error::UpdateRejected(_))));
        assert_eq!((p, adam), snapshot);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let target = [3.0, -1.5, 0.25, 8.0];
        let mut w = vec![0.0; 4];
        let loss = |w: &[f64]| -> f64 { w.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum() };
        let mut adam = AdamState::new(0.1);
        let initial = loss(&w);
        let mut best = initial;
        let mut improved_steps = 0;
        for _ in 0..100 {
            let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam.update(&mut [&mut w[..]], &[g]).unwrap();
            let l = loss(&w);
            if l < best {
                best = l;
                improved_steps += 1;
            }
        }
        assert!(best < 0.05 * initial, "best {best} initial {initial}");
        assert!(improved_steps > 50);
    }
}
