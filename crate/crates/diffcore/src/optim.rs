use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::{DiffError, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<Array>,
    pub second: Vec<Array>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array>) -> Self {
        let first: Vec<Array> = params
            .into_iter()
            .map(|p| Array::zeros(p.shape()))
            .collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update. Nothing is modified when a gradient is non-finite
    /// or shapes do not line up.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                expected: vec![self.first.len()],
                found: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(DiffError::NonFinite("adam gradient"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Array::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / (norm + 1e-12);
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// Cosine decay from `lr0` at `progress = 0` to zero at `progress = 1`.
pub fn cosine_lr(lr0: f64, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(DiffError::OutOfRange {
            what: "schedule progress",
            value: progress,
        });
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Array::row(vec![1.0, -2.0]);
        let mut adam = AdamState::new([&p]);
        adam.step(&mut [&mut p], &[Array::zeros(&[1, 2])], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for g in [3.0, -0.02] {
            let mut p = Array::scalar(0.5);
            let mut adam = AdamState::new([&p]);
            let lr = 0.01;
            adam.step(&mut [&mut p], &[Array::scalar(g)], lr).unwrap();
            let moved = p.item() - 0.5;
            assert!((moved + lr * g.signum()).abs() < 1e-6 * lr, "moved {moved}");
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut w = Array::scalar(1.0);
        let mut adam = AdamState::new([&w]);
        for _ in 0..1000 {
            let g = Array::scalar(2.0 * w.item());
            adam.step(&mut [&mut w], &[g], 0.05).unwrap();
        }
        assert!(w.item().abs() < 0.05, "w = {}", w.item());
        assert_eq!(adam.step, 1000);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = Array::scalar(1.0);
        let mut adam = AdamState::new([&p]);
        let err = adam.step(&mut [&mut p], &[Array::scalar(f64::NAN)], 0.1);
        assert!(matches!(err, Err(DiffError::NonFinite(_))));
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(3e-4, 0.0).unwrap(), 3e-4);
        assert!(cosine_lr(3e-4, 1.0).unwrap().abs() < 1e-20);
        assert!((cosine_lr(1.0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!(cosine_lr(1.0, 1.5).is_err());
        assert!(cosine_lr(1.0, -0.1).is_err());
    }

    #[test]
    fn grad_norm_clip() {
        let mut g = vec![Array::row(vec![3.0]), Array::row(vec![4.0])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let after: f64 = g.iter().map(Array::sq_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
    }
}
