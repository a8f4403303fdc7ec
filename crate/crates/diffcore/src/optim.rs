use crate::{DiffError, NdArray, Real, Result};

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; `0` disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 0,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &[NdArray<T>]) -> Self {
        Self {
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

impl AdamW {
    /// Learning rate in effect for the given (1-based) step.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }

    /// Applies one update in place.
    pub fn step<T: Real>(
        &self,
        params: &mut [NdArray<T>],
        grads: &[NdArray<T>],
        state: &mut AdamWState<T>,
    ) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(DiffError::Contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if params.len() != grads.len() || params.len() != state.first.len() {
            return Err(DiffError::Contract(format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(DiffError::shape("adamw_step", p.shape(), g.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let lr = self.lr_at(state.step);
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        let step_size = T::from_f64(lr / bias1);
        let inv_sqrt_bias2 = T::from_f64(1.0 / bias2.sqrt());
        let eps = T::from_f64(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.first.iter_mut().zip(state.second.iter_mut()))
        {
            let pd = p.make_mut();
            for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = vi.sqrt() * inv_sqrt_bias2 + eps;
                *w = *w * decay - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut params = vec![NdArray::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![NdArray::zeros(&[3])];
        let mut state = AdamWState::new(&params);
        for _ in 0..5 {
            opt.step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params[0].data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let opt = AdamW {
            lr: 1e-2,
            weight_decay: 1e-4,
            ..AdamW::default()
        };
        let mut params = vec![NdArray::<f64>::new(vec![1], vec![2.0]).unwrap()];
        let grads = vec![NdArray::zeros(&[1])];
        let mut state = AdamWState::new(&params);
        for _ in 0..3 {
            opt.step(&mut params, &grads, &mut state).unwrap();
        }
        let expected = 2.0 * (1.0 - 1e-2 * 1e-4_f64).powi(3);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // Step 1 from zero moments with g = 0.5:
        //   m = 0.1 * 0.5 = 0.05,  v = 0.001 * 0.25 = 2.5e-4
        //   m_hat = 0.05 / 0.1 = 0.5,  v_hat = 2.5e-4 / 0.001 = 0.25
        //   w = 1.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8)
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        let mut params = vec![NdArray::<f64>::new(vec![1], vec![1.0]).unwrap()];
        let grads = vec![NdArray::new(vec![1], vec![0.5]).unwrap()];
        let mut state = AdamWState::new(&params);
        opt.step(&mut params, &grads, &mut state).unwrap();
        let expected = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-12, "{}", params[0].data()[0]);
        assert!((state.first[0][0] - 0.05).abs() < 1e-15);
        assert!((state.second[0][0] - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let opt = AdamW {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamW::default()
        };
        assert_eq!(opt.lr_at(1), 0.25);
        assert_eq!(opt.lr_at(4), 1.0);
        assert_eq!(opt.lr_at(100), 1.0);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let opt = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        let mut params = vec![NdArray::<f32>::zeros(&[1])];
        let grads = vec![NdArray::zeros(&[1])];
        let mut state = AdamWState::new(&params);
        assert!(opt.step(&mut params, &grads, &mut state).is_err());
    }
}
