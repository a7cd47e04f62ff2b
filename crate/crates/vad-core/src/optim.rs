use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. State tensors are allocated lazily on the first
/// step and must shape-match the parameters from then on.
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Result<Self, TensorError> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self, TensorError> {
        if lr <= 0.0 {
            return Err(TensorError::InvalidLearningRate { lr });
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update. `params[i]` is updated in place from `grads[i]`;
    /// the slices must line up one-to-one across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::OptimizerStateMismatch);
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::OptimizerStateMismatch);
        }
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::ONE;
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::OptimizerStateMismatch);
            }
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(Adam::<f64>::new(0.0).is_err());
        assert!(Adam::<f64>::new(-0.1).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments_unchanged() {
        let mut p = Tensor::<f64>::full(&[3], 1.5);
        let g = Tensor::<f64>::zeros(&[3]);
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.5, 1.5, 1.5]);
        assert!(opt.m[0].data().iter().all(|&v| v == 0.0));
        assert!(opt.v[0].data().iter().all(|&v| v == 0.0));
    }

    /// Closed-form first Adam step: delta = lr * m_hat / (sqrt(v_hat) + eps).
    #[test]
    fn first_step_matches_closed_form() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let g = 1.0;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected_delta = lr * m_hat / (v_hat.sqrt() + eps);

        let mut p = Tensor::<f64>::full(&[1], 2.0);
        let gt = Tensor::<f64>::full(&[1], g);
        let mut opt = Adam::with_betas(lr, b1, b2, eps).unwrap();
        opt.step(&mut [&mut p], &[&gt]).unwrap();
        assert!((p.data()[0] - (2.0 - expected_delta)).abs() < 1e-12);
        assert!((expected_delta - 0.1).abs() < 1e-6, "delta {expected_delta}");
    }

    #[test]
    fn zero_betas_reduce_to_sign_scaled_step() {
        let (lr, eps) = (0.05, 1e-8);
        for g in [0.7, -2.0, 3.5] {
            let mut p = Tensor::<f64>::full(&[1], 1.0);
            let gt = Tensor::<f64>::full(&[1], g);
            let mut opt = Adam::with_betas(lr, 0.0, 0.0, eps).unwrap();
            opt.step(&mut [&mut p], &[&gt]).unwrap();
            let expected = 1.0 - lr * g / (g.abs() + eps);
            assert!((p.data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_state_gives_identical_results() {
        let g = Tensor::<f64>::from_vec(vec![2], vec![0.3, -0.8]).unwrap();
        let run = || {
            let mut p = Tensor::<f64>::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
            let mut opt = Adam::new(0.01).unwrap();
            for _ in 0..5 {
                opt.step(&mut [&mut p], &[&g]).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
