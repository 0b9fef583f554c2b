//! Stochastic gradient descent with Nesterov momentum.
//!
//! Update rule (PyTorch convention):
//!   v <- mu * v + g
//!   theta <- theta - lr * (g + mu * v)
//! With mu = 0 this reduces to plain SGD, theta <- theta - lr * g, exactly.

use crate::nn::{Gradients, Scalar};

#[derive(Debug, Clone)]
pub struct NesterovSgd<F> {
    pub lr: F,
    pub momentum: F,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> NesterovSgd<F> {
    pub fn new(lr: F, momentum: F, param_sizes: &[usize]) -> Self {
        Self {
            lr,
            momentum,
            velocity: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [F]>, grads: &Gradients<F>) {
        debug_assert_eq!(params.len(), self.velocity.len());
        let mu = self.momentum;
        let lr = self.lr;
        for ((theta, v), g) in params
            .into_iter()
            .zip(self.velocity.iter_mut())
            .zip(grads.slots.iter())
        {
            debug_assert_eq!(theta.len(), g.len());
            if mu == F::zero() {
                for (t, &gi) in theta.iter_mut().zip(g.iter()) {
                    *t = *t - lr * gi;
                }
            } else {
                for ((t, vi), &gi) in theta.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *vi = mu * *vi + gi;
                    *t = *t - lr * (gi + mu * *vi);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(theta: &[f64]) -> Gradients<f64> {
        // f(theta) = 0.5 * sum(theta^2), grad = theta.
        Gradients { slots: vec![theta.to_vec()] }
    }

    #[test]
    fn zero_momentum_moves_exactly_minus_lr_grad() {
        let mut theta = vec![1.0, -2.0, 0.5];
        let start = theta.clone();
        let g = quadratic_grad(&theta);
        let mut opt = NesterovSgd::new(0.1, 0.0, &[3]);
        opt.step(vec![theta.as_mut_slice()], &g);
        for i in 0..3 {
            assert_eq!(theta[i], start[i] - 0.1 * g.slots[0][i]);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut theta = vec![1.0, -2.0, 0.5];
        let start = theta.clone();
        let g = quadratic_grad(&theta);
        let mut opt = NesterovSgd::new(0.0, 0.9, &[3]);
        for _ in 0..5 {
            opt.step(vec![theta.as_mut_slice()], &g);
        }
        assert_eq!(theta, start);
    }

    #[test]
    fn momentum_accelerates_on_a_quadratic() {
        // Both optimizers run the same number of steps on f = 0.5 theta^2.
        let run = |momentum: f64| -> f64 {
            let mut theta = vec![10.0];
            let mut opt = NesterovSgd::new(0.05, momentum, &[1]);
            for _ in 0..30 {
                let g = quadratic_grad(&theta);
                opt.step(vec![theta.as_mut_slice()], &g);
            }
            theta[0].abs()
        };
        assert!(run(0.9) < run(0.0));
    }

    #[test]
    fn matches_hand_iterated_recurrence() {
        // One parameter, constant gradient 1: v_t = mu v_{t-1} + 1,
        // theta_t = theta_{t-1} - lr (1 + mu v_t).
        let (lr, mu) = (0.1f64, 0.9f64);
        let mut theta = vec![0.0f64];
        let mut opt = NesterovSgd::new(lr, mu, &[1]);
        let mut want = 0.0f64;
        let mut v = 0.0f64;
        for _ in 0..7 {
            let g = Gradients { slots: vec![vec![1.0]] };
            opt.step(vec![theta.as_mut_slice()], &g);
            v = mu * v + 1.0;
            want -= lr * (1.0 + mu * v);
        }
        assert!((theta[0] - want).abs() < 1e-12);
    }
}
