//! Instance normalization (per item, per channel over spatial dims).

use ndarray::{Array1, Array4, ArrayView4};

use super::Scalar;

#[derive(Debug, Clone)]
pub struct InstanceNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub eps: F,
}

/// Values cached by the forward pass for backprop.
pub struct NormCache<F> {
    /// Normalized pre-affine activations.
    pub xhat: Array4<F>,
    /// Per-channel 1/sqrt(var + eps).
    pub inv_std: Array1<F>,
}

impl<F: Scalar> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            eps: F::f(1e-5),
        }
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> (Array4<F>, NormCache<F>) {
        let c = x.shape()[0];
        let n = x.len() / c;
        let n_f = F::f(n as f64);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::<F>::zeros(c);
        for (ci, mut ch) in xhat.outer_iter_mut().enumerate() {
            let mut mean = F::zero();
            for &v in ch.iter() {
                mean += v;
            }
            mean = mean / n_f;
            let mut var = F::zero();
            for &v in ch.iter() {
                let d = v - mean;
                var += d * d;
            }
            var = var / n_f;
            let istd = F::one() / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            for v in ch.iter_mut() {
                *v = (*v - mean) * istd;
            }
        }
        let mut y = xhat.clone();
        for (ci, mut ch) in y.outer_iter_mut().enumerate() {
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            for v in ch.iter_mut() {
                *v = *v * g + b;
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    /// Accumulates dgamma/dbeta; returns dx.
    pub fn backward(
        &self,
        cache: &NormCache<F>,
        dy: &ArrayView4<F>,
        dgamma: &mut [F],
        dbeta: &mut [F],
    ) -> Array4<F> {
        let c = dy.shape()[0];
        let n = dy.len() / c;
        let n_f = F::f(n as f64);
        let mut dx = dy.to_owned();
        for ci in 0..c {
            let xhat_ch = cache.xhat.index_axis(ndarray::Axis(0), ci);
            let dy_ch = dy.index_axis(ndarray::Axis(0), ci);
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for (&g, &xh) in dy_ch.iter().zip(xhat_ch.iter()) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
            dgamma[ci] += sum_dy_xhat;
            dbeta[ci] += sum_dy;

            let scale = self.gamma[ci] * cache.inv_std[ci] / n_f;
            let mut dx_ch = dx.index_axis_mut(ndarray::Axis(0), ci);
            for ((d, &g), &xh) in dx_ch.iter_mut().zip(dy_ch.iter()).zip(xhat_ch.iter()) {
                *d = scale * (n_f * g - sum_dy - xh * sum_dy_xhat);
            }
        }
        dx
    }

    pub fn param_sizes(&self) -> [usize; 2] {
        [self.gamma.len(), self.beta.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn normalizes_each_channel() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = Array4::from_shape_fn((3, 4, 4, 4), |_| rng.random_range(-2.0..7.0));
        let norm = InstanceNorm::<f64>::new(3);
        let (y, _) = norm.forward(&x.view());
        for ch in y.outer_iter() {
            let n = ch.len() as f64;
            let mean: f64 = ch.iter().sum::<f64>() / n;
            let var: f64 = ch.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((2, 3, 3, 3), |_| rng.random_range(-1.0..1.0));
        let mut norm = InstanceNorm::<f64>::new(2);
        norm.gamma = Array1::from_vec(vec![1.3, 0.7]);
        norm.beta = Array1::from_vec(vec![0.1, -0.2]);
        let coeffs = Array4::from_shape_fn((2, 3, 3, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |nm: &InstanceNorm<f64>, x: &Array4<f64>| -> f64 {
            (nm.forward(&x.view()).0 * &coeffs.view()).sum()
        };

        let (_, cache) = norm.forward(&x.view());
        let mut dg = vec![0.0; 2];
        let mut db = vec![0.0; 2];
        let dx = norm.backward(&cache, &coeffs.view(), &mut dg, &mut db);

        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= eps;
            let fd = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * eps);
            let got = dx.as_slice().unwrap()[i];
            assert!((fd - got).abs() < 1e-5, "dx[{i}]: {fd} vs {got}");
        }
        for i in 0..2 {
            let mut n2 = norm.clone();
            n2.gamma[i] += eps;
            let mut n3 = norm.clone();
            n3.gamma[i] -= eps;
            let fd = (loss(&n2, &x) - loss(&n3, &x)) / (2.0 * eps);
            assert!((fd - dg[i]).abs() < 1e-6);
            let mut n2 = norm.clone();
            n2.beta[i] += eps;
            let mut n3 = norm.clone();
            n3.beta[i] -= eps;
            let fd = (loss(&n2, &x) - loss(&n3, &x)) / (2.0 * eps);
            assert!((fd - db[i]).abs() < 1e-6);
        }
    }
}
