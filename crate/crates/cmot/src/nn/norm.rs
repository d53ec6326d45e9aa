//! Per-channel batch normalization with running statistics.

use ndarray::{Array1, Array4, Ix1};

use super::{Param, ParamFn, StateFn};

/// Batch statistics in train mode, running statistics in eval mode.
/// Running estimates update with momentum 0.1 and epsilon 1e-5.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    /// Scale (gamma), shape (C).
    pub weight: Param,
    /// Shift (beta), shape (C).
    pub bias: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::new(super::init::ones(&[channels])),
            bias: Param::new(super::init::zeros(&[channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        let m = (n * h * w) as f64;

        let (mean, var) = if train {
            let mut mean = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for ni in 0..n {
                    for v in x.index_axis(ndarray::Axis(0), ni).index_axis(ndarray::Axis(0), ci) {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mu = sum / m;
                mean[ci] = mu;
                var[ci] = (sq / m - mu * mu).max(0.0);
            }
            // Running estimates use the unbiased variance.
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..c {
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci]
                    + self.momentum * var[ci] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let gamma = self.weight.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();

        let mut xhat = x.clone();
        let mut y = Array4::zeros(x.dim());
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            let g = gamma[ci];
            let b = beta[ci];
            for ni in 0..n {
                let mut xh = xhat
                    .index_axis_mut(ndarray::Axis(0), ni)
                    .index_axis_move(ndarray::Axis(0), ci);
                let mut yy = y
                    .index_axis_mut(ndarray::Axis(0), ni)
                    .index_axis_move(ndarray::Axis(0), ci);
                for (xv, yv) in xh.iter_mut().zip(yy.iter_mut()) {
                    *xv = (*xv - mu) * is;
                    *yv = g * *xv + b;
                }
            }
        }

        (y, BnCache { xhat, inv_std, train })
    }

    pub fn backward(&mut self, cache: &BnCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f64;
        let gamma = self.weight.value.view().into_dimensionality::<Ix1>().unwrap();

        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let mut dx = Array4::<f64>::zeros(gy.dim());

        for ci in 0..c {
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for ni in 0..n {
                let g = gy.index_axis(ndarray::Axis(0), ni).index_axis_move(ndarray::Axis(0), ci);
                let xh = cache
                    .xhat
                    .index_axis(ndarray::Axis(0), ni)
                    .index_axis_move(ndarray::Axis(0), ci);
                for (gv, xv) in g.iter().zip(xh.iter()) {
                    sum_gy += gv;
                    sum_gy_xhat += gv * xv;
                }
            }
            dgamma[ci] = sum_gy_xhat;
            dbeta[ci] = sum_gy;

            let g = gamma[ci];
            let is = cache.inv_std[ci];
            for ni in 0..n {
                let gyv = gy.index_axis(ndarray::Axis(0), ni).index_axis_move(ndarray::Axis(0), ci);
                let xh = cache
                    .xhat
                    .index_axis(ndarray::Axis(0), ni)
                    .index_axis_move(ndarray::Axis(0), ci);
                let mut dxv = dx
                    .index_axis_mut(ndarray::Axis(0), ni)
                    .index_axis_move(ndarray::Axis(0), ci);
                if cache.train {
                    for ((d, gv), xv) in dxv.iter_mut().zip(gyv.iter()).zip(xh.iter()) {
                        *d = g * is * (*gv - sum_gy / m - *xv * sum_gy_xhat / m);
                    }
                } else {
                    // Fixed statistics: the map is affine per channel.
                    for (d, gv) in dxv.iter_mut().zip(gyv.iter()) {
                        *d = g * is * *gv;
                    }
                }
            }
        }

        {
            let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            wg += &dgamma;
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            bg += &dbeta;
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut StateFn) {
        f(&format!("{prefix}.weight"), &mut self.weight.value);
        f(&format!("{prefix}.bias"), &mut self.bias.value);
        let mut rm = self.running_mean.clone().into_dyn();
        f(&format!("{prefix}.running_mean"), &mut rm);
        self.running_mean = rm.into_dimensionality::<Ix1>().unwrap();
        let mut rv = self.running_var.clone().into_dyn();
        f(&format!("{prefix}.running_var"), &mut rv);
        self.running_var = rv.into_dimensionality::<Ix1>().unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array4::zeros(shape);
        for v in x.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        x
    }

    #[test]
    fn train_mode_normalizes_batch() {
        let mut bn = BatchNorm2d::new(3);
        let x = random4((2, 3, 4, 4), 5);
        let (y, _) = bn.forward(&x, true);
        for ci in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut cnt = 0.0;
            for ni in 0..2 {
                for v in y.index_axis(ndarray::Axis(0), ni).index_axis_move(ndarray::Axis(0), ci) {
                    sum += v;
                    sq += v * v;
                    cnt += 1.0;
                }
            }
            let mean = sum / cnt;
            let var = sq / cnt - mean * mean;
            assert!(mean.abs() < 1e-10);
            // Variance lands at var/(var+eps), just below one.
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in bn.weight.value.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.bias.value.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = random4((2, 2, 3, 3), 13);

        // Keep running stats fixed across probes.
        let loss = |bn: &BatchNorm2d, x: &Array4<f64>| -> f64 {
            let mut b = bn.clone();
            // Weighted sum so the per-channel sums in the backward are exercised.
            let (y, _) = b.forward(x, true);
            y.iter().enumerate().map(|(i, v)| v * (1.0 + 0.1 * i as f64)).sum()
        };

        let mut bn_fwd = bn.clone();
        let (y, cache) = bn_fwd.forward(&x, true);
        let mut gy = Array4::zeros(y.dim());
        for (i, g) in gy.iter_mut().enumerate() {
            *g = 1.0 + 0.1 * i as f64;
        }
        let dx = bn_fwd.backward(&cache, &gy);

        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * eps);
            assert!(
                (num - dx[idx]).abs() < 1e-5,
                "bn dx mismatch at {idx:?}: fd {num} vs {}",
                dx[idx]
            );
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean[0] = 1.0;
        bn.running_var[0] = 4.0;
        let x = Array4::from_elem((1, 1, 1, 1), 3.0);
        let (y, _) = bn.forward(&x, false);
        // (3 - 1) / sqrt(4 + eps) ~= 1.0
        assert!((y[[0, 0, 0, 0]] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
}
