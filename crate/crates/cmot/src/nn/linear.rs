//! Affine map on (batch, features) matrices.

use ndarray::{Array1, Array2, Ix1, Ix2};
use rand::Rng;

use super::{init, Param, ParamFn, StateFn};

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out_features, in_features)
    pub weight: Param,
    /// (out_features)
    pub bias: Param,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(init::kaiming(&[out_features, in_features], in_features, rng)),
            bias: Param::new(init::zeros(&[out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, gy: &Array2<f64>) -> Array2<f64> {
        {
            let dw = gy.t().dot(&cache.x);
            let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            wg += &dw;
            let db: Array1<f64> = gy.sum_axis(ndarray::Axis(0));
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            bg += &db;
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        gy.dot(&w)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut StateFn) {
        f(&format!("{prefix}.weight"), &mut self.weight.value);
        f(&format!("{prefix}.bias"), &mut self.bias.value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_and_backward_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(2, 2, &mut rng);
        lin.weight.value = array![[1.0, 2.0], [3.0, 4.0]].into_dyn();
        lin.bias.value = array![0.5, -0.5].into_dyn();

        let x = array![[1.0, 1.0]];
        let (y, cache) = lin.forward(&x);
        assert_eq!(y, array![[3.5, 6.5]]);

        let gy = array![[1.0, 1.0]];
        let dx = lin.backward(&cache, &gy);
        // dx = gy . W = [1+3, 2+4]
        assert_eq!(dx, array![[4.0, 6.0]]);
        assert_eq!(
            lin.weight.grad.clone().into_dimensionality::<Ix2>().unwrap(),
            array![[1.0, 1.0], [1.0, 1.0]]
        );
    }
}
