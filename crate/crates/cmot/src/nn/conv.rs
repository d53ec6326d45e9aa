//! 2D convolution via im2col and a single batched matrix product.

use ndarray::{Array2, Array4, ArrayView4, Ix1, Ix4};
use rand::Rng;

use super::{init, Param, ParamFn, StateFn};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, k, k)
    pub weight: Param,
    /// (out_channels)
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// Forward cache: the unrolled input columns and shape bookkeeping.
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(init::kaiming(
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            )),
            bias: Param::new(init::zeros(&[out_channels])),
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// Spatial output size for an input of (h, w).
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let eff = self.dilation * (k - 1) + 1;
        let h_num = (h + 2 * self.padding).checked_sub(eff);
        let w_num = (w + 2 * self.padding).checked_sub(eff);
        match (h_num, w_num) {
            (Some(hn), Some(wn)) => Ok((hn / self.stride + 1, wn / self.stride + 1)),
            _ => Err(Error::Shape(format!(
                "input {h}x{w} too small for kernel {k} with dilation {}",
                self.dilation
            ))),
        }
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> Result<(Array4<f64>, ConvCache)> {
        let (n, c_in, h, w) = x.dim();
        if c_in != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c_in}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let cols = im2col(x, self.kernel(), self.stride, self.padding, self.dilation, oh, ow);

        let c_out = self.out_channels();
        let k = self.kernel();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("contiguous weight");
        // (c_out, n*oh*ow)
        let y2 = w2.dot(&cols);
        let mut y = cols_to_feature_map(y2, n, c_out, oh, ow);

        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for ni in 0..n {
            for ci in 0..c_out {
                let b = bias[ci];
                y.index_axis_mut(ndarray::Axis(0), ni)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .mapv_inplace(|v| v + b);
            }
        }

        Ok((
            y,
            ConvCache {
                cols,
                in_dim: (n, c_in, h, w),
                out_hw: (oh, ow),
            },
        ))
    }

    /// Backward pass. Accumulates weight/bias gradients when `need_wgrad`
    /// and returns the input gradient when `need_xgrad`.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        gy: &Array4<f64>,
        need_xgrad: bool,
        need_wgrad: bool,
    ) -> Option<Array4<f64>> {
        let (n, c_in, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        let c_out = self.out_channels();
        let k = self.kernel();

        let gy2 = feature_map_to_cols(gy, n, c_out, oh, ow);

        if need_wgrad {
            let dw2 = gy2.dot(&cache.cols.t());
            let mut wgrad = self.weight.grad.view_mut().into_dimensionality::<Ix4>().unwrap();
            let dw4 = dw2
                .into_shape_with_order((c_out, c_in, k, k))
                .expect("contiguous grad");
            wgrad += &dw4;
            let db = gy2.sum_axis(ndarray::Axis(1));
            let mut bgrad = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            bgrad += &db;
        }

        if need_xgrad {
            let w2 = self
                .weight
                .value
                .view()
                .into_shape_with_order((c_out, c_in * k * k))
                .expect("contiguous weight");
            let dcols = w2.t().dot(&gy2);
            Some(col2im(
                &dcols,
                (n, c_in, h, w),
                k,
                self.stride,
                self.padding,
                self.dilation,
                oh,
                ow,
            ))
        } else {
            None
        }
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

/// Unroll input patches into a (c_in*k*k, n*oh*ow) matrix. Out-of-bounds
/// (padding) entries stay zero.
fn im2col(
    x: &ArrayView4<f64>,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c_in, h, w) = x.dim();
    let l = oh * ow;
    let mut cols = Array2::<f64>::zeros((c_in * k * k, n * l));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");

    let row_stride = n * l;
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * row_stride;
                for ni in 0..n {
                    let x_base = (ni * c_in + ci) * h * w;
                    let col_base = row_base + ni * l;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki * dilation) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * w;
                        let out_base = col_base + oi * ow;
                        for oj in 0..ow {
                            let iw = (oj * stride + kj * dilation) as isize - padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[out_base + oj] = xs[x_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add column gradients back to input layout.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let (n, c_in, h, w) = in_dim;
    let l = oh * ow;
    let mut dx = Array4::<f64>::zeros((n, c_in, h, w));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");

    let row_stride = n * l;
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * row_stride;
                for ni in 0..n {
                    let x_base = (ni * c_in + ci) * h * w;
                    let col_base = row_base + ni * l;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki * dilation) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * w;
                        let out_base = col_base + oi * ow;
                        for oj in 0..ow {
                            let iw = (oj * stride + kj * dilation) as isize - padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[x_row + iw as usize] += ds[out_base + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// (c_out, n*l) -> (n, c_out, oh, ow)
fn cols_to_feature_map(y2: Array2<f64>, n: usize, c_out: usize, oh: usize, ow: usize) -> Array4<f64> {
    let l = oh * ow;
    let y3 = y2.into_shape_with_order((c_out, n, l)).expect("contiguous");
    let y3 = y3.permuted_axes([1, 0, 2]);
    let y3 = y3.as_standard_layout().into_owned();
    y3.into_shape_with_order((n, c_out, oh, ow)).expect("contiguous")
}

/// (n, c_out, oh, ow) -> (c_out, n*l)
fn feature_map_to_cols(y: &Array4<f64>, n: usize, c_out: usize, oh: usize, ow: usize) -> Array2<f64> {
    let l = oh * ow;
    let y3 = y.view().into_shape_with_order((n, c_out, l)).expect("contiguous");
    let y3 = y3.permuted_axes([1, 0, 2]);
    let y3 = y3.as_standard_layout().into_owned();
    y3.into_shape_with_order((c_out, n * l)).expect("contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_reference(
        x: &Array4<f64>,
        weight: &Array4<f64>,
        bias: &[f64],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Array4<f64> {
        let (n, c_in, h, w) = x.dim();
        let (c_out, _, k, _) = weight.dim();
        let eff = dilation * (k - 1) + 1;
        let oh = (h + 2 * padding - eff) / stride + 1;
        let ow = (w + 2 * padding - eff) / stride + 1;
        let mut y = Array4::<f64>::zeros((n, c_out, oh, ow));
        for ni in 0..n {
            for co in 0..c_out {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oi * stride + ki * dilation) as isize
                                        - padding as isize;
                                    let iw = (oj * stride + kj * dilation) as isize
                                        - padding as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < w
                                    {
                                        acc += x[[ni, ci, ih as usize, iw as usize]]
                                            * weight[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array4::zeros(shape);
        for v in x.iter_mut() {
            *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        x
    }

    #[test]
    fn forward_matches_reference_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, padding, dilation) in
            &[(1, 1, 0, 1), (3, 1, 1, 1), (3, 1, 2, 2), (3, 2, 0, 1), (5, 2, 2, 1)]
        {
            let conv = Conv2d::new(3, 4, k, stride, padding, dilation, &mut rng);
            let x = random_input((2, 3, 9, 8), 7);
            let (y, _) = conv.forward(&x.view()).unwrap();
            let w4 = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let bias: Vec<f64> = conv.bias.value.iter().copied().collect();
            let y_ref = conv_reference(&x, &w4.to_owned(), &bias, stride, padding, dilation);
            let max_diff = (&y - &y_ref)
                .iter()
                .map(|d| d.abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "k={k} s={stride}: diff {max_diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, 1, &mut rng);
        let x = random_input((1, 2, 5, 5), 9);

        let (y, cache) = conv.forward(&x.view()).unwrap();
        let gy = Array4::ones(y.dim());
        let dx = conv.backward(&cache, &gy, true, true).unwrap();

        let eps = 1e-6;
        // Input gradient.
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fp: f64 = conv.forward(&xp.view()).unwrap().0.sum();
            let fm: f64 = conv.forward(&xm.view()).unwrap().0.sum();
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-6, "dx mismatch at {idx:?}");
        }
        // Weight gradient.
        for flat in [0usize, 7, 17] {
            let orig = conv.weight.value.as_slice().unwrap()[flat];
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig + eps;
            let fp: f64 = conv.forward(&x.view()).unwrap().0.sum();
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig - eps;
            let fm: f64 = conv.forward(&x.view()).unwrap().0.sum();
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let ana = conv.weight.grad.as_slice().unwrap()[flat];
            assert!((num - ana).abs() < 1e-6, "dw mismatch at {flat}");
        }
        // Bias gradient: d(sum y)/db_c = #spatial positions * batch.
        let (_, _, oh, ow) = y.dim();
        for b in conv.bias.grad.iter() {
            assert!((b - (oh * ow) as f64).abs() < 1e-9);
        }
        let _ = y.index_axis(Axis(0), 0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(4, 4, 3, 1, 1, 1, &mut rng);
        let x = random_input((1, 3, 5, 5), 0);
        assert!(conv.forward(&x.view()).is_err());
    }
}
