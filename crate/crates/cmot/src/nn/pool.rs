//! Max pooling and global average pooling.

use ndarray::{Array2, Array4};

/// 2x2 max pooling with stride 2; trailing rows/columns are dropped.
pub struct MaxPoolCache {
    /// Flat input index of the maximum for every output element.
    argmax: Vec<usize>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

pub fn max_pool2(x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
    let (n, c, h, w) = x.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");

    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let i0 = base + (2 * oi) * w + 2 * oj;
                    let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = candidates[0];
                    for &cand in &candidates[1..] {
                        if xs[cand] > xs[best] {
                            best = cand;
                        }
                    }
                    let o = obase + oi * ow + oj;
                    ys[o] = xs[best];
                    argmax[o] = best;
                }
            }
        }
    }

    (
        y,
        MaxPoolCache {
            argmax,
            in_dim: (n, c, h, w),
            out_hw: (oh, ow),
        },
    )
}

pub fn max_pool2_backward(cache: &MaxPoolCache, gy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = cache.in_dim;
    let (oh, ow) = cache.out_hw;
    assert_eq!(gy.dim(), (n, c, oh, ow));
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let ds = dx.as_slice_mut().expect("standard layout");
    for (o, g) in gy.as_slice().expect("standard layout").iter().enumerate() {
        ds[cache.argmax[o]] += g;
    }
    dx
}

/// Spatial mean per (sample, channel): (N, C, H, W) -> (N, C).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[[ni, ci]] = x
                .index_axis(ndarray::Axis(0), ni)
                .index_axis_move(ndarray::Axis(0), ci)
                .sum()
                / m;
        }
    }
    y
}

pub fn global_avg_pool_backward(gy: &Array2<f64>, hw: (usize, usize)) -> Array4<f64> {
    let (n, c) = gy.dim();
    let (h, w) = hw;
    let m = (h * w) as f64;
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gy[[ni, ci]] / m;
            dx.index_axis_mut(ndarray::Axis(0), ni)
                .index_axis_move(ndarray::Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        x[[0, 0, 0, 1]] = 5.0;
        x[[0, 0, 3, 3]] = 7.0;
        let (y, cache) = max_pool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 7.0);

        let gy = Array4::from_elem((1, 1, 2, 2), 1.0);
        let dx = max_pool2_backward(&cache, &gy);
        assert_eq!(dx[[0, 0, 0, 1]], 1.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn gap_means_and_distributes() {
        let mut x = Array4::<f64>::zeros((1, 2, 2, 2));
        x[[0, 0, 0, 0]] = 4.0;
        x[[0, 1, 1, 1]] = 8.0;
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 1.0);
        assert_eq!(y[[0, 1]], 2.0);

        let gy = ndarray::array![[4.0, 8.0]];
        let dx = global_avg_pool_backward(&gy, (2, 2));
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 1, 0, 0]], 2.0);
    }
}
