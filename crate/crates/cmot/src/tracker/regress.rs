//! Linear box refinement: ridge regression from head features to box
//! deltas in the usual (dx, dy, dlog w, dlog h) parameterization, trained on
//! first-frame samples only.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RidgeRegressor {
    /// (4, D + 1); the last column is the bias.
    weights: Array2<f64>,
}

/// Regression target from a sample box to the ground truth.
pub fn box_delta(sample: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (scx, scy) = sample.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - scx) / sample.w,
        (gcy - scy) / sample.h,
        (gt.w / sample.w).ln(),
        (gt.h / sample.h).ln(),
    ]
}

/// Largest center/log-scale delta the regressor is trusted to apply. The
/// map is fit on near-target samples of the first frame; a large predicted
/// delta means the feature is far outside that training distribution (for
/// instance after a modality switch) and extrapolating would corrupt the
/// box, so refinement is skipped instead.
const TRUST_CENTER: f64 = 0.15;
const TRUST_SCALE: f64 = 0.08;

fn apply_delta(b: &BoundingBox, d: [f64; 4]) -> BoundingBox {
    if d[0].abs() > TRUST_CENTER
        || d[1].abs() > TRUST_CENTER
        || d[2].abs() > TRUST_SCALE
        || d[3].abs() > TRUST_SCALE
    {
        return *b;
    }
    let (cx, cy) = b.center();
    let w = b.w * d[2].exp();
    let h = b.h * d[3].exp();
    BoundingBox {
        x: cx + d[0] * b.w - w / 2.0,
        y: cy + d[1] * b.h - h / 2.0,
        w,
        h,
    }
}

/// Cholesky solve of the symmetric positive definite system A X = B.
fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.dim().0;
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "ridge system is not positive definite at row {i}"
                    )));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }

    let m = b.dim().1;
    let mut x = Array2::<f64>::zeros((n, m));
    for col in 0..m {
        // Forward substitution L y = b.
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut sum = b[[i, col]];
            for k in 0..i {
                sum -= l[[i, k]] * y[k];
            }
            y[i] = sum / l[[i, i]];
        }
        // Back substitution L^T x = y.
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = sum / l[[i, i]];
        }
    }
    Ok(x)
}

impl RidgeRegressor {
    /// Fit on (N, D) features and (N, 4) delta targets with ridge weight
    /// `lambda`.
    pub fn fit(features: &Array2<f64>, targets: &Array2<f64>, lambda: f64) -> Result<Self> {
        let (n, d) = features.dim();
        if targets.dim() != (n, 4) {
            return Err(Error::Shape(format!(
                "targets {:?} do not match {n} samples",
                targets.dim()
            )));
        }
        if n == 0 {
            return Err(Error::InsufficientData("no regression samples".into()));
        }
        // Augment with a bias column.
        let mut x = Array2::<f64>::ones((n, d + 1));
        x.slice_mut(ndarray::s![.., ..d]).assign(features);

        let mut gram = x.t().dot(&x);
        for i in 0..d + 1 {
            gram[[i, i]] += lambda;
        }
        let xty = x.t().dot(targets);
        let w = cholesky_solve(&gram, &xty)?;
        Ok(RidgeRegressor {
            weights: w.t().to_owned(),
        })
    }

    /// Refine a box given its feature vector.
    pub fn refine(&self, feature: &ArrayView1<f64>, b: &BoundingBox) -> BoundingBox {
        let d = self.weights.dim().1 - 1;
        assert_eq!(feature.len(), d, "feature width mismatch");
        let mut delta = [0.0f64; 4];
        for (o, item) in delta.iter_mut().enumerate() {
            let mut acc = self.weights[[o, d]];
            for i in 0..d {
                acc += self.weights[[o, i]] * feature[i];
            }
            *item = acc;
        }
        apply_delta(b, delta)
    }
}
