//! Candidate crops and sample-box generation.
//!
//! A candidate box is padded by a fixed factor around its center, cropped
//! from the frame with zero padding outside the image, and bilinearly
//! resized to a square patch.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::evalkit::iou;

/// Crop a padded box and resize to `patch x patch`, channels-first.
pub fn extract_patch(
    image: &Array3<f64>,
    bbox: &BoundingBox,
    pad_factor: f64,
    patch: usize,
) -> Array3<f64> {
    let (h, w, _) = image.dim();
    let (cx, cy) = bbox.center();
    let bw = bbox.w * pad_factor;
    let bh = bbox.h * pad_factor;
    let x0 = cx - bw / 2.0;
    let y0 = cy - bh / 2.0;

    let mut out = Array3::<f64>::zeros((3, patch, patch));
    for py in 0..patch {
        // Map patch pixel centers into source coordinates.
        let sy = y0 + (py as f64 + 0.5) / patch as f64 * bh - 0.5;
        let y_lo = sy.floor() as isize;
        let fy = sy - y_lo as f64;
        for px in 0..patch {
            let sx = x0 + (px as f64 + 0.5) / patch as f64 * bw - 0.5;
            let x_lo = sx.floor() as isize;
            let fx = sx - x_lo as f64;

            for c in 0..3 {
                let sample = |yy: isize, xx: isize| -> f64 {
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        0.0
                    } else {
                        image[[yy as usize, xx as usize, c]]
                    }
                };
                let v00 = sample(y_lo, x_lo);
                let v01 = sample(y_lo, x_lo + 1);
                let v10 = sample(y_lo + 1, x_lo);
                let v11 = sample(y_lo + 1, x_lo + 1);
                let v0 = v00 + (v01 - v00) * fx;
                let v1 = v10 + (v11 - v10) * fx;
                out[[c, py, px]] = v0 + (v1 - v0) * fy;
            }
        }
    }
    out
}

/// Stack patches for a batch of boxes into an (N, 3, P, P) tensor.
pub fn extract_batch(
    image: &Array3<f64>,
    boxes: &[BoundingBox],
    pad_factor: f64,
    patch: usize,
) -> Array4<f64> {
    let mut out = Array4::<f64>::zeros((boxes.len(), 3, patch, patch));
    for (i, b) in boxes.iter().enumerate() {
        let p = extract_patch(image, b, pad_factor, patch);
        out.index_axis_mut(ndarray::Axis(0), i).assign(&p);
    }
    out
}

/// Clip a box to the image, keeping at least `min_side` pixels per side.
pub fn clip_box(b: &BoundingBox, img_w: f64, img_h: f64, min_side: f64) -> BoundingBox {
    let w = b.w.clamp(min_side, img_w);
    let h = b.h.clamp(min_side, img_h);
    let x = b.x.clamp(0.0, img_w - w);
    let y = b.y.clamp(0.0, img_h - h);
    BoundingBox { x, y, w, h }
}

/// Draw one box from a Gaussian around `prev` in (center, log-scale).
pub fn perturb_box(
    prev: &BoundingBox,
    sigma_xy: f64,
    sigma_scale: f64,
    img_w: f64,
    img_h: f64,
    rng: &mut impl Rng,
) -> BoundingBox {
    let mean_side = (prev.w + prev.h) / 2.0;
    let (cx, cy) = prev.center();
    let dx = gauss(sigma_xy * mean_side, rng);
    let dy = gauss(sigma_xy * mean_side, rng);
    let s = gauss(sigma_scale, rng).exp();
    let w = prev.w * s;
    let h = prev.h * s;
    clip_box(
        &BoundingBox {
            x: cx + dx - w / 2.0,
            y: cy + dy - h / 2.0,
            w,
            h,
        },
        img_w,
        img_h,
        2.0,
    )
}

fn gauss(sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("valid normal").sample(rng)
}

/// Rejection-sample boxes whose overlap with `anchor` lies in the given
/// range. Used for positive/negative training samples.
#[allow(clippy::too_many_arguments)]
pub fn sample_boxes_in_iou_range(
    anchor: &BoundingBox,
    n: usize,
    iou_min: f64,
    iou_max: f64,
    sigma_xy: f64,
    sigma_scale: f64,
    img_w: f64,
    img_h: f64,
    rng: &mut impl Rng,
) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let budget = n * 300;
    while out.len() < n && attempts < budget {
        attempts += 1;
        let cand = perturb_box(anchor, sigma_xy, sigma_scale, img_w, img_h, rng);
        let v = iou(&cand, anchor);
        if v >= iou_min && v <= iou_max {
            out.push(cand);
        }
    }
    if out.len() < n {
        return Err(Error::InsufficientData(format!(
            "could only draw {} of {} boxes with IoU in [{iou_min}, {iou_max}] \
             inside a {img_w}x{img_h} image",
            out.len(),
            n
        )));
    }
    Ok(out)
}

/// Negatives: a mix of near misses around the anchor and uniform background
/// boxes, all with IoU at most `iou_max`.
pub fn sample_negative_boxes(
    anchor: &BoundingBox,
    n: usize,
    iou_max: f64,
    img_w: f64,
    img_h: f64,
    rng: &mut impl Rng,
) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let budget = n * 300;
    while out.len() < n && attempts < budget {
        attempts += 1;
        let cand = if attempts % 2 == 0 {
            // Near miss: larger positional spread around the target.
            perturb_box(anchor, 0.8, 0.3, img_w, img_h, rng)
        } else {
            // Uniform location, target-like size.
            let w = (anchor.w * rng.gen_range(0.6..1.6)).min(img_w);
            let h = (anchor.h * rng.gen_range(0.6..1.6)).min(img_h);
            clip_box(
                &BoundingBox {
                    x: rng.gen_range(0.0..(img_w - w).max(1e-6)),
                    y: rng.gen_range(0.0..(img_h - h).max(1e-6)),
                    w,
                    h,
                },
                img_w,
                img_h,
                2.0,
            )
        };
        if iou(&cand, anchor) <= iou_max {
            out.push(cand);
        }
    }
    if out.len() < n {
        return Err(Error::InsufficientData(format!(
            "image too small to sample {n} negatives around {anchor:?}"
        )));
    }
    Ok(out)
}
