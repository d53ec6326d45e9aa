//! Shared test oracles, independent of the library's implementation paths.

use cmot::data::BoundingBox;

/// Number of raster cells per pixel along each axis.
pub const RASTER_SCALE: f64 = 100.0;

/// Count raster cells whose centers fall inside [lo, lo + len) at 100x
/// resolution, by walking the integer cells one by one.
fn covered_cells(lo: f64, len: f64) -> u64 {
    let a = lo * RASTER_SCALE;
    let b = (lo + len) * RASTER_SCALE;
    let first = a.floor() as i64 - 1;
    let last = b.ceil() as i64 + 1;
    let mut count = 0u64;
    for k in first..=last {
        let center = k as f64 + 0.5;
        if center >= a && center < b {
            count += 1;
        }
    }
    count
}

/// Cells covered by a box (product of the per-axis counts; boxes are
/// axis-aligned, so the 2-d raster factorizes exactly).
fn box_cells(b: &BoundingBox) -> u64 {
    covered_cells(b.x, b.w) * covered_cells(b.y, b.h)
}

/// Cells covered by the intersection of two boxes.
fn intersection_cells(a: &BoundingBox, b: &BoundingBox) -> u64 {
    let x0 = a.x.max(b.x);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y0 = a.y.max(b.y);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 <= x0 || y1 <= y0 {
        return 0;
    }
    covered_cells(x0, x1 - x0) * covered_cells(y0, y1 - y0)
}

/// Intersection-over-union by counting raster cells at 100x resolution.
pub fn iou_rasterized(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_cells(a, b);
    let union = box_cells(a) + box_cells(b) - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Deterministic box pairs for oracle comparisons.
pub fn random_box_pairs(n: usize, seed: u64) -> Vec<(BoundingBox, BoundingBox)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| BoundingBox {
                x: rng.gen_range(0.0..60.0),
                y: rng.gen_range(0.0..60.0),
                w: rng.gen_range(5.0..40.0),
                h: rng.gen_range(5.0..40.0),
            };
            let a = mk(&mut rng);
            // Half the pairs overlap heavily, half are loose.
            let b = if rng.gen_bool(0.5) {
                BoundingBox {
                    x: a.x + rng.gen_range(-5.0..5.0),
                    y: a.y + rng.gen_range(-5.0..5.0),
                    w: (a.w + rng.gen_range(-3.0..3.0)).max(5.0),
                    h: (a.h + rng.gen_range(-3.0..3.0)).max(5.0),
                }
            } else {
                mk(&mut rng)
            };
            (a, b)
        })
        .collect()
}
