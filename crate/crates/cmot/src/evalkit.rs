//! Tracking metrics: precision (PR), normalized precision (NPR) and success
//! rates (SR-I at overlap 0.5, SR-II as area under the success curve), with
//! pooled, per-attribute and per-switch-count reports.
//!
//! Frames are pooled over all sequences; a frame contributes once to every
//! report it belongs to. Success membership uses `iou >= t`, precision uses
//! `error <= t`. Normalized center errors are expressed on a 100-pixel
//! reference box, so the representative threshold of 20 reference pixels
//! equals relative distance 0.2.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{modality_switch_count, AttributeTag, BoundingBox, Sequence, SwitchBin};
use crate::error::{Error, Result};

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Euclidean distance between box centers, in pixels.
pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    (acx - bcx).hypot(acy - bcy)
}

/// Center error in ground-truth-relative units mapped to a 100-pixel
/// reference box: `100 * ||(dcx / gt.w, dcy / gt.h)||`.
pub fn norm_center_error(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Validation(format!(
            "degenerate ground-truth box {gt:?}"
        )));
    }
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    Ok(100.0 * ((pcx - gcx) / gt.w).hypot((pcy - gcy) / gt.h))
}

/// Metric thresholds; the curve grids are fixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Representative precision threshold in pixels.
    pub pr_threshold: f64,
    /// Representative normalized threshold in relative units.
    pub npr_threshold: f64,
    /// Representative overlap threshold.
    pub sr_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pr_threshold: 20.0,
            npr_threshold: 0.2,
            sr_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    /// The representative points must lie on their curve grids.
    pub fn validate(&self) -> Result<()> {
        let on = |v: f64, step: f64| (v / step - (v / step).round()).abs() < 1e-9;
        if !on(self.pr_threshold, 1.0) || self.pr_threshold > 50.0 {
            return Err(Error::Config(format!(
                "pr_threshold {} is off the 0..50 step-1 grid",
                self.pr_threshold
            )));
        }
        if !on(self.npr_threshold, 0.01) || self.npr_threshold > 0.5 {
            return Err(Error::Config(format!(
                "npr_threshold {} is off the 0..0.5 step-0.01 grid",
                self.npr_threshold
            )));
        }
        if !on(self.sr_threshold, 0.02) || self.sr_threshold > 1.0 {
            return Err(Error::Config(format!(
                "sr_threshold {} is off the 0..1 step-0.02 grid",
                self.sr_threshold
            )));
        }
        Ok(())
    }
}

/// All three curve grids carry 51 points.
const N_GRID: usize = 51;

fn distance_grid() -> Vec<f64> {
    (0..N_GRID).map(|i| i as f64).collect()
}

fn normalized_grid() -> Vec<f64> {
    (0..N_GRID).map(|i| i as f64 / 100.0).collect()
}

fn overlap_grid() -> Vec<f64> {
    (0..N_GRID).map(|i| i as f64 / 50.0).collect()
}

/// A plot curve: per-threshold fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    /// Trapezoidal area normalized by the threshold span.
    pub fn auc(&self) -> f64 {
        let mut area = 0.0;
        for i in 0..self.thresholds.len() - 1 {
            let dt = self.thresholds[i + 1] - self.thresholds[i];
            area += 0.5 * (self.values[i] + self.values[i + 1]) * dt;
        }
        let span = self.thresholds.last().unwrap() - self.thresholds[0];
        area / span
    }
}

/// The four representative scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub pr: f64,
    pub npr: f64,
    pub sr1: f64,
    pub sr2: f64,
}

fn default_tracker_name() -> String {
    "tracker".to_string()
}

/// Full evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Label used in plot legends and tables.
    #[serde(default = "default_tracker_name")]
    pub name: String,
    pub scores: Scores,
    pub precision_curve: Curve,
    pub norm_precision_curve: Curve,
    pub success_curve: Curve,
    pub per_attribute: BTreeMap<AttributeTag, Scores>,
    pub per_switch_bin: BTreeMap<SwitchBin, Scores>,
    pub frames: usize,
    pub sequences: usize,
}

#[derive(Debug, Clone, Copy)]
struct FrameMetric {
    iou: f64,
    center_err: f64,
    /// Reference-pixel units (relative error times 100).
    norm_err: f64,
}

fn frame_metrics(pred: &BoundingBox, gt: &BoundingBox) -> Result<FrameMetric> {
    Ok(FrameMetric {
        iou: iou(pred, gt),
        center_err: center_error(pred, gt),
        norm_err: norm_center_error(pred, gt)?,
    })
}

fn pooled_curves(metrics: &[FrameMetric]) -> (Curve, Curve, Curve) {
    let n = metrics.len().max(1) as f64;
    let dist = distance_grid();
    let norm = normalized_grid();
    let over = overlap_grid();

    let precision = Curve {
        values: dist
            .iter()
            .map(|&t| metrics.iter().filter(|m| m.center_err <= t).count() as f64 / n)
            .collect(),
        thresholds: dist,
    };
    // Membership is tested in reference-pixel units (t * 100 is exact on
    // this grid), avoiding a second rounding.
    let norm_precision = Curve {
        values: (0..N_GRID)
            .map(|i| metrics.iter().filter(|m| m.norm_err <= i as f64).count() as f64 / n)
            .collect(),
        thresholds: norm,
    };
    // A zero-overlap frame never counts as a success; ties count at
    // positive thresholds (so a perfect run scores one at threshold 1.0).
    let success = Curve {
        values: over
            .iter()
            .map(|&t| {
                metrics.iter().filter(|m| m.iou >= t && m.iou > 0.0).count() as f64 / n
            })
            .collect(),
        thresholds: over,
    };
    (precision, norm_precision, success)
}

fn pooled_scores(metrics: &[FrameMetric], cfg: &EvalConfig, success: &Curve) -> Scores {
    let n = metrics.len().max(1) as f64;
    let npr_ref_px = cfg.npr_threshold * 100.0;
    Scores {
        pr: metrics.iter().filter(|m| m.center_err <= cfg.pr_threshold).count() as f64 / n,
        npr: metrics.iter().filter(|m| m.norm_err <= npr_ref_px).count() as f64 / n,
        sr1: metrics
            .iter()
            .filter(|m| m.iou >= cfg.sr_threshold && m.iou > 0.0)
            .count() as f64
            / n,
        sr2: success.auc(),
    }
}

fn scores_for_subset(metrics: &[FrameMetric], cfg: &EvalConfig) -> Scores {
    let (_, _, success) = pooled_curves(metrics);
    pooled_scores(metrics, cfg, &success)
}

/// Evaluate per-sequence results against a dataset.
///
/// `results` maps sequence id to one predicted box per frame.
pub fn evaluate(
    results: &BTreeMap<String, Vec<BoundingBox>>,
    dataset: &[Sequence],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("no sequences to evaluate".into()));
    }

    let mut all = Vec::new();
    let mut per_seq: Vec<(usize, Vec<FrameMetric>)> = Vec::new();
    for (si, seq) in dataset.iter().enumerate() {
        let boxes = results
            .get(&seq.id)
            .ok_or_else(|| Error::Structure(format!("missing results for sequence {}", seq.id)))?;
        if boxes.len() != seq.len() {
            return Err(Error::Structure(format!(
                "sequence {} has {} frames but results carry {} boxes",
                seq.id,
                seq.len(),
                boxes.len()
            )));
        }
        let mut seq_metrics = Vec::with_capacity(seq.len());
        for (frame, pred) in seq.frames.iter().zip(boxes.iter()) {
            let m = frame_metrics(pred, &frame.gt)?;
            seq_metrics.push(m);
            all.push(m);
        }
        per_seq.push((si, seq_metrics));
    }

    let (precision_curve, norm_precision_curve, success_curve) = pooled_curves(&all);
    let scores = pooled_scores(&all, cfg, &success_curve);

    let mut per_attribute = BTreeMap::new();
    for &tag in AttributeTag::ALL {
        let subset: Vec<FrameMetric> = per_seq
            .iter()
            .filter(|(si, _)| dataset[*si].attributes.contains(&tag))
            .flat_map(|(_, ms)| ms.iter().copied())
            .collect();
        if !subset.is_empty() {
            per_attribute.insert(tag, scores_for_subset(&subset, cfg));
        }
    }

    let mut per_switch_bin = BTreeMap::new();
    for bin in [
        SwitchBin::Once,
        SwitchBin::Twice,
        SwitchBin::ThreeTimes,
        SwitchBin::MoreThanThree,
    ] {
        let subset: Vec<FrameMetric> = per_seq
            .iter()
            .filter(|(si, _)| {
                SwitchBin::from_count(modality_switch_count(&dataset[*si])) == Some(bin)
            })
            .flat_map(|(_, ms)| ms.iter().copied())
            .collect();
        if !subset.is_empty() {
            per_switch_bin.insert(bin, scores_for_subset(&subset, cfg));
        }
    }

    Ok(EvalReport {
        name: default_tracker_name(),
        scores,
        precision_curve,
        norm_precision_curve,
        success_curve,
        per_attribute,
        per_switch_bin,
        frames: all.len(),
        sequences: dataset.len(),
    })
}

/// Write the machine-readable report plus rendered curves and the attribute
/// table. Returns the list of files written.
pub fn report(rep: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let name = rep.name.clone();
    report_named(rep, &name, out_dir)
}

/// Like [`report`] but overriding the legend label.
pub fn report_named(rep: &EvalReport, name: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let rep = &EvalReport {
        name: name.to_string(),
        ..rep.clone()
    };

    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(rep)
        .map_err(|e| Error::Structure(format!("report serialization failed: {e}")))?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let plots = [
        (
            "precision.svg",
            "Precision plot",
            "Center error threshold (px)",
            &rep.precision_curve,
            format!("{name} [PR {:.3}]", rep.scores.pr),
        ),
        (
            "norm_precision.svg",
            "Normalized precision plot",
            "Normalized center error threshold",
            &rep.norm_precision_curve,
            format!("{name} [NPR {:.3}]", rep.scores.npr),
        ),
        (
            "success.svg",
            "Success plot",
            "Overlap threshold",
            &rep.success_curve,
            // Legend carries both representative scores, SR-I then SR-II.
            format!("{name} [{:.3} / {:.3}]", rep.scores.sr1, rep.scores.sr2),
        ),
    ];
    for (file, title, xlabel, curve, legend) in plots {
        let path = out_dir.join(file);
        let svg = render_svg(title, xlabel, &[(legend.as_str(), curve)]);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let csv_path = out_dir.join("attributes.csv");
    fs::write(&csv_path, attribute_table(rep)).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);

    Ok(written)
}

/// Attribute table: metrics as rows, attribute tags as columns.
fn attribute_table(rep: &EvalReport) -> String {
    let mut out = String::from("metric");
    for tag in AttributeTag::ALL {
        let _ = write!(out, ",{tag}");
    }
    out.push('\n');
    let rows: [(&str, fn(&Scores) -> f64); 4] = [
        ("PR", |s| s.pr),
        ("NPR", |s| s.npr),
        ("SR-I", |s| s.sr1),
        ("SR-II", |s| s.sr2),
    ];
    for (label, getter) in rows {
        out.push_str(label);
        for tag in AttributeTag::ALL {
            match rep.per_attribute.get(tag) {
                Some(s) => {
                    let _ = write!(out, ",{:.4}", getter(s));
                }
                None => out.push_str(",-"),
            }
        }
        out.push('\n');
    }
    out
}

/// Deterministic, dependency-free SVG line plot.
pub fn render_svg(title: &str, xlabel: &str, series: &[(&str, &Curve)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    let colors = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085"];

    let x_min = series
        .iter()
        .map(|(_, c)| c.thresholds[0])
        .fold(f64::INFINITY, f64::min);
    let x_max = series
        .iter()
        .map(|(_, c)| *c.thresholds.last().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);

    let px = |t: f64| ML + (t - x_min) / (x_max - x_min) * (W - ML - MR);
    let py = |v: f64| H - MB - v.clamp(0.0, 1.0) * (H - MT - MB);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{title}</text>\n",
        W / 2.0
    );
    let _ = write!(
        svg,
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    );
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let tx = px(x_min + frac * (x_max - x_min));
        let ty = py(frac);
        let _ = write!(
            svg,
            "<line x1=\"{tx:.1}\" y1=\"{:.1}\" x2=\"{tx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{tx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{:.2}</text>\n",
            H - MB,
            H - MB + 5.0,
            H - MB + 18.0,
            x_min + frac * (x_max - x_min)
        );
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ty:.1}\" x2=\"{ML}\" y2=\"{ty:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\">{frac:.2}</text>\n",
            ML - 5.0,
            ML - 8.0,
            ty + 4.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\">{xlabel}</text>\n",
        (ML + W - MR) / 2.0,
        H - 10.0
    );

    for (si, (label, curve)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let mut points = String::new();
        for (t, v) in curve.thresholds.iter().zip(curve.values.iter()) {
            let _ = write!(points, "{:.2},{:.2} ", px(*t), py(*v));
        }
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.trim_end()
        );
        let ly = MT + 16.0 + si as f64 * 18.0;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" \
             font-size=\"12\">{label}</text>\n",
            ML + 10.0,
            ML + 40.0,
            ML + 46.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FrameRecord, ImageBuf, ImageRef, Modality};
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox { x, y, w, h }
    }

    fn seq_with_gt(id: &str, gts: &[BoundingBox]) -> Sequence {
        let img = Arc::new(ImageBuf::new(4, 4, vec![0u8; 48]).unwrap());
        Sequence {
            id: id.to_string(),
            frames: gts
                .iter()
                .map(|gt| FrameRecord {
                    image: ImageRef::Memory(img.clone()),
                    modality: Modality::Rgb,
                    gt: *gt,
                    visible: true,
                })
                .collect(),
            attributes: BTreeSet::new(),
            height: 4,
            width: 4,
        }
    }

    #[test]
    fn iou_basics() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = bx(20.0, 20.0, 5.0, 5.0);
        assert_eq!(iou(&a, &disjoint), 0.0);
        let b = bx(5.0, 0.0, 10.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn center_error_three_four_five() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(3.0, 4.0, 10.0, 10.0);
        assert_eq!(center_error(&a, &a), 0.0);
        assert!((center_error(&a, &b) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn center_error_matches_componentwise_formula() {
        let mut rng_state = 1234567u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) * 100.0
        };
        for _ in 0..200 {
            let a = bx(next(), next(), next() + 0.1, next() + 0.1);
            let b = bx(next(), next(), next() + 0.1, next() + 0.1);
            let dx = (a.x + a.w / 2.0) - (b.x + b.w / 2.0);
            let dy = (a.y + a.h / 2.0) - (b.y + b.h / 2.0);
            let oracle = (dx * dx + dy * dy).sqrt();
            assert!((center_error(&a, &b) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn norm_center_error_examples() {
        let gt = bx(0.0, 0.0, 100.0, 100.0);
        assert_eq!(norm_center_error(&gt, &gt).unwrap(), 0.0);
        let pred = bx(20.0, 0.0, 100.0, 100.0);
        assert!((norm_center_error(&pred, &gt).unwrap() - 20.0).abs() < 1e-12);

        // Rectangular reference: offsets scale per axis.
        let gt = bx(0.0, 0.0, 50.0, 100.0);
        let pred = bx(10.0, 20.0, 50.0, 100.0);
        let expected = 100.0 * (0.2f64 * 0.2 + 0.2 * 0.2).sqrt();
        assert!((norm_center_error(&pred, &gt).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 28.284271247461902).abs() < 1e-9);
    }

    #[test]
    fn perfect_tracker_scores_one() {
        let gts: Vec<BoundingBox> = (0..5).map(|i| bx(i as f64, 1.0, 2.0, 2.0)).collect();
        let seq = seq_with_gt("s", &gts);
        let mut results = BTreeMap::new();
        results.insert("s".to_string(), gts);
        let rep = evaluate(&results, &[seq], &EvalConfig::default()).unwrap();
        assert_eq!(rep.scores.pr, 1.0);
        assert_eq!(rep.scores.npr, 1.0);
        assert_eq!(rep.scores.sr1, 1.0);
        assert!((rep.scores.sr2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hopeless_tracker_scores_zero() {
        let gts: Vec<BoundingBox> = (0..5).map(|_| bx(0.0, 0.0, 2.0, 2.0)).collect();
        let preds: Vec<BoundingBox> = (0..5).map(|_| bx(100.0, 0.0, 2.0, 2.0)).collect();
        let seq = seq_with_gt("s", &gts);
        let mut results = BTreeMap::new();
        results.insert("s".to_string(), preds);
        let rep = evaluate(&results, &[seq], &EvalConfig::default()).unwrap();
        assert_eq!(rep.scores.pr, 0.0);
        assert_eq!(rep.scores.npr, 0.0);
        assert_eq!(rep.scores.sr1, 0.0);
        assert_eq!(rep.scores.sr2, 0.0);
    }

    /// Six frames at IoU 0.8 / error 5 and four at IoU 0.2 / error 40.
    fn metric_fixture() -> (Vec<Sequence>, BTreeMap<String, Vec<BoundingBox>>) {
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..6 {
            // Same-size boxes shifted by 5: IoU = 40*45 / (2*45^2 - 40*45) = 0.8.
            gts.push(bx(0.0, 0.0, 45.0, 45.0));
            preds.push(bx(5.0, 0.0, 45.0, 45.0));
        }
        for _ in 0..4 {
            // Shifted by 40: IoU = 20*60 / (2*60^2 - 20*60) = 0.2.
            gts.push(bx(0.0, 0.0, 60.0, 60.0));
            preds.push(bx(40.0, 0.0, 60.0, 60.0));
        }
        let seq = seq_with_gt("fixture", &gts);
        let mut results = BTreeMap::new();
        results.insert("fixture".to_string(), preds);
        (vec![seq], results)
    }

    #[test]
    fn ten_frame_fixture_matches_hand_integration() {
        let (dataset, results) = metric_fixture();
        let rep = evaluate(&results, &dataset, &EvalConfig::default()).unwrap();
        assert_eq!(rep.scores.pr, 0.6);
        assert_eq!(rep.scores.sr1, 0.6);
        // Hand-integrated step curve: 1.0 up to t=0.2, 0.6 up to t=0.8, then 0:
        // 10*0.02 + (1.0+0.6)/2*0.02 + 29*0.6*0.02 + (0.6+0)/2*0.02 = 0.570.
        assert!((rep.scores.sr2 - 0.570).abs() < 1e-6, "sr2 = {}", rep.scores.sr2);
    }

    #[test]
    fn curves_are_monotone() {
        let (dataset, results) = metric_fixture();
        let rep = evaluate(&results, &dataset, &EvalConfig::default()).unwrap();
        for w in rep.precision_curve.values.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in rep.norm_precision_curve.values.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in rep.success_curve.values.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(rep.scores.sr2 <= 1.0);
    }

    #[test]
    fn pooling_is_frame_weighted() {
        // Two sequences of different lengths; the pooled PR must equal the
        // frame-count-weighted mean of per-sequence PRs.
        let gts1: Vec<BoundingBox> = (0..3).map(|_| bx(0.0, 0.0, 10.0, 10.0)).collect();
        let preds1: Vec<BoundingBox> = vec![
            bx(0.0, 0.0, 10.0, 10.0),
            bx(100.0, 0.0, 10.0, 10.0),
            bx(0.0, 0.0, 10.0, 10.0),
        ];
        let gts2: Vec<BoundingBox> = (0..7).map(|_| bx(0.0, 0.0, 10.0, 10.0)).collect();
        let preds2: Vec<BoundingBox> = (0..7)
            .map(|i| {
                if i < 2 {
                    bx(0.0, 0.0, 10.0, 10.0)
                } else {
                    bx(100.0, 0.0, 10.0, 10.0)
                }
            })
            .collect();

        let s1 = seq_with_gt("a", &gts1);
        let s2 = seq_with_gt("b", &gts2);
        let mut r1 = BTreeMap::new();
        r1.insert("a".to_string(), preds1.clone());
        let mut r2 = BTreeMap::new();
        r2.insert("b".to_string(), preds2.clone());
        let mut all = BTreeMap::new();
        all.insert("a".to_string(), preds1);
        all.insert("b".to_string(), preds2);

        let cfg = EvalConfig::default();
        let rep1 = evaluate(&r1, std::slice::from_ref(&s1), &cfg).unwrap();
        let rep2 = evaluate(&r2, std::slice::from_ref(&s2), &cfg).unwrap();
        let pooled = evaluate(&all, &[s1, s2], &cfg).unwrap();

        let expect = (rep1.scores.pr * 3.0 + rep2.scores.pr * 7.0) / 10.0;
        assert!((pooled.scores.pr - expect).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_names_sequence() {
        let gts: Vec<BoundingBox> = (0..3).map(|_| bx(0.0, 0.0, 2.0, 2.0)).collect();
        let seq = seq_with_gt("shorty", &gts);
        let mut results = BTreeMap::new();
        results.insert("shorty".to_string(), vec![bx(0.0, 0.0, 2.0, 2.0)]);
        match evaluate(&results, &[seq], &EvalConfig::default()) {
            Err(Error::Structure(msg)) => assert!(msg.contains("shorty")),
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn report_json_round_trips() {
        let (dataset, results) = metric_fixture();
        let rep = evaluate(&results, &dataset, &EvalConfig::default()).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn report_files_are_deterministic() {
        let (dataset, results) = metric_fixture();
        let rep = evaluate(&results, &dataset, &EvalConfig::default()).unwrap();
        let dir1 = tempfile::TempDir::new().unwrap();
        let dir2 = tempfile::TempDir::new().unwrap();
        let files1 = report(&rep, dir1.path()).unwrap();
        let files2 = report(&rep, dir2.path()).unwrap();
        assert_eq!(files1.len(), 5);
        for (f1, f2) in files1.iter().zip(files2.iter()) {
            let b1 = std::fs::read(f1).unwrap();
            let b2 = std::fs::read(f2).unwrap();
            assert!(!b1.is_empty());
            assert_eq!(b1, b2, "{} differs between runs", f1.display());
        }
        // Success-plot legend carries the SR-I / SR-II pair.
        let svg = std::fs::read_to_string(dir1.path().join("success.svg")).unwrap();
        assert!(svg.contains(&format!("[{:.3} / {:.3}]", rep.scores.sr1, rep.scores.sr2)));
    }
}
