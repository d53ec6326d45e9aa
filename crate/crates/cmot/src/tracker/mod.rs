//! Minimal classification-style online tracker with a pluggable
//! modality-aware block.
//!
//! Per frame: Gaussian candidates around the previous box are cropped,
//! scored by the network, and the top-scoring few are averaged. Accepted
//! predictions are refined by a linear regressor and feed positive/negative
//! samples into bounded FIFO memories; a drop below the acceptance threshold
//! triggers a short-term update, and a long-term update runs on a fixed
//! frame interval. The backbone is never touched during tracking; online
//! updates fine-tune the head and the block's ensemble only.

pub mod net;
pub mod patch;
pub mod regress;

pub use net::{build_network, BackboneSpec, ConvLayerSpec, ForwardMode, NetConfig, TrackNet};
pub use regress::RidgeRegressor;

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Sequence};
use crate::error::{Error, Result};
use crate::evalkit::iou;
use crate::nn::{Sgd, SgdConfig};

/// Candidate boxes with optional scores.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub boxes: Vec<BoundingBox>,
    pub scores: Option<Vec<f64>>,
}

/// Online tracking settings. Defaults follow the classification baseline's
/// published conventions: 256 candidates, top-5 averaging, acceptance
/// threshold 0, long-term updates every 10 frames, crops padded by 1.14.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub n_candidates: usize,
    /// Center spread as a fraction of the mean box side.
    pub sigma_xy: f64,
    /// Log-scale spread.
    pub sigma_scale: f64,
    pub top_k: usize,
    pub accept_threshold: f64,
    pub long_interval: usize,
    pub short_capacity: usize,
    pub long_capacity: usize,
    pub update_iters: usize,
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub init_iters: usize,
    pub init_pos: usize,
    pub init_neg: usize,
    pub reg_samples: usize,
    pub reg_lambda: f64,
    pub frame_pos: usize,
    pub frame_neg: usize,
    pub lr_head: f64,
    pub lr_block: f64,
    pub pad_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            n_candidates: 256,
            sigma_xy: 0.3,
            sigma_scale: 0.12,
            top_k: 5,
            accept_threshold: 0.0,
            long_interval: 10,
            short_capacity: 200,
            long_capacity: 400,
            update_iters: 10,
            batch_pos: 8,
            batch_neg: 24,
            init_iters: 30,
            init_pos: 48,
            init_neg: 120,
            reg_samples: 48,
            reg_lambda: 1.0,
            frame_pos: 6,
            frame_neg: 12,
            lr_head: 5e-3,
            lr_block: 1e-3,
            pad_factor: 1.14,
        }
    }
}

impl TrackerConfig {
    /// Smaller budget for the desk-scale benchmark. Online learning rates
    /// are conservative so a checkpoint's offline cross-modal competence
    /// survives single-modality first frames.
    pub fn toy() -> Self {
        TrackerConfig {
            n_candidates: 64,
            init_iters: 15,
            init_pos: 32,
            init_neg: 96,
            reg_samples: 32,
            update_iters: 3,
            lr_head: 5e-4,
            lr_block: 1e-4,
            ..TrackerConfig::default()
        }
    }
}

/// Bounded FIFO of feature samples at the insertion point.
#[derive(Debug, Clone, Default)]
pub struct FeatureMemory {
    samples: VecDeque<Array3<f64>>,
    capacity: usize,
}

impl FeatureMemory {
    fn new(capacity: usize) -> Self {
        FeatureMemory {
            samples: VecDeque::new(),
            capacity,
        }
    }

    fn push(&mut self, feat: Array3<f64>) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(feat);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn get(&self, i: usize) -> &Array3<f64> {
        &self.samples[i]
    }
}

/// Which memory an update draws its positives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Short,
    Long,
}

/// Per-sequence tracker state.
pub struct TrackerState {
    pub current: BoundingBox,
    pub frame_index: usize,
    pub short_pos: FeatureMemory,
    pub short_neg: FeatureMemory,
    pub long_pos: FeatureMemory,
    pub regressor: Option<RidgeRegressor>,
    rng: ChaCha8Rng,
    img_w: f64,
    img_h: f64,
}

/// First-frame training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitStats {
    pub final_loss: f64,
    pub self_test_accuracy: f64,
}

/// One line of the tracking log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackLogEntry {
    pub frame: usize,
    pub score: f64,
    pub event: String,
}

/// A tracked sequence: one box per frame plus the event log.
pub struct TrackRun {
    pub boxes: Vec<BoundingBox>,
    pub log: Vec<TrackLogEntry>,
    pub init: InitStats,
}

fn inference_mode(net: &TrackNet) -> ForwardMode {
    if net.marmot.is_some() {
        ForwardMode::Fused
    } else {
        ForwardMode::Baseline
    }
}

/// Insertion-point features for a batch of boxes (no gradients kept).
fn features_for_boxes(
    net: &TrackNet,
    image: &Array3<f64>,
    boxes: &[BoundingBox],
    cfg: &TrackerConfig,
) -> Result<Array4<f64>> {
    let patches = patch::extract_batch(image, boxes, cfg.pad_factor, net.patch_size);
    let (feat, _) = net.forward_stem(&patches)?;
    Ok(feat)
}

fn optimizer_for_online(net: &TrackNet, cfg: &TrackerConfig) -> Sgd {
    let mut lrs = BTreeMap::new();
    lrs.insert("head.fc1".to_string(), cfg.lr_head);
    lrs.insert("head.fc2".to_string(), cfg.lr_head);
    if net.marmot.is_some() {
        lrs.insert("marmot.ensemble".to_string(), cfg.lr_block);
    }
    Sgd::new(lrs, SgdConfig::default())
}

// First-frame training touches the same groups as online updates: the head
// and the block's ensemble. The modality-aware branches are learned offline
// on per-modality subsets and must survive a single-modality first frame
// untouched, or the representation for the other modality is destroyed
// before the first switch.
fn optimizer_for_init(net: &TrackNet, cfg: &TrackerConfig) -> Sgd {
    optimizer_for_online(net, cfg)
}

/// Stack a batch of stored feature samples.
fn stack_features(
    pos: &FeatureMemory,
    neg: &FeatureMemory,
    n_pos: usize,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> (Array4<f64>, Vec<u8>) {
    let total = n_pos + n_neg;
    let dims = pos.get(0).dim();
    let mut batch = Array4::<f64>::zeros((total, dims.0, dims.1, dims.2));
    let mut labels = Vec::with_capacity(total);
    for i in 0..n_pos {
        let idx = rand::Rng::gen_range(rng, 0..pos.len());
        batch.index_axis_mut(Axis(0), i).assign(pos.get(idx));
        labels.push(1u8);
    }
    for i in 0..n_neg {
        let idx = rand::Rng::gen_range(rng, 0..neg.len());
        batch.index_axis_mut(Axis(0), n_pos + i).assign(neg.get(idx));
        labels.push(0u8);
    }
    (batch, labels)
}

fn push_all(memory: &mut FeatureMemory, feats: &Array4<f64>) {
    for row in feats.axis_iter(Axis(0)) {
        memory.push(row.to_owned());
    }
}

/// Train head and block on first-frame samples, fit the box regressor and
/// seed the memories. The returned state's `current` equals the ground
/// truth.
pub fn init_first_frame(
    net: &mut TrackNet,
    image: &Array3<f64>,
    gt: &BoundingBox,
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<(TrackerState, InitStats)> {
    let (img_h, img_w, _) = image.dim();
    let (img_w, img_h) = (img_w as f64, img_h as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pos_boxes = vec![*gt];
    pos_boxes.extend(patch::sample_boxes_in_iou_range(
        gt,
        cfg.init_pos.saturating_sub(1),
        0.7,
        1.0,
        0.08,
        0.05,
        img_w,
        img_h,
        &mut rng,
    )?);
    let neg_boxes =
        patch::sample_negative_boxes(gt, cfg.init_neg, 0.3, img_w, img_h, &mut rng)?;

    let pos_feats = features_for_boxes(net, image, &pos_boxes, cfg)?;
    let neg_feats = features_for_boxes(net, image, &neg_boxes, cfg)?;

    let mut state = TrackerState {
        current: *gt,
        frame_index: 0,
        short_pos: FeatureMemory::new(cfg.short_capacity),
        short_neg: FeatureMemory::new(cfg.short_capacity),
        long_pos: FeatureMemory::new(cfg.long_capacity),
        regressor: None,
        rng,
        img_w,
        img_h,
    };
    push_all(&mut state.short_pos, &pos_feats);
    push_all(&mut state.long_pos, &pos_feats);
    push_all(&mut state.short_neg, &neg_feats);

    // First-frame training of the head and the fusion weights.
    let mode = inference_mode(net);
    let mut sgd = optimizer_for_init(net, cfg);
    let mut final_loss = 0.0;
    for _ in 0..cfg.init_iters {
        let (batch, labels) = stack_features(
            &state.short_pos,
            &state.short_neg,
            cfg.batch_pos,
            cfg.batch_neg,
            &mut state.rng,
        );
        net.zero_grads();
        let (out, tail) = net.forward_tail_light(&batch)?;
        let (loss, dlogits) = net::softmax_ce(&out.logits, &labels);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss during first-frame training: {loss}"
            )));
        }
        final_loss = loss;
        net.backward_tail(&tail, &dlogits)?;
        net.visit_params_mut(&mut |name, p| sgd.apply(name, p));
    }

    // Box regressor on wider positives.
    let reg_boxes = patch::sample_boxes_in_iou_range(
        gt,
        cfg.reg_samples,
        0.6,
        1.0,
        0.15,
        0.1,
        img_w,
        img_h,
        &mut state.rng,
    )?;
    let reg_feats = features_for_boxes(net, image, &reg_boxes, cfg)?;
    let (reg_out, _) = net.forward_tail(&reg_feats, mode, false)?;
    let mut targets = Array2::<f64>::zeros((reg_boxes.len(), 4));
    for (i, b) in reg_boxes.iter().enumerate() {
        let d = regress::box_delta(b, gt);
        for k in 0..4 {
            targets[[i, k]] = d[k];
        }
    }
    state.regressor = Some(RidgeRegressor::fit(&reg_out.hidden, &targets, cfg.reg_lambda)?);

    // Self-test on fresh held-out samples.
    let test_pos = patch::sample_boxes_in_iou_range(
        gt, 16, 0.7, 1.0, 0.08, 0.05, img_w, img_h, &mut state.rng,
    )?;
    let test_neg = patch::sample_negative_boxes(gt, 16, 0.3, img_w, img_h, &mut state.rng)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (boxes, is_pos) in [(test_pos, true), (test_neg, false)] {
        let feats = features_for_boxes(net, image, &boxes, cfg)?;
        let (out, _) = net.forward_tail(&feats, mode, false)?;
        for s in out.scores() {
            total += 1;
            if (s > 0.0) == is_pos {
                correct += 1;
            }
        }
    }
    let stats = InitStats {
        final_loss,
        self_test_accuracy: correct as f64 / total as f64,
    };

    Ok((state, stats))
}

/// Fine-tune head and ensemble on memory samples. Returns false (and warns)
/// when the corresponding memory is empty. Backbone and branch parameters
/// are left bit-identical.
pub fn online_update(
    state: &mut TrackerState,
    net: &mut TrackNet,
    which: UpdateKind,
    cfg: &TrackerConfig,
) -> Result<bool> {
    let pos = match which {
        UpdateKind::Short => &state.short_pos,
        UpdateKind::Long => &state.long_pos,
    };
    if pos.is_empty() || state.short_neg.is_empty() {
        log::warn!("skipping {which:?} update: empty memory");
        return Ok(false);
    }

    let mut sgd = optimizer_for_online(net, cfg);
    for _ in 0..cfg.update_iters {
        let pos = match which {
            UpdateKind::Short => &state.short_pos,
            UpdateKind::Long => &state.long_pos,
        };
        let (batch, labels) = stack_features(
            pos,
            &state.short_neg,
            cfg.batch_pos,
            cfg.batch_neg,
            &mut state.rng,
        );
        net.zero_grads();
        let (out, tail) = net.forward_tail_light(&batch)?;
        let (loss, dlogits) = net::softmax_ce(&out.logits, &labels);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss during online update: {loss}"
            )));
        }
        net.backward_tail(&tail, &dlogits)?;
        net.visit_params_mut(&mut |name, p| sgd.apply(name, p));
    }
    Ok(true)
}

/// Draw candidates around the previous box, deterministic per state RNG.
pub fn sample_candidates(
    state: &mut TrackerState,
    n: usize,
    sigma_xy: f64,
    sigma_scale: f64,
) -> CandidateSet {
    let boxes = (0..n)
        .map(|_| {
            patch::perturb_box(
                &state.current,
                sigma_xy,
                sigma_scale,
                state.img_w,
                state.img_h,
                &mut state.rng,
            )
        })
        .collect();
    CandidateSet { boxes, scores: None }
}

/// Track one frame: score candidates, average the top few, refine and
/// collect samples on acceptance, update the model when scheduled.
pub fn track_frame(
    state: &mut TrackerState,
    net: &mut TrackNet,
    image: &Array3<f64>,
    cfg: &TrackerConfig,
) -> Result<(BoundingBox, TrackLogEntry)> {
    state.frame_index += 1;

    // A collapsed box cannot seed a meaningful crop; recover by widening
    // the search.
    let degenerate = state.current.w < 3.0 || state.current.h < 3.0;
    let (sxy, ssc) = if degenerate {
        (cfg.sigma_xy * 2.0, cfg.sigma_scale * 2.0)
    } else {
        (cfg.sigma_xy, cfg.sigma_scale)
    };
    let mut candidates = sample_candidates(state, cfg.n_candidates, sxy, ssc);

    let mode = inference_mode(net);
    let feats = features_for_boxes(net, image, &candidates.boxes, cfg)?;
    let (out, _) = net.forward_tail(&feats, mode, false)?;
    let scores = out.scores();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite candidate score at frame {}",
            state.frame_index
        )));
    }
    candidates.scores = Some(scores.clone());

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let k = cfg.top_k.min(order.len());
    let top = &order[..k];
    let mean_score = top.iter().map(|&i| scores[i]).sum::<f64>() / k as f64;
    let mut pred = {
        let mut acc = [0.0f64; 4];
        for &i in top {
            let b = &candidates.boxes[i];
            acc[0] += b.x;
            acc[1] += b.y;
            acc[2] += b.w;
            acc[3] += b.h;
        }
        BoundingBox {
            x: acc[0] / k as f64,
            y: acc[1] / k as f64,
            w: acc[2] / k as f64,
            h: acc[3] / k as f64,
        }
    };

    let accepted = mean_score > cfg.accept_threshold;
    let mut event = "track";
    if accepted {
        // Refine through the regressor, then harvest fresh samples.
        if let Some(reg) = &state.regressor {
            let feat = features_for_boxes(net, image, &[pred], cfg)?;
            let (out, _) = net.forward_tail(&feat, mode, false)?;
            pred = reg.refine(&out.hidden.index_axis(Axis(0), 0), &pred);
        }
        pred = patch::clip_box(&pred, state.img_w, state.img_h, 2.0);

        let pos_boxes = patch::sample_boxes_in_iou_range(
            &pred,
            cfg.frame_pos,
            0.7,
            1.0,
            0.08,
            0.05,
            state.img_w,
            state.img_h,
            &mut state.rng,
        );
        let neg_boxes = patch::sample_negative_boxes(
            &pred,
            cfg.frame_neg,
            0.3,
            state.img_w,
            state.img_h,
            &mut state.rng,
        );
        if let (Ok(pos), Ok(neg)) = (pos_boxes, neg_boxes) {
            let pos_feats = features_for_boxes(net, image, &pos, cfg)?;
            let neg_feats = features_for_boxes(net, image, &neg, cfg)?;
            push_all(&mut state.short_pos, &pos_feats);
            push_all(&mut state.long_pos, &pos_feats);
            push_all(&mut state.short_neg, &neg_feats);
        }
    } else {
        pred = patch::clip_box(&pred, state.img_w, state.img_h, 2.0);
    }

    if !accepted {
        if online_update(state, net, UpdateKind::Short, cfg)? {
            event = "short_update";
        }
    } else if cfg.long_interval > 0 && state.frame_index % cfg.long_interval == 0 {
        if online_update(state, net, UpdateKind::Long, cfg)? {
            event = "long_update";
        }
    }

    state.current = pred;
    Ok((
        pred,
        TrackLogEntry {
            frame: state.frame_index,
            score: mean_score,
            event: event.to_string(),
        },
    ))
}

/// Track a whole sequence. Frame one reproduces the ground truth by the
/// initialization contract; the network is mutated in place (clone it per
/// sequence for parallel runs).
pub fn track_sequence(
    net: &mut TrackNet,
    seq: &Sequence,
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<TrackRun> {
    if seq.is_empty() {
        return Err(Error::InsufficientData(format!("sequence {} is empty", seq.id)));
    }
    let first = seq.frames[0].image.load()?;
    let gt = seq.frames[0].gt;
    let (mut state, init) = init_first_frame(net, &first, &gt, cfg, seed)?;

    let mut boxes = Vec::with_capacity(seq.len());
    let mut log = Vec::with_capacity(seq.len());
    boxes.push(gt);
    log.push(TrackLogEntry {
        frame: 0,
        score: init.self_test_accuracy,
        event: "init".to_string(),
    });

    for frame in &seq.frames[1..] {
        let image = frame.image.load()?;
        let (b, entry) = track_frame(&mut state, net, &image, cfg)?;
        boxes.push(b);
        log.push(entry);
    }

    Ok(TrackRun { boxes, log, init })
}

/// IoU between a run and the ground truth, per frame. Convenience for
/// tests and diagnostics.
pub fn run_iou(run: &TrackRun, seq: &Sequence) -> Vec<f64> {
    run.boxes
        .iter()
        .zip(seq.frames.iter())
        .map(|(b, f)| iou(b, &f.gt))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{
        generate_toy_sequence, BackgroundStyle, MotionSpec, TargetShape, TargetStyle,
        ToySequenceConfig,
    };

    fn toy_scene_cfg(id: &str, length: usize, seed: u64) -> ToySequenceConfig {
        ToySequenceConfig {
            id: id.into(),
            length,
            image_size: 64,
            target: TargetStyle {
                shape: TargetShape::Rect,
                width: 14.0,
                height: 12.0,
                color_a: [0.9, 0.1, 0.1],
                color_b: [0.15, 0.2, 0.9],
                stripe_period: 6.0,
            },
            background: BackgroundStyle {
                color_a: [0.2, 0.5, 0.3],
                color_b: [0.3, 0.6, 0.4],
                period: 20.0,
            },
            motion: MotionSpec { vx: 0.0, vy: 0.0, jitter: 0.0 },
            switch_schedule: vec![],
            ma_frames: vec![],
            seed,
        }
    }

    fn quick_cfg() -> TrackerConfig {
        TrackerConfig {
            n_candidates: 32,
            init_iters: 20,
            init_pos: 24,
            init_neg: 64,
            reg_samples: 24,
            update_iters: 3,
            ..TrackerConfig::default()
        }
    }

    #[test]
    fn init_trains_a_working_first_frame_classifier() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 2, 3)).unwrap();
        let image = seq.frames[0].image.load().unwrap();
        let gt = seq.frames[0].gt;
        let mut net = build_network(&NetConfig::toy(true), 17).unwrap();
        let cfg = quick_cfg();
        let (state, stats) = init_first_frame(&mut net, &image, &gt, &cfg, 5).unwrap();
        assert_eq!(state.current, gt);
        assert!(
            stats.self_test_accuracy >= 0.9,
            "held-out accuracy {}",
            stats.self_test_accuracy
        );
        assert!(state.regressor.is_some());
        assert!(!state.short_pos.is_empty());
        assert!(!state.short_neg.is_empty());
    }

    #[test]
    fn static_target_is_tracked_on_frame_two() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 3, 9)).unwrap();
        let mut net = build_network(&NetConfig::toy(true), 23).unwrap();
        let cfg = quick_cfg();
        let run = track_sequence(&mut net, &seq, &cfg, 7).unwrap();
        assert_eq!(run.boxes[0], seq.frames[0].gt);
        let ious = run_iou(&run, &seq);
        assert!(ious[1] >= 0.5, "frame-2 IoU {}", ious[1]);
    }

    #[test]
    fn backbone_is_bit_identical_across_a_tracked_sequence() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 12, 4)).unwrap();
        let mut net = build_network(&NetConfig::toy(true), 29).unwrap();
        let before = net.group_digests()["backbone"];
        let cfg = TrackerConfig {
            long_interval: 3,
            ..quick_cfg()
        };
        track_sequence(&mut net, &seq, &cfg, 11).unwrap();
        let after = net.group_digests()["backbone"];
        assert_eq!(before, after);
    }

    #[test]
    fn branches_are_frozen_by_online_updates() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 2, 5)).unwrap();
        let image = seq.frames[0].image.load().unwrap();
        let gt = seq.frames[0].gt;
        let mut net = build_network(&NetConfig::toy(true), 31).unwrap();
        let cfg = quick_cfg();
        let (mut state, _) = init_first_frame(&mut net, &image, &gt, &cfg, 2).unwrap();

        let before = net.group_digests();
        online_update(&mut state, &mut net, UpdateKind::Long, &cfg).unwrap();
        let after = net.group_digests();
        assert_eq!(before["backbone"], after["backbone"]);
        assert_eq!(before["marmot.branch_rgb"], after["marmot.branch_rgb"]);
        assert_eq!(before["marmot.branch_nir"], after["marmot.branch_nir"]);
        assert_ne!(before["head.fc2"], after["head.fc2"]);
        assert_ne!(before["marmot.ensemble"], after["marmot.ensemble"]);
    }

    #[test]
    fn update_loss_decreases_in_most_seeds() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 2, 6)).unwrap();
        let image = seq.frames[0].image.load().unwrap();
        let gt = seq.frames[0].gt;

        let mut wins = 0;
        for seed in 0..10u64 {
            let mut net = build_network(&NetConfig::toy(true), 100 + seed).unwrap();
            let cfg = TrackerConfig {
                init_iters: 2,
                ..quick_cfg()
            };
            let (mut state, _) = init_first_frame(&mut net, &image, &gt, &cfg, seed).unwrap();

            let loss_of = |state: &mut TrackerState, net: &mut TrackNet| -> f64 {
                let (batch, labels) = stack_features(
                    &state.short_pos,
                    &state.short_neg,
                    16,
                    16,
                    &mut ChaCha8Rng::seed_from_u64(999),
                );
                let (out, _) = net.forward_tail_light(&batch).unwrap();
                net::softmax_ce(&out.logits, &labels).0
            };

            let before = loss_of(&mut state, &mut net);
            let cfg10 = TrackerConfig {
                update_iters: 10,
                ..cfg
            };
            online_update(&mut state, &mut net, UpdateKind::Long, &cfg10).unwrap();
            let after = loss_of(&mut state, &mut net);
            if after <= before {
                wins += 1;
            }
        }
        assert!(wins >= 8, "loss decreased in only {wins}/10 seeded runs");
    }

    #[test]
    fn memory_eviction_is_fifo() {
        let mut mem = FeatureMemory::new(3);
        for i in 0..5 {
            mem.push(Array3::from_elem((1, 1, 1), i as f64));
        }
        assert_eq!(mem.len(), 3);
        assert_eq!(mem.get(0)[[0, 0, 0]], 2.0);
        assert_eq!(mem.get(2)[[0, 0, 0]], 4.0);
    }

    #[test]
    fn empty_memory_update_is_a_noop() {
        let mut net = build_network(&NetConfig::toy(true), 3).unwrap();
        let mut state = TrackerState {
            current: BoundingBox { x: 1.0, y: 1.0, w: 4.0, h: 4.0 },
            frame_index: 0,
            short_pos: FeatureMemory::new(4),
            short_neg: FeatureMemory::new(4),
            long_pos: FeatureMemory::new(4),
            regressor: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            img_w: 64.0,
            img_h: 64.0,
        };
        let did = online_update(&mut state, &mut net, UpdateKind::Short, &quick_cfg()).unwrap();
        assert!(!did);
    }

    #[test]
    fn non_finite_scores_are_a_numeric_error() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 3, 8)).unwrap();
        let image0 = seq.frames[0].image.load().unwrap();
        let image1 = seq.frames[1].image.load().unwrap();
        let gt = seq.frames[0].gt;
        let mut net = build_network(&NetConfig::toy(true), 37).unwrap();
        let cfg = quick_cfg();
        let (mut state, _) = init_first_frame(&mut net, &image0, &gt, &cfg, 3).unwrap();

        net.fc2.weight.value.fill(f64::INFINITY);
        match track_frame(&mut state, &mut net, &image1, &cfg) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn tracking_is_deterministic_per_seed() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 6, 10)).unwrap();
        let cfg = quick_cfg();
        let base = build_network(&NetConfig::toy(true), 41).unwrap();

        let mut net1 = base.clone();
        let run1 = track_sequence(&mut net1, &seq, &cfg, 13).unwrap();
        let mut net2 = base.clone();
        let run2 = track_sequence(&mut net2, &seq, &cfg, 13).unwrap();
        for (a, b) in run1.boxes.iter().zip(run2.boxes.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn plug_and_play_baseline_tracks_without_the_block() {
        let seq = generate_toy_sequence(&toy_scene_cfg("t", 3, 12)).unwrap();
        let mut net = build_network(&NetConfig::toy(false), 43).unwrap();
        assert!(net.marmot.is_none());
        let run = track_sequence(&mut net, &seq, &quick_cfg(), 17).unwrap();
        assert_eq!(run.boxes.len(), 3);
    }
}
