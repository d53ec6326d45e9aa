//! The three-stage learning procedure.
//!
//! Stage one fine-tunes the baseline parameters (backbone and head) at one
//! tenth of the base learning rate, with the block bypassed. Stage two
//! splits the training frames by modality and trains each modality-aware
//! branch only on its own subset (plus the head's final layer), routing
//! every batch through that branch alone. Stage three trains the ensemble
//! and fine-tunes the non-backbone baseline parameters on mixed-modality
//! batches with no modality label exposed to the network; backbone and
//! branches stay frozen.
//!
//! Parameters outside a stage's trainable mask are bit-identical before and
//! after the stage.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Modality, Sequence};
use crate::error::{Error, Result};
use crate::nn::{Sgd, SgdConfig};
use crate::tracker::net::{softmax_ce, ForwardMode, TrackNet};
use crate::tracker::patch;

/// Stage label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageName {
    I,
    II,
    III,
    /// Joint training of everything at once; the ablation baseline.
    OneStage,
}

/// Which frames a stage may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFilter {
    All,
    RgbOnly,
    NirOnly,
    Mixed,
}

/// Resolved per-stage settings: the trainable mask, per-group learning
/// rates, iteration count and data filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageName,
    pub trainable: BTreeSet<String>,
    pub lr: BTreeMap<String, f64>,
    pub iterations: usize,
    pub data_filter: DataFilter,
}

impl StageConfig {
    pub fn validate(&self, groups: &[String]) -> Result<()> {
        if self.trainable.is_empty() {
            return Err(Error::Config("nothing to train: empty mask".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        for name in &self.trainable {
            if !groups.contains(name) {
                return Err(Error::Config(format!(
                    "unknown parameter group {name:?}; available: {groups:?}"
                )));
            }
        }
        let lr_keys: BTreeSet<String> = self.lr.keys().cloned().collect();
        if lr_keys != self.trainable {
            return Err(Error::Config(format!(
                "learning-rate keys {lr_keys:?} must equal the trainable set {:?}",
                self.trainable
            )));
        }
        Ok(())
    }
}

/// Top-level training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Base learning rate of the baseline network; stages one and three
    /// fine-tune at one tenth of it.
    pub base_lr: f64,
    /// Learning rate of the modality-aware branches and the ensemble.
    pub block_lr: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pad_factor: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            base_lr: 1e-3,
            block_lr: 1e-4,
            stage1_iters: 1000,
            stage2_iters: 1000,
            stage3_iters: 1000,
            batch_pos: 32,
            batch_neg: 96,
            momentum: 0.9,
            weight_decay: 5e-4,
            pad_factor: 1.14,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Desk-scale budget for the toy benchmark.
    pub fn toy() -> Self {
        TrainingConfig {
            base_lr: 2e-2,
            block_lr: 5e-3,
            stage1_iters: 60,
            stage2_iters: 120,
            stage3_iters: 120,
            batch_pos: 8,
            batch_neg: 24,
            ..TrainingConfig::default()
        }
    }

    fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// A training batch of image crops with binary labels and the originating
/// modalities.
pub struct TrainBatch {
    pub patches: Array4<f64>,
    pub labels: Vec<u8>,
    pub modalities: Vec<Modality>,
}

/// Reference to one frame of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub seq: usize,
    pub frame: usize,
}

/// Assign every frame to exactly one modality subset.
pub fn split_by_modality(dataset: &[Sequence]) -> (Vec<FrameRef>, Vec<FrameRef>) {
    let mut rgb = Vec::new();
    let mut nir = Vec::new();
    for (si, seq) in dataset.iter().enumerate() {
        for (fi, frame) in seq.frames.iter().enumerate() {
            let r = FrameRef { seq: si, frame: fi };
            match frame.modality {
                Modality::Rgb => rgb.push(r),
                Modality::Nir => nir.push(r),
            }
        }
    }
    (rgb, nir)
}

/// Build the optimizer for a stage after validating its mask against the
/// network's parameter groups.
pub fn apply_freeze_mask(net: &TrackNet, stage: &StageConfig, sgd: SgdConfig) -> Result<Sgd> {
    stage.validate(&net.group_names())?;
    Ok(Sgd::new(stage.lr.clone(), sgd))
}

fn mask_with_lr(entries: &[(&str, f64)]) -> (BTreeSet<String>, BTreeMap<String, f64>) {
    let mut set = BTreeSet::new();
    let mut lr = BTreeMap::new();
    for (name, rate) in entries {
        set.insert(name.to_string());
        lr.insert(name.to_string(), *rate);
    }
    (set, lr)
}

/// Resolved stage settings for a given network (the identity-substitution
/// baseline has no block groups; its stages shrink accordingly).
pub fn stage_plan(net: &TrackNet, cfg: &TrainingConfig) -> Vec<StageConfig> {
    let has_block = net.marmot.is_some();
    let ft_lr = cfg.base_lr / 10.0;

    let stage1 = {
        let (trainable, lr) = mask_with_lr(&[
            ("backbone", ft_lr),
            ("head.fc1", ft_lr),
            ("head.fc2", ft_lr),
        ]);
        StageConfig {
            stage: StageName::I,
            trainable,
            lr,
            iterations: cfg.stage1_iters,
            data_filter: DataFilter::All,
        }
    };

    let stage2 = {
        let entries: Vec<(&str, f64)> = if has_block {
            vec![
                ("marmot.branch_rgb", cfg.block_lr),
                ("marmot.branch_nir", cfg.block_lr),
                ("head.fc2", cfg.block_lr),
            ]
        } else {
            vec![("head.fc2", cfg.block_lr)]
        };
        let (trainable, lr) = mask_with_lr(&entries);
        StageConfig {
            stage: StageName::II,
            trainable,
            lr,
            iterations: cfg.stage2_iters,
            data_filter: DataFilter::All,
        }
    };

    let stage3 = {
        let entries: Vec<(&str, f64)> = if has_block {
            vec![
                ("marmot.ensemble", cfg.block_lr),
                ("head.fc1", ft_lr),
                ("head.fc2", ft_lr),
            ]
        } else {
            vec![("head.fc1", ft_lr), ("head.fc2", ft_lr)]
        };
        let (trainable, lr) = mask_with_lr(&entries);
        StageConfig {
            stage: StageName::III,
            trainable,
            lr,
            iterations: cfg.stage3_iters,
            data_filter: DataFilter::Mixed,
        }
    };

    vec![stage1, stage2, stage3]
}

/// The one-stage ablation trains every group jointly for the combined
/// iteration budget.
pub fn one_stage_plan(net: &TrackNet, cfg: &TrainingConfig) -> StageConfig {
    let ft_lr = cfg.base_lr / 10.0;
    let mut entries: Vec<(&str, f64)> = vec![
        ("backbone", ft_lr),
        ("head.fc1", ft_lr),
        ("head.fc2", ft_lr),
    ];
    if net.marmot.is_some() {
        entries.push(("marmot.branch_rgb", cfg.block_lr));
        entries.push(("marmot.branch_nir", cfg.block_lr));
        entries.push(("marmot.ensemble", cfg.block_lr));
    }
    let (trainable, lr) = mask_with_lr(&entries);
    StageConfig {
        stage: StageName::OneStage,
        trainable,
        lr,
        iterations: cfg.stage1_iters + cfg.stage2_iters + cfg.stage3_iters,
        data_filter: DataFilter::All,
    }
}

/// Outcome of one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageName,
    pub iterations: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Sample positives and negatives from one frame.
fn frame_samples(
    dataset: &[Sequence],
    r: FrameRef,
    n_pos: usize,
    n_neg: usize,
    pad: f64,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f64>, Vec<u8>, Modality)> {
    let seq = &dataset[r.seq];
    let frame = &seq.frames[r.frame];
    let image = frame.image.load()?;
    let (w, h) = (seq.width as f64, seq.height as f64);
    let pos = patch::sample_boxes_in_iou_range(&frame.gt, n_pos, 0.7, 1.0, 0.08, 0.05, w, h, rng)?;
    let neg = patch::sample_negative_boxes(&frame.gt, n_neg, 0.3, w, h, rng)?;

    let mut boxes = pos;
    boxes.extend(neg);
    let patches = patch::extract_batch(&image, &boxes, pad, patch_size);
    let mut labels = vec![1u8; n_pos];
    labels.extend(vec![0u8; n_neg]);
    Ok((patches, labels, frame.modality))
}

/// Draw one batch according to the filter. `Mixed` batches take half their
/// samples from an RGB frame and half from a NIR frame, so every batch
/// carries both modalities.
pub fn sample_batch(
    dataset: &[Sequence],
    filter: DataFilter,
    rgb: &[FrameRef],
    nir: &[FrameRef],
    cfg: &TrainingConfig,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch> {
    let pick = |refs: &[FrameRef], rng: &mut ChaCha8Rng| -> Result<FrameRef> {
        if refs.is_empty() {
            return Err(Error::InsufficientData("empty modality subset".into()));
        }
        Ok(refs[rng.gen_range(0..refs.len())])
    };

    match filter {
        DataFilter::All => {
            let all_len = rgb.len() + nir.len();
            if all_len == 0 {
                return Err(Error::InsufficientData("empty dataset".into()));
            }
            let idx = rng.gen_range(0..all_len);
            let r = if idx < rgb.len() { rgb[idx] } else { nir[idx - rgb.len()] };
            let (patches, labels, m) =
                frame_samples(dataset, r, cfg.batch_pos, cfg.batch_neg, cfg.pad_factor, patch_size, rng)?;
            let n = labels.len();
            Ok(TrainBatch { patches, labels, modalities: vec![m; n] })
        }
        DataFilter::RgbOnly | DataFilter::NirOnly => {
            let refs = if filter == DataFilter::RgbOnly { rgb } else { nir };
            let r = pick(refs, rng)?;
            let (patches, labels, m) =
                frame_samples(dataset, r, cfg.batch_pos, cfg.batch_neg, cfg.pad_factor, patch_size, rng)?;
            let n = labels.len();
            Ok(TrainBatch { patches, labels, modalities: vec![m; n] })
        }
        DataFilter::Mixed => {
            let half_pos = (cfg.batch_pos / 2).max(1);
            let half_neg = (cfg.batch_neg / 2).max(1);
            let ra = pick(rgb, rng)?;
            let rb = pick(nir, rng)?;
            let (pa, la, ma) =
                frame_samples(dataset, ra, half_pos, half_neg, cfg.pad_factor, patch_size, rng)?;
            let (pb, lb, mb) =
                frame_samples(dataset, rb, half_pos, half_neg, cfg.pad_factor, patch_size, rng)?;
            let total = la.len() + lb.len();
            let dims = pa.dim();
            let mut patches = Array4::<f64>::zeros((total, dims.1, dims.2, dims.3));
            patches.slice_mut(ndarray::s![..la.len(), .., .., ..]).assign(&pa);
            patches.slice_mut(ndarray::s![la.len().., .., .., ..]).assign(&pb);
            let mut labels = la.clone();
            labels.extend(&lb);
            let mut modalities = vec![ma; la.len()];
            modalities.extend(vec![mb; lb.len()]);
            Ok(TrainBatch { patches, labels, modalities })
        }
    }
}

/// Forward/backward/step for one batch. Returns the loss.
fn train_step(
    net: &mut TrackNet,
    batch: &TrainBatch,
    mode: ForwardMode,
    bn_train: bool,
    backbone_trains: bool,
    sgd: &mut Sgd,
) -> Result<f64> {
    net.zero_grads();
    let (feat, stem) = net.forward_stem(&batch.patches)?;
    let (out, tail) = net.forward_tail(&feat, mode, bn_train)?;
    let (loss, dlogits) = softmax_ce(&out.logits, &batch.labels);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let dfeat = net.backward_tail(&tail, &dlogits)?;
    if backbone_trains {
        if let Some(d) = dfeat {
            net.backward_stem(&stem, d, true);
        }
    }
    net.visit_params_mut(&mut |name, p| sgd.apply(name, p));
    Ok(loss)
}

/// Run one resolved stage. On a non-finite loss the network is restored to
/// the last finite state and a numeric error is returned.
pub fn run_stage(
    net: &mut TrackNet,
    dataset: &[Sequence],
    stage: &StageConfig,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageReport> {
    let mut sgd = apply_freeze_mask(net, stage, cfg.sgd_config())?;
    let (rgb, nir) = split_by_modality(dataset);

    if stage.stage == StageName::II && net.marmot.is_some() {
        if rgb.is_empty() {
            return Err(Error::InsufficientData(
                "no RGB frames: cannot train the RGB modality-aware branch".into(),
            ));
        }
        if nir.is_empty() {
            return Err(Error::InsufficientData(
                "no NIR frames: cannot train the NIR modality-aware branch".into(),
            ));
        }
    }

    let backbone_trains = stage.trainable.contains("backbone");
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for iter in 0..stage.iterations {
        // Snapshot for divergence recovery.
        let snapshot = Checkpoint::from_state(|f| net.visit_state_mut(f));

        let (batch, mode, bn_train) = match stage.stage {
            StageName::I => {
                let b = sample_batch(dataset, DataFilter::All, &rgb, &nir, cfg, net.patch_size, rng)?;
                (b, ForwardMode::Baseline, false)
            }
            StageName::II => {
                if net.marmot.is_some() {
                    // Alternate the branch under training.
                    let filter = if iter % 2 == 0 { DataFilter::RgbOnly } else { DataFilter::NirOnly };
                    let b = sample_batch(dataset, filter, &rgb, &nir, cfg, net.patch_size, rng)?;
                    let m = b.modalities[0];
                    (b, ForwardMode::Branch(m), true)
                } else {
                    let b = sample_batch(dataset, DataFilter::All, &rgb, &nir, cfg, net.patch_size, rng)?;
                    (b, ForwardMode::Baseline, false)
                }
            }
            StageName::III => {
                let b = sample_batch(dataset, DataFilter::Mixed, &rgb, &nir, cfg, net.patch_size, rng)?;
                let mode = if net.marmot.is_some() { ForwardMode::Fused } else { ForwardMode::Baseline };
                (b, mode, false)
            }
            StageName::OneStage => {
                let b = sample_batch(dataset, DataFilter::All, &rgb, &nir, cfg, net.patch_size, rng)?;
                let mode = if net.marmot.is_some() { ForwardMode::Fused } else { ForwardMode::Baseline };
                (b, mode, net.marmot.is_some())
            }
        };

        let loss = train_step(net, &batch, mode, bn_train, backbone_trains, &mut sgd)?;
        if !loss.is_finite() {
            snapshot.apply_to_state(|f| net.visit_state_mut(f))?;
            return Err(Error::Numeric(format!(
                "stage {:?} diverged at iteration {iter}; parameters restored to the last finite state",
                stage.stage
            )));
        }
        if iter == 0 {
            first_loss = loss;
        }
        final_loss = loss;
    }

    Ok(StageReport {
        stage: stage.stage,
        iterations: stage.iterations,
        first_loss,
        final_loss,
    })
}

/// Run stages one to three in order, invoking the callback after each stage
/// (checkpointing hook). Deterministic in `cfg.seed`.
pub fn run_three_stage(
    net: &mut TrackNet,
    dataset: &[Sequence],
    cfg: &TrainingConfig,
    mut on_stage: impl FnMut(StageName, &mut TrackNet, &StageReport) -> Result<()>,
) -> Result<Vec<StageReport>> {
    let plan = stage_plan(net, cfg);
    let mut reports = Vec::with_capacity(plan.len());
    for (k, stage) in plan.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 * (k as u64 + 1)));
        let report = run_stage(net, dataset, stage, cfg, &mut rng)?;
        on_stage(stage.stage, net, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Run the one-stage ablation. Deterministic in `cfg.seed`.
pub fn run_one_stage(
    net: &mut TrackNet,
    dataset: &[Sequence],
    cfg: &TrainingConfig,
) -> Result<StageReport> {
    let stage = one_stage_plan(net, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7000));
    run_stage(net, dataset, &stage, cfg, &mut rng)
}
