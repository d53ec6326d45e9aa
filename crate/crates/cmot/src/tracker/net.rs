//! The classification-style tracking network: a small convolutional
//! backbone, a pluggable modality-aware block after a configurable layer,
//! and a two-layer head ending in a target/background score.

use ndarray::{Array2, Array4, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::marmot::{
    branch_backward, branch_forward_cached, ensemble_backward, ensemble_forward_cached,
    marmot_backward, marmot_forward_cached, BranchCache, EnsembleCache, MArMOTParams, MarmotCache,
    Mode,
};
use crate::nn::conv::ConvCache;
use crate::nn::linear::LinearCache;
use crate::nn::pool::{max_pool2, max_pool2_backward, MaxPoolCache};
use crate::nn::{Conv2d, Linear, Param, ParamFn, StateFn};

/// One backbone layer: convolution, rectification, optional 2x2 max pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: bool,
}

/// Backbone layout plus the insertion point(s) for the modality-aware block.
///
/// The classification pipeline uses exactly one insertion point. The
/// regression-style preset carries two (after the third and fourth blocks)
/// and is exposed as configuration only: it validates, but building a
/// network from it is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub layers: Vec<ConvLayerSpec>,
    /// 1-based layer indices after which a block is inserted.
    pub insertion_points: Vec<usize>,
}

impl BackboneSpec {
    /// Three-layer backbone in the spirit of the classification baseline,
    /// with the block inserted after the third layer.
    pub fn classification() -> Self {
        BackboneSpec {
            layers: vec![
                ConvLayerSpec { out_channels: 32, kernel: 7, stride: 2, padding: 0, pool: true },
                ConvLayerSpec { out_channels: 64, kernel: 5, stride: 2, padding: 0, pool: false },
                ConvLayerSpec { out_channels: 96, kernel: 3, stride: 1, padding: 0, pool: false },
            ],
            insertion_points: vec![3],
        }
    }

    /// Regression-style preset with insertions after the third and fourth
    /// blocks. Configuration only; `build_network` rejects it.
    pub fn regression_preset() -> Self {
        BackboneSpec {
            layers: vec![
                ConvLayerSpec { out_channels: 16, kernel: 7, stride: 2, padding: 0, pool: true },
                ConvLayerSpec { out_channels: 32, kernel: 3, stride: 2, padding: 1, pool: false },
                ConvLayerSpec { out_channels: 64, kernel: 3, stride: 2, padding: 1, pool: false },
                ConvLayerSpec { out_channels: 128, kernel: 3, stride: 2, padding: 1, pool: false },
            ],
            insertion_points: vec![3, 4],
        }
    }

    /// Desk-scale backbone for the toy benchmark.
    pub fn toy() -> Self {
        BackboneSpec {
            layers: vec![
                ConvLayerSpec { out_channels: 8, kernel: 3, stride: 2, padding: 0, pool: true },
                ConvLayerSpec { out_channels: 12, kernel: 3, stride: 1, padding: 0, pool: false },
                ConvLayerSpec { out_channels: 16, kernel: 3, stride: 1, padding: 1, pool: false },
            ],
            insertion_points: vec![3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.insertion_points.is_empty() {
            return Err(Error::Config("at least one insertion point required".into()));
        }
        for &ip in &self.insertion_points {
            if ip < 1 || ip > self.layers.len() {
                return Err(Error::Config(format!(
                    "insertion point {ip} out of range [1, {}]",
                    self.layers.len()
                )));
            }
            let c = self.layers[ip - 1].out_channels;
            if c % 2 != 0 {
                return Err(Error::Config(format!(
                    "channel count {c} at insertion point {ip} must be even"
                )));
            }
        }
        Ok(())
    }

    /// Channel count flowing out of the 1-based layer index.
    pub fn channels_at(&self, layer: usize) -> usize {
        self.layers[layer - 1].out_channels
    }
}

/// Head/shape configuration for building a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub backbone: BackboneSpec,
    /// Input patches are square with this side length.
    pub patch_size: usize,
    /// Hidden width of the two-layer head.
    pub head_hidden: usize,
    /// Identity substitution when false: the plug-and-play baseline.
    pub with_marmot: bool,
}

impl NetConfig {
    pub fn toy(with_marmot: bool) -> Self {
        NetConfig {
            backbone: BackboneSpec::toy(),
            patch_size: 39,
            head_hidden: 48,
            with_marmot,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::toy(true)
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub pool: bool,
}

/// Which path the block takes at the insertion point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Identity at the insertion point (baseline network).
    Baseline,
    /// One modality-aware branch only, bypassing the ensemble.
    Branch(Modality),
    /// Both branches fused by the ensemble; modality-blind.
    Fused,
}

/// The full tracking network.
#[derive(Debug, Clone)]
pub struct TrackNet {
    pub spec: BackboneSpec,
    pub patch_size: usize,
    pub backbone: Vec<ConvBlock>,
    pub marmot: Option<MArMOTParams>,
    /// 1-based layer index after which the block sits.
    pub insertion: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub insert_channels: usize,
    pub insert_hw: (usize, usize),
    pub feature_dim: usize,
}

/// Build a network from a spec; fails on multi-point (regression-style)
/// presets and on odd channel counts at the insertion point.
pub fn build_network(cfg: &NetConfig, seed: u64) -> Result<TrackNet> {
    cfg.backbone.validate()?;
    if cfg.backbone.insertion_points.len() != 1 {
        return Err(Error::Config(format!(
            "the classification pipeline supports exactly one insertion point; \
             {:?} is a configuration-only preset",
            cfg.backbone.insertion_points
        )));
    }
    let insertion = cfg.backbone.insertion_points[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut backbone = Vec::with_capacity(cfg.backbone.layers.len());
    let mut channels = 3usize;
    let mut hw = (cfg.patch_size, cfg.patch_size);
    let mut insert_hw = (0, 0);
    for (i, layer) in cfg.backbone.layers.iter().enumerate() {
        let conv = Conv2d::new(
            channels,
            layer.out_channels,
            layer.kernel,
            layer.stride,
            layer.padding,
            1,
            &mut rng,
        );
        hw = conv.out_hw(hw.0, hw.1)?;
        if layer.pool {
            hw = (hw.0 / 2, hw.1 / 2);
        }
        if hw.0 == 0 || hw.1 == 0 {
            return Err(Error::Config(format!(
                "patch size {} collapses to zero after layer {}",
                cfg.patch_size,
                i + 1
            )));
        }
        channels = layer.out_channels;
        backbone.push(ConvBlock { conv, pool: layer.pool });
        if i + 1 == insertion {
            insert_hw = hw;
        }
    }

    let insert_channels = cfg.backbone.channels_at(insertion);
    let marmot = if cfg.with_marmot {
        Some(MArMOTParams::new(insert_channels, &mut rng)?)
    } else {
        None
    };

    let feature_dim = channels * hw.0 * hw.1;
    let fc1 = Linear::new(feature_dim, cfg.head_hidden, &mut rng);
    let fc2 = Linear::new(cfg.head_hidden, 2, &mut rng);

    Ok(TrackNet {
        spec: cfg.backbone.clone(),
        patch_size: cfg.patch_size,
        backbone,
        marmot,
        insertion,
        fc1,
        fc2,
        insert_channels,
        insert_hw,
        feature_dim,
    })
}

pub struct StemCache {
    layers: Vec<(ConvCache, Array4<f64>, Option<MaxPoolCache>)>,
}

enum BlockCache {
    Identity,
    Branch(BranchCache, Modality),
    Fused(MarmotCache),
    /// Fused forward whose branch caches were not kept (ensemble-only
    /// backward; used during online updates where branches stay frozen).
    FusedLight(EnsembleCache),
}

pub struct TailCache {
    block: BlockCache,
    layers: Vec<(ConvCache, Array4<f64>, Option<MaxPoolCache>)>,
    flat_hw: (usize, usize, usize),
    fc1_cache: LinearCache,
    fc1_act: Array2<f64>,
    fc2_cache: LinearCache,
}

/// Head outputs: two-way logits plus the activated hidden layer (the
/// feature the box regressor consumes).
pub struct NetOutput {
    pub logits: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl NetOutput {
    /// Per-sample target score: target logit minus background logit.
    pub fn scores(&self) -> Vec<f64> {
        (0..self.logits.dim().0)
            .map(|i| self.logits[[i, 1]] - self.logits[[i, 0]])
            .collect()
    }
}

impl TrackNet {
    fn run_blocks(
        blocks: &[ConvBlock],
        x: &Array4<f64>,
    ) -> Result<(Array4<f64>, Vec<(ConvCache, Array4<f64>, Option<MaxPoolCache>)>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(blocks.len());
        for block in blocks {
            let (mut y, conv_cache) = block.conv.forward(&cur.view())?;
            crate::nn::relu4(&mut y);
            let act = y.clone();
            let pool_cache = if block.pool {
                let (p, pc) = max_pool2(&y);
                cur = p;
                Some(pc)
            } else {
                cur = y;
                None
            };
            caches.push((conv_cache, act, pool_cache));
        }
        Ok((cur, caches))
    }

    fn backward_blocks(
        blocks: &mut [ConvBlock],
        caches: &[(ConvCache, Array4<f64>, Option<MaxPoolCache>)],
        mut grad: Array4<f64>,
        need_wgrad: bool,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        for (i, block) in blocks.iter_mut().enumerate().rev() {
            let (conv_cache, act, pool_cache) = &caches[i];
            if let Some(pc) = pool_cache {
                grad = max_pool2_backward(pc, &grad);
            }
            crate::nn::relu4_backward(&mut grad, act);
            let need_x = need_input_grad || i > 0;
            grad = block.conv.backward(conv_cache, &grad, need_x, need_wgrad)?;
        }
        Some(grad)
    }

    /// Backbone layers up to and including the insertion point.
    pub fn forward_stem(&self, patches: &Array4<f64>) -> Result<(Array4<f64>, StemCache)> {
        let (feat, layers) = Self::run_blocks(&self.backbone[..self.insertion], patches)?;
        Ok((feat, StemCache { layers }))
    }

    /// Everything after the insertion point: the block, the remaining
    /// backbone layers and the head. `bn_train` controls the branch
    /// normalization statistics.
    pub fn forward_tail(
        &mut self,
        feat: &Array4<f64>,
        mode: ForwardMode,
        bn_train: bool,
    ) -> Result<(NetOutput, TailCache)> {
        let bn_mode = if bn_train { Mode::Train } else { Mode::Eval };
        let (block_out, block) = match (mode, &mut self.marmot) {
            (ForwardMode::Baseline, _) => (feat.clone(), BlockCache::Identity),
            (ForwardMode::Branch(m), Some(p)) => {
                let branch = match m {
                    Modality::Rgb => &mut p.branch_rgb,
                    Modality::Nir => &mut p.branch_nir,
                };
                let (y, cache) = branch_forward_cached(feat, branch, bn_mode)?;
                (y, BlockCache::Branch(cache, m))
            }
            (ForwardMode::Fused, Some(p)) => {
                let (y, cache) = marmot_forward_cached(feat, p, bn_mode)?;
                (y, BlockCache::Fused(cache))
            }
            (m, None) => {
                return Err(Error::Config(format!(
                    "forward mode {m:?} requires the modality-aware block, \
                     but the network was built without it"
                )));
            }
        };

        let (tail_out, layers) =
            Self::run_blocks(&self.backbone[self.insertion..], &block_out)?;
        let (n, c, h, w) = tail_out.dim();
        let flat = tail_out
            .into_shape_with_order((n, c * h * w))
            .expect("contiguous feature map");
        let (z1, fc1_cache) = self.fc1.forward(&flat);
        let mut hidden = z1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let (logits, fc2_cache) = self.fc2.forward(&hidden);

        Ok((
            NetOutput {
                logits,
                hidden: hidden.clone(),
            },
            TailCache {
                block,
                layers,
                flat_hw: (c, h, w),
                fc1_cache,
                fc1_act: hidden,
                fc2_cache,
            },
        ))
    }

    /// Convenience full forward.
    pub fn forward(
        &mut self,
        patches: &Array4<f64>,
        mode: ForwardMode,
        bn_train: bool,
    ) -> Result<(NetOutput, StemCache, TailCache)> {
        let (feat, stem) = self.forward_stem(patches)?;
        let (out, tail) = self.forward_tail(&feat, mode, bn_train)?;
        Ok((out, stem, tail))
    }

    /// Fused forward for inference/updates that keeps only the ensemble
    /// cache (branch parameters receive no gradients on the way back).
    pub fn forward_tail_light(
        &mut self,
        feat: &Array4<f64>,
    ) -> Result<(NetOutput, TailCache)> {
        let Some(p) = &mut self.marmot else {
            return self.forward_tail(feat, ForwardMode::Baseline, false);
        };
        let (f_rgb, _) = branch_forward_cached(feat, &mut p.branch_rgb, Mode::Eval)?;
        let (f_nir, _) = branch_forward_cached(feat, &mut p.branch_nir, Mode::Eval)?;
        let (block_out, ens_cache) = ensemble_forward_cached(&f_rgb, &f_nir, &p.ensemble)?;

        let (tail_out, layers) =
            Self::run_blocks(&self.backbone[self.insertion..], &block_out)?;
        let (n, c, h, w) = tail_out.dim();
        let flat = tail_out
            .into_shape_with_order((n, c * h * w))
            .expect("contiguous feature map");
        let (z1, fc1_cache) = self.fc1.forward(&flat);
        let mut hidden = z1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let (logits, fc2_cache) = self.fc2.forward(&hidden);
        Ok((
            NetOutput {
                logits,
                hidden: hidden.clone(),
            },
            TailCache {
                block: BlockCache::FusedLight(ens_cache),
                layers,
                flat_hw: (c, h, w),
                fc1_cache,
                fc1_act: hidden,
                fc2_cache,
            },
        ))
    }

    /// Backward from the logits down to the insertion point. Returns the
    /// gradient with respect to the insertion features (None for the
    /// ensemble-only cache, which stops at the block).
    pub fn backward_tail(
        &mut self,
        cache: &TailCache,
        dlogits: &Array2<f64>,
    ) -> Result<Option<Array4<f64>>> {
        let dhidden = self.fc2.backward(&cache.fc2_cache, dlogits);
        let mut dhidden = dhidden;
        for (g, a) in dhidden.iter_mut().zip(cache.fc1_act.iter()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let dflat = self.fc1.backward(&cache.fc1_cache, &dhidden);
        let (c, h, w) = cache.flat_hw;
        let n = dflat.dim().0;
        let dtail = dflat
            .into_shape_with_order((n, c, h, w))
            .expect("contiguous gradient");

        let dblock = Self::backward_blocks(
            &mut self.backbone[self.insertion..],
            &cache.layers,
            dtail,
            true,
            true,
        )
        .expect("tail propagates input gradient");

        match (&cache.block, &mut self.marmot) {
            (BlockCache::Identity, _) => Ok(Some(dblock)),
            (BlockCache::Branch(bc, m), Some(p)) => {
                let branch = match m {
                    Modality::Rgb => &mut p.branch_rgb,
                    Modality::Nir => &mut p.branch_nir,
                };
                Ok(Some(branch_backward(branch, bc, &dblock)))
            }
            (BlockCache::Fused(mc), Some(p)) => Ok(Some(marmot_backward(p, mc, &dblock))),
            (BlockCache::FusedLight(ec), Some(p)) => {
                ensemble_backward(&mut p.ensemble, ec, &dblock);
                Ok(None)
            }
            (_, None) => Err(Error::Config(
                "block cache without a modality-aware block".into(),
            )),
        }
    }

    /// Backward through the stem. `need_wgrad` is false when the backbone is
    /// frozen and only gradient propagation is of interest (then this call
    /// can simply be skipped).
    pub fn backward_stem(&mut self, cache: &StemCache, dfeat: Array4<f64>, need_wgrad: bool) {
        Self::backward_blocks(
            &mut self.backbone[..self.insertion],
            &cache.layers,
            dfeat,
            need_wgrad,
            false,
        );
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p: &mut Param| p.zero_grad());
    }

    pub fn visit_params_mut(&mut self, f: &mut ParamFn) {
        for (i, block) in self.backbone.iter_mut().enumerate() {
            block.conv.visit_params(&format!("backbone.conv{}", i + 1), f);
        }
        if let Some(m) = &mut self.marmot {
            m.visit_params("marmot", f);
        }
        self.fc1.visit_params("head.fc1", f);
        self.fc2.visit_params("head.fc2", f);
    }

    pub fn visit_state_mut(&mut self, f: &mut StateFn) {
        for (i, block) in self.backbone.iter_mut().enumerate() {
            block.conv.visit_state(&format!("backbone.conv{}", i + 1), f);
        }
        if let Some(m) = &mut self.marmot {
            m.visit_state("marmot", f);
        }
        self.fc1.visit_state("head.fc1", f);
        self.fc2.visit_state("head.fc2", f);
    }

    /// Names of the parameter groups present in this network.
    pub fn group_names(&self) -> Vec<String> {
        let mut groups = vec!["backbone".to_string()];
        if self.marmot.is_some() {
            groups.push("marmot.branch_rgb".to_string());
            groups.push("marmot.branch_nir".to_string());
            groups.push("marmot.ensemble".to_string());
        }
        groups.push("head.fc1".to_string());
        groups.push("head.fc2".to_string());
        groups
    }

    /// Bit-exact digest per parameter group, for freeze audits.
    pub fn group_digests(&mut self) -> std::collections::BTreeMap<String, u64> {
        let groups = self.group_names();
        let mut values: std::collections::BTreeMap<String, Vec<f64>> = groups
            .iter()
            .map(|g| (g.clone(), Vec::new()))
            .collect();
        self.visit_params_mut(&mut |name: &str, p: &mut Param| {
            let owner = groups
                .iter()
                .filter(|g| name.starts_with(g.as_str()))
                .max_by_key(|g| g.len());
            if let Some(g) = owner {
                values.get_mut(g).unwrap().extend(p.value.iter().copied());
            }
        });
        values
            .into_iter()
            .map(|(g, vs)| (g, crate::nn::bits_digest(vs.into_iter())))
            .collect()
    }

    /// Total number of scalar parameters in the modality-aware block.
    pub fn marmot_param_count(&mut self) -> usize {
        match &mut self.marmot {
            Some(m) => m.param_count(),
            None => 0,
        }
    }
}

/// Two-way softmax cross-entropy; labels are 0 (background) or 1 (target).
/// Returns the mean loss and the logit gradient.
pub fn softmax_ce(logits: &Array2<f64>, labels: &[u8]) -> (f64, Array2<f64>) {
    let n = logits.dim().0;
    assert_eq!(n, labels.len());
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 0..n {
        let l0 = logits[[i, 0]];
        let l1 = logits[[i, 1]];
        let m = l0.max(l1);
        let e0 = (l0 - m).exp();
        let e1 = (l1 - m).exp();
        let z = e0 + e1;
        let p0 = e0 / z;
        let p1 = e1 / z;
        let y = labels[i] as usize;
        loss -= if y == 1 { p1.ln() } else { p0.ln() };
        dlogits[[i, 0]] = (p0 - if y == 0 { 1.0 } else { 0.0 }) / n as f64;
        dlogits[[i, 1]] = (p1 - if y == 1 { 1.0 } else { 0.0 }) / n as f64;
    }
    (loss / n as f64, dlogits)
}

/// Flatten logits gradient helper for tests.
pub fn logits_dim(out: &NetOutput) -> (usize, usize) {
    out.logits.view().into_dimensionality::<Ix2>().unwrap().dim()
}
