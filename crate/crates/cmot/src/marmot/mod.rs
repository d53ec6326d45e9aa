//! The modality-aware representation block: two parallel modality-specific
//! branches and a normalized-weight ensemble layer.
//!
//! Each branch is an inception-style residual unit. An entry 1x1 convolution
//! captures the modality-specific representation; two 1x1 convolutions with
//! half the channels split it into two flows; a dilation-1 and a dilation-2
//! 3x3 convolution give the flows different receptive fields; their
//! concatenation is added back onto the block input. Every convolution is
//! followed by batch normalization and rectification. Output shape always
//! equals input shape, so the block can be inserted after any backbone layer
//! with an even channel count.
//!
//! The ensemble layer fuses the two branch outputs without knowing which
//! modality produced the input: global average pooling of the summed
//! features feeds a bottleneck affine map, two per-branch heads produce
//! per-channel logits, and a softmax across the branch axis yields weights
//! `a + b = 1` used to mix the branches channel by channel.
//!
//! Checkpoint parameter keys under a `marmot` prefix (see
//! [`crate::checkpoint`]), with `<b>` one of `branch_rgb`, `branch_nir` and
//! `<c>` one of `entry_1x1`, `reduce_a`, `reduce_b`, `spatial_a`,
//! `spatial_b`:
//!
//! ```text
//! marmot.<b>.<c>.weight            convolution kernels
//! marmot.<b>.<c>.bias
//! marmot.<b>.<c>_norm.weight       normalization scale/shift
//! marmot.<b>.<c>_norm.bias
//! marmot.<b>.<c>_norm.running_mean
//! marmot.<b>.<c>_norm.running_var
//! marmot.ensemble.reduce_fc.{weight,bias}
//! marmot.ensemble.head_rgb.{weight,bias}
//! marmot.ensemble.head_nir.{weight,bias}
//! ```

mod gradcheck;

pub use gradcheck::{gradient_check, CheckTarget, GradCheckReport};

use ndarray::{Array2, Array4, Axis, Slice};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::linear::LinearCache;
use crate::nn::norm::BnCache;
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{conv::ConvCache, BatchNorm2d, Conv2d, Linear, Param, ParamFn, StateFn};

/// Reduction ratio of the ensemble bottleneck.
pub const REDUCTION_RATIO: usize = 16;
/// Lower bound on the bottleneck width.
pub const HIDDEN_FLOOR: usize = 32;

/// Bottleneck width for a channel count: max(C / ratio, floor).
pub fn ensemble_hidden_dim(channels: usize) -> usize {
    (channels / REDUCTION_RATIO).max(HIDDEN_FLOOR)
}

/// Train/eval switch for the normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// One modality-specific branch.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub entry_1x1: Conv2d,
    pub entry_norm: BatchNorm2d,
    pub reduce_a: Conv2d,
    pub reduce_a_norm: BatchNorm2d,
    pub reduce_b: Conv2d,
    pub reduce_b_norm: BatchNorm2d,
    pub spatial_a: Conv2d,
    pub spatial_a_norm: BatchNorm2d,
    pub spatial_b: Conv2d,
    pub spatial_b_norm: BatchNorm2d,
}

impl BranchParams {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "modality-aware branch needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(BranchParams {
            entry_1x1: Conv2d::new(channels, channels, 1, 1, 0, 1, rng),
            entry_norm: BatchNorm2d::new(channels),
            reduce_a: Conv2d::new(channels, half, 1, 1, 0, 1, rng),
            reduce_a_norm: BatchNorm2d::new(half),
            reduce_b: Conv2d::new(channels, half, 1, 1, 0, 1, rng),
            reduce_b_norm: BatchNorm2d::new(half),
            spatial_a: Conv2d::new(half, half, 3, 1, 1, 1, rng),
            spatial_a_norm: BatchNorm2d::new(half),
            spatial_b: Conv2d::new(half, half, 3, 1, 2, 2, rng),
            spatial_b_norm: BatchNorm2d::new(half),
        })
    }

    pub fn channels(&self) -> usize {
        self.entry_1x1.out_channels()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.entry_1x1.visit_params(&format!("{prefix}.entry_1x1"), f);
        self.entry_norm.visit_params(&format!("{prefix}.entry_norm"), f);
        self.reduce_a.visit_params(&format!("{prefix}.reduce_a"), f);
        self.reduce_a_norm.visit_params(&format!("{prefix}.reduce_a_norm"), f);
        self.reduce_b.visit_params(&format!("{prefix}.reduce_b"), f);
        self.reduce_b_norm.visit_params(&format!("{prefix}.reduce_b_norm"), f);
        self.spatial_a.visit_params(&format!("{prefix}.spatial_a"), f);
        self.spatial_a_norm.visit_params(&format!("{prefix}.spatial_a_norm"), f);
        self.spatial_b.visit_params(&format!("{prefix}.spatial_b"), f);
        self.spatial_b_norm.visit_params(&format!("{prefix}.spatial_b_norm"), f);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut StateFn) {
        self.entry_1x1.visit_state(&format!("{prefix}.entry_1x1"), f);
        self.entry_norm.visit_state(&format!("{prefix}.entry_norm"), f);
        self.reduce_a.visit_state(&format!("{prefix}.reduce_a"), f);
        self.reduce_a_norm.visit_state(&format!("{prefix}.reduce_a_norm"), f);
        self.reduce_b.visit_state(&format!("{prefix}.reduce_b"), f);
        self.reduce_b_norm.visit_state(&format!("{prefix}.reduce_b_norm"), f);
        self.spatial_a.visit_state(&format!("{prefix}.spatial_a"), f);
        self.spatial_a_norm.visit_state(&format!("{prefix}.spatial_a_norm"), f);
        self.spatial_b.visit_state(&format!("{prefix}.spatial_b"), f);
        self.spatial_b_norm.visit_state(&format!("{prefix}.spatial_b_norm"), f);
    }
}

/// The normalized-weight fusion layer.
#[derive(Debug, Clone)]
pub struct EnsembleParams {
    pub reduce_fc: Linear,
    pub head_rgb: Linear,
    pub head_nir: Linear,
}

impl EnsembleParams {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = ensemble_hidden_dim(channels);
        EnsembleParams {
            reduce_fc: Linear::new(channels, hidden, rng),
            head_rgb: Linear::new(hidden, channels, rng),
            head_nir: Linear::new(hidden, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce_fc.in_features()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.reduce_fc.visit_params(&format!("{prefix}.reduce_fc"), f);
        self.head_rgb.visit_params(&format!("{prefix}.head_rgb"), f);
        self.head_nir.visit_params(&format!("{prefix}.head_nir"), f);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut StateFn) {
        self.reduce_fc.visit_state(&format!("{prefix}.reduce_fc"), f);
        self.head_rgb.visit_state(&format!("{prefix}.head_rgb"), f);
        self.head_nir.visit_state(&format!("{prefix}.head_nir"), f);
    }
}

/// Both branches plus the ensemble; all share the channel count.
#[derive(Debug, Clone)]
pub struct MArMOTParams {
    pub branch_rgb: BranchParams,
    pub branch_nir: BranchParams,
    pub ensemble: EnsembleParams,
}

impl MArMOTParams {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MArMOTParams {
            branch_rgb: BranchParams::new(channels, rng)?,
            branch_nir: BranchParams::new(channels, rng)?,
            ensemble: EnsembleParams::new(channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.branch_rgb.channels()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.branch_rgb.visit_params(&format!("{prefix}.branch_rgb"), f);
        self.branch_nir.visit_params(&format!("{prefix}.branch_nir"), f);
        self.ensemble.visit_params(&format!("{prefix}.ensemble"), f);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut StateFn) {
        self.branch_rgb.visit_state(&format!("{prefix}.branch_rgb"), f);
        self.branch_nir.visit_state(&format!("{prefix}.branch_nir"), f);
        self.ensemble.visit_state(&format!("{prefix}.ensemble"), f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params("marmot", &mut |_, p: &mut Param| count += p.value.len());
        count
    }
}

pub struct BranchCache {
    entry_conv: ConvCache,
    entry_bn: BnCache,
    entry_act: Array4<f64>,
    reduce_a_conv: ConvCache,
    reduce_a_bn: BnCache,
    reduce_a_act: Array4<f64>,
    reduce_b_conv: ConvCache,
    reduce_b_bn: BnCache,
    reduce_b_act: Array4<f64>,
    spatial_a_conv: ConvCache,
    spatial_a_bn: BnCache,
    spatial_a_act: Array4<f64>,
    spatial_b_conv: ConvCache,
    spatial_b_bn: BnCache,
    spatial_b_act: Array4<f64>,
}

/// Forward through one modality-aware branch; returns the output and the
/// cache needed for the backward pass.
pub fn branch_forward_cached(
    x: &Array4<f64>,
    p: &mut BranchParams,
    mode: Mode,
) -> Result<(Array4<f64>, BranchCache)> {
    let c = p.channels();
    if x.dim().1 != c {
        return Err(Error::Shape(format!(
            "branch expects {c} channels, input has {}",
            x.dim().1
        )));
    }
    let train = mode.is_train();

    let (u, entry_conv) = p.entry_1x1.forward(&x.view())?;
    let (mut u, entry_bn) = p.entry_norm.forward(&u, train);
    crate::nn::relu4(&mut u);
    let entry_act = u;

    let (fa, reduce_a_conv) = p.reduce_a.forward(&entry_act.view())?;
    let (mut fa, reduce_a_bn) = p.reduce_a_norm.forward(&fa, train);
    crate::nn::relu4(&mut fa);
    let reduce_a_act = fa;
    let (sa, spatial_a_conv) = p.spatial_a.forward(&reduce_a_act.view())?;
    let (mut sa, spatial_a_bn) = p.spatial_a_norm.forward(&sa, train);
    crate::nn::relu4(&mut sa);
    let spatial_a_act = sa;

    let (fb, reduce_b_conv) = p.reduce_b.forward(&entry_act.view())?;
    let (mut fb, reduce_b_bn) = p.reduce_b_norm.forward(&fb, train);
    crate::nn::relu4(&mut fb);
    let reduce_b_act = fb;
    let (sb, spatial_b_conv) = p.spatial_b.forward(&reduce_b_act.view())?;
    let (mut sb, spatial_b_bn) = p.spatial_b_norm.forward(&sb, train);
    crate::nn::relu4(&mut sb);
    let spatial_b_act = sb;

    // Residual: input plus the concatenated flows.
    let mut y = x.clone();
    let half = c / 2;
    {
        let mut lo = y.slice_axis_mut(Axis(1), Slice::from(0..half));
        lo += &spatial_a_act;
        let mut hi = y.slice_axis_mut(Axis(1), Slice::from(half..c));
        hi += &spatial_b_act;
    }

    Ok((
        y,
        BranchCache {
            entry_conv,
            entry_bn,
            entry_act,
            reduce_a_conv,
            reduce_a_bn,
            reduce_a_act,
            reduce_b_conv,
            reduce_b_bn,
            reduce_b_act,
            spatial_a_conv,
            spatial_a_bn,
            spatial_a_act,
            spatial_b_conv,
            spatial_b_bn,
            spatial_b_act,
        },
    ))
}

/// Forward through one branch, discarding the backward cache.
pub fn branch_forward(x: &Array4<f64>, p: &mut BranchParams, mode: Mode) -> Result<Array4<f64>> {
    branch_forward_cached(x, p, mode).map(|(y, _)| y)
}

/// Backward through one branch. Accumulates parameter gradients and returns
/// the gradient with respect to the block input.
pub fn branch_backward(p: &mut BranchParams, cache: &BranchCache, gy: &Array4<f64>) -> Array4<f64> {
    let c = p.channels();
    let half = c / 2;

    let mut ga = gy.slice_axis(Axis(1), Slice::from(0..half)).to_owned();
    crate::nn::relu4_backward(&mut ga, &cache.spatial_a_act);
    let ga = p.spatial_a_norm.backward(&cache.spatial_a_bn, &ga);
    let mut ga = p
        .spatial_a
        .backward(&cache.spatial_a_conv, &ga, true, true)
        .expect("xgrad requested");
    crate::nn::relu4_backward(&mut ga, &cache.reduce_a_act);
    let ga = p.reduce_a_norm.backward(&cache.reduce_a_bn, &ga);
    let du_a = p
        .reduce_a
        .backward(&cache.reduce_a_conv, &ga, true, true)
        .expect("xgrad requested");

    let mut gb = gy.slice_axis(Axis(1), Slice::from(half..c)).to_owned();
    crate::nn::relu4_backward(&mut gb, &cache.spatial_b_act);
    let gb = p.spatial_b_norm.backward(&cache.spatial_b_bn, &gb);
    let mut gb = p
        .spatial_b
        .backward(&cache.spatial_b_conv, &gb, true, true)
        .expect("xgrad requested");
    crate::nn::relu4_backward(&mut gb, &cache.reduce_b_act);
    let gb = p.reduce_b_norm.backward(&cache.reduce_b_bn, &gb);
    let du_b = p
        .reduce_b
        .backward(&cache.reduce_b_conv, &gb, true, true)
        .expect("xgrad requested");

    let mut du = du_a + du_b;
    crate::nn::relu4_backward(&mut du, &cache.entry_act);
    let du = p.entry_norm.backward(&cache.entry_bn, &du);
    let dx_branch = p
        .entry_1x1
        .backward(&cache.entry_conv, &du, true, true)
        .expect("xgrad requested");

    // Residual path.
    dx_branch + gy
}

pub struct EnsembleCache {
    f_rgb: Array4<f64>,
    f_nir: Array4<f64>,
    weights_rgb: Array2<f64>,
    weights_nir: Array2<f64>,
    reduce_cache: LinearCache,
    reduce_act: Array2<f64>,
    head_rgb_cache: LinearCache,
    head_nir_cache: LinearCache,
    hw: (usize, usize),
}

/// Fuse two branch outputs with per-channel normalized weights.
pub fn ensemble_forward_cached(
    f_rgb: &Array4<f64>,
    f_nir: &Array4<f64>,
    p: &EnsembleParams,
) -> Result<(Array4<f64>, EnsembleCache)> {
    if f_rgb.dim() != f_nir.dim() {
        return Err(Error::Shape(format!(
            "ensemble inputs disagree: {:?} vs {:?}",
            f_rgb.dim(),
            f_nir.dim()
        )));
    }
    let (n, c, h, w) = f_rgb.dim();
    if c != p.channels() {
        return Err(Error::Shape(format!(
            "ensemble expects {} channels, input has {c}",
            p.channels()
        )));
    }

    let summed = f_rgb + f_nir;
    let pooled = global_avg_pool(&summed);
    let (z0, reduce_cache) = p.reduce_fc.forward(&pooled);
    let mut z = z0;
    z.mapv_inplace(|v| v.max(0.0));
    let reduce_act = z.clone();
    let (g_rgb, head_rgb_cache) = p.head_rgb.forward(&reduce_act);
    let (g_nir, head_nir_cache) = p.head_nir.forward(&reduce_act);

    // Softmax over the branch axis, stabilized per element.
    let mut weights_rgb = Array2::<f64>::zeros((n, c));
    let mut weights_nir = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let gr = g_rgb[[ni, ci]];
            let gn = g_nir[[ni, ci]];
            let m = gr.max(gn);
            let er = (gr - m).exp();
            let en = (gn - m).exp();
            let denom = er + en;
            weights_rgb[[ni, ci]] = er / denom;
            weights_nir[[ni, ci]] = en / denom;
        }
    }

    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let a = weights_rgb[[ni, ci]];
            let b = weights_nir[[ni, ci]];
            let fr = f_rgb.index_axis(Axis(0), ni).index_axis_move(Axis(0), ci);
            let fnr = f_nir.index_axis(Axis(0), ni).index_axis_move(Axis(0), ci);
            let mut o = out.index_axis_mut(Axis(0), ni).index_axis_move(Axis(0), ci);
            for ((ov, rv), nv) in o.iter_mut().zip(fr.iter()).zip(fnr.iter()) {
                *ov = a * rv + b * nv;
            }
        }
    }

    Ok((
        out,
        EnsembleCache {
            f_rgb: f_rgb.clone(),
            f_nir: f_nir.clone(),
            weights_rgb,
            weights_nir,
            reduce_cache,
            reduce_act,
            head_rgb_cache,
            head_nir_cache,
            hw: (h, w),
        },
    ))
}

/// Forward through the ensemble, discarding the backward cache.
pub fn ensemble_forward(
    f_rgb: &Array4<f64>,
    f_nir: &Array4<f64>,
    p: &EnsembleParams,
) -> Result<Array4<f64>> {
    ensemble_forward_cached(f_rgb, f_nir, p).map(|(y, _)| y)
}

/// Per-channel fusion weights (a, b) for a pair of branch outputs; each row
/// sums to one. Exposed for invariant tests and diagnostics.
pub fn ensemble_weights(
    f_rgb: &Array4<f64>,
    f_nir: &Array4<f64>,
    p: &EnsembleParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (_, cache) = ensemble_forward_cached(f_rgb, f_nir, p)?;
    Ok((cache.weights_rgb, cache.weights_nir))
}

/// Backward through the ensemble; returns gradients for both inputs.
pub fn ensemble_backward(
    p: &mut EnsembleParams,
    cache: &EnsembleCache,
    gout: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>) {
    let (n, c, h, w) = gout.dim();
    let mut df_rgb = Array4::<f64>::zeros((n, c, h, w));
    let mut df_nir = Array4::<f64>::zeros((n, c, h, w));
    let mut d_wr = Array2::<f64>::zeros((n, c));
    let mut d_wn = Array2::<f64>::zeros((n, c));

    for ni in 0..n {
        for ci in 0..c {
            let a = cache.weights_rgb[[ni, ci]];
            let b = cache.weights_nir[[ni, ci]];
            let g = gout.index_axis(Axis(0), ni).index_axis_move(Axis(0), ci);
            let fr = cache.f_rgb.index_axis(Axis(0), ni).index_axis_move(Axis(0), ci);
            let fnr = cache.f_nir.index_axis(Axis(0), ni).index_axis_move(Axis(0), ci);
            let mut dr = df_rgb.index_axis_mut(Axis(0), ni).index_axis_move(Axis(0), ci);
            let mut dn = df_nir.index_axis_mut(Axis(0), ni).index_axis_move(Axis(0), ci);
            let mut acc_r = 0.0;
            let mut acc_n = 0.0;
            for (((gv, rv), nv), (drv, dnv)) in g
                .iter()
                .zip(fr.iter())
                .zip(fnr.iter())
                .zip(dr.iter_mut().zip(dn.iter_mut()))
            {
                *drv = a * gv;
                *dnv = b * gv;
                acc_r += gv * rv;
                acc_n += gv * nv;
            }
            d_wr[[ni, ci]] = acc_r;
            d_wn[[ni, ci]] = acc_n;
        }
    }

    // Softmax jacobian over the two-way branch axis.
    let mut dg_rgb = Array2::<f64>::zeros((n, c));
    let mut dg_nir = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let a = cache.weights_rgb[[ni, ci]];
            let b = cache.weights_nir[[ni, ci]];
            let ab = a * b;
            dg_rgb[[ni, ci]] = ab * (d_wr[[ni, ci]] - d_wn[[ni, ci]]);
            dg_nir[[ni, ci]] = ab * (d_wn[[ni, ci]] - d_wr[[ni, ci]]);
        }
    }

    let dz_rgb = p.head_rgb.backward(&cache.head_rgb_cache, &dg_rgb);
    let dz_nir = p.head_nir.backward(&cache.head_nir_cache, &dg_nir);
    let mut dz = dz_rgb + dz_nir;
    for (g, z) in dz.iter_mut().zip(cache.reduce_act.iter()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let ds = p.reduce_fc.backward(&cache.reduce_cache, &dz);
    let du = global_avg_pool_backward(&ds, cache.hw);

    df_rgb += &du;
    df_nir += &du;
    (df_rgb, df_nir)
}

pub struct MarmotCache {
    rgb_branch: BranchCache,
    nir_branch: BranchCache,
    ensemble: EnsembleCache,
}

/// Full block: both branches receive the same single-modality input; the
/// ensemble fuses their outputs. The signature deliberately carries no
/// modality label.
pub fn marmot_forward_cached(
    x: &Array4<f64>,
    p: &mut MArMOTParams,
    mode: Mode,
) -> Result<(Array4<f64>, MarmotCache)> {
    let (f_rgb, rgb_branch) = branch_forward_cached(x, &mut p.branch_rgb, mode)?;
    let (f_nir, nir_branch) = branch_forward_cached(x, &mut p.branch_nir, mode)?;
    let (y, ensemble) = ensemble_forward_cached(&f_rgb, &f_nir, &p.ensemble)?;
    Ok((
        y,
        MarmotCache {
            rgb_branch,
            nir_branch,
            ensemble,
        },
    ))
}

/// Forward through the full block, discarding the backward cache.
pub fn marmot_forward(x: &Array4<f64>, p: &mut MArMOTParams, mode: Mode) -> Result<Array4<f64>> {
    marmot_forward_cached(x, p, mode).map(|(y, _)| y)
}

/// Backward through the full block.
pub fn marmot_backward(p: &mut MArMOTParams, cache: &MarmotCache, gy: &Array4<f64>) -> Array4<f64> {
    let (d_rgb, d_nir) = ensemble_backward(&mut p.ensemble, &cache.ensemble, gy);
    let dx_rgb = branch_backward(&mut p.branch_rgb, &cache.rgb_branch, &d_rgb);
    let dx_nir = branch_backward(&mut p.branch_nir, &cache.nir_branch, &d_nir);
    dx_rgb + dx_nir
}
