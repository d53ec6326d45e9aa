//! Synthetic cross-modal sequences.
//!
//! Two generators live here: a converter that collapses co-registered
//! dual-modality (two-stream) sequences into single-stream cross-modal
//! sequences, and a fully procedural toy renderer that draws a textured
//! moving target over a structured background in either an RGB rendering or
//! a grayscale-like NIR rendering of the same scene geometry.
//!
//! The NIR rendering is a documented stand-in for real sensor response:
//! luminance collapse, gamma 0.6 remap, Gaussian noise with sigma 0.02.
//! Ground truth is shared between renderings; modality changes appearance
//! only.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    AttributeTag, BoundingBox, FrameRecord, ImageBuf, ImageRef, Modality, Sequence,
};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Dual-modality conversion
// ---------------------------------------------------------------------------

/// A co-registered two-stream sequence with shared ground truth and
/// per-frame challenge flags (illumination variation, thermal crossover).
#[derive(Debug, Clone)]
pub struct DualModalitySequence {
    pub id: String,
    pub frames_a: Vec<ImageRef>,
    pub frames_b: Vec<ImageRef>,
    pub gt: Vec<BoundingBox>,
    pub iv: Vec<bool>,
    pub tc: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl DualModalitySequence {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.gt.len();
        if self.frames_a.len() != n
            || self.frames_b.len() != n
            || self.iv.len() != n
            || self.tc.len() != n
        {
            return Err(Error::Structure(format!(
                "dual sequence {} has unequal stream lengths",
                self.id
            )));
        }
        if n == 0 {
            return Err(Error::Structure(format!("dual sequence {} is empty", self.id)));
        }
        Ok(())
    }
}

/// Why a conversion produced no sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscardReason {
    /// More than five modality switches.
    TooManySwitches { switches: usize },
    /// Too short to host an injected segment.
    TooShort,
}

/// Conversion outcome: a sequence or a documented discard.
#[derive(Debug, Clone)]
pub enum Converted {
    Kept(Sequence),
    Discarded { id: String, reason: DiscardReason },
}

impl Converted {
    pub fn kept(self) -> Option<Sequence> {
        match self {
            Converted::Kept(s) => Some(s),
            Converted::Discarded { .. } => None,
        }
    }
}

/// Convert a dual-modality sequence into a single-stream cross-modal one.
///
/// The output starts in RGB unless illumination variation is flagged on the
/// first frame. The modality toggles exactly at challenge onsets (the first
/// frame of each maximal run of IV/TC flags). More than five switches
/// discards the sequence. A sequence with no switch at all gets one
/// contiguous segment flipped to the other modality; the segment covers a
/// uniformly drawn fraction of 1/4 to 1/2 of the frames at a uniformly drawn
/// position, deterministic in `seed`, and never touches frame one.
pub fn convert_dual(seq: &DualModalitySequence, seed: u64) -> Result<Converted> {
    seq.validate()?;
    let n = seq.len();

    let flags: Vec<bool> = (0..n).map(|i| seq.iv[i] || seq.tc[i]).collect();
    let onsets: Vec<usize> = (1..n).filter(|&i| flags[i] && !flags[i - 1]).collect();
    if onsets.len() > 5 {
        return Ok(Converted::Discarded {
            id: seq.id.clone(),
            reason: DiscardReason::TooManySwitches {
                switches: onsets.len(),
            },
        });
    }

    let start = if seq.iv[0] { Modality::Nir } else { Modality::Rgb };
    let mut modalities = Vec::with_capacity(n);
    let mut current = start;
    let mut next_onset = 0usize;
    for i in 0..n {
        if next_onset < onsets.len() && onsets[next_onset] == i {
            current = current.other();
            next_onset += 1;
        }
        modalities.push(current);
    }

    if onsets.is_empty() {
        if n < 2 {
            return Ok(Converted::Discarded {
                id: seq.id.clone(),
                reason: DiscardReason::TooShort,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frac: f64 = rng.gen_range(0.25..=0.5);
        let lo = (n as f64 / 4.0).ceil() as usize;
        let hi = (n as f64 / 2.0).floor() as usize;
        let m = ((frac * n as f64).round() as usize).clamp(lo.max(1), hi.max(1));
        // The segment starts at frame 2 or later so the start rule holds.
        let s = rng.gen_range(1..=n - m);
        for item in modalities.iter_mut().skip(s).take(m) {
            *item = item.other();
        }
    }

    let frames: Vec<FrameRecord> = (0..n)
        .map(|i| {
            let image = match modalities[i] {
                Modality::Rgb => seq.frames_a[i].clone(),
                Modality::Nir => seq.frames_b[i].clone(),
            };
            FrameRecord {
                image,
                modality: modalities[i],
                gt: seq.gt[i],
                visible: true,
            }
        })
        .collect();

    Ok(Converted::Kept(Sequence {
        id: seq.id.clone(),
        frames,
        attributes: BTreeSet::new(),
        height: seq.height,
        width: seq.width,
    }))
}

// ---------------------------------------------------------------------------
// Procedural toy sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetShape {
    Rect,
    Ellipse,
}

/// Visual description of the rendered target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetStyle {
    pub shape: TargetShape,
    pub width: f64,
    pub height: f64,
    /// Stripe colors; the stripes survive the NIR collapse when the two
    /// luminances differ.
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    pub stripe_period: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundStyle {
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    pub period: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionSpec {
    pub vx: f64,
    pub vy: f64,
    /// Per-frame Gaussian jitter on the center.
    pub jitter: f64,
}

/// Full recipe for one procedural sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySequenceConfig {
    pub id: String,
    pub length: usize,
    pub image_size: usize,
    pub target: TargetStyle,
    pub background: BackgroundStyle,
    pub motion: MotionSpec,
    /// Frame indices at which the modality flips; strictly increasing,
    /// within [1, length).
    pub switch_schedule: Vec<usize>,
    /// Frames rendered with a +0.5 intensity boost (imaging adaptation);
    /// only at or after a switch.
    pub ma_frames: Vec<usize>,
    pub seed: u64,
}

impl ToySequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        for w in self.switch_schedule.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "switch schedule must be strictly increasing: {:?}",
                    self.switch_schedule
                )));
            }
        }
        if let (Some(&first), Some(&last)) =
            (self.switch_schedule.first(), self.switch_schedule.last())
        {
            if first < 1 || last >= self.length {
                return Err(Error::Config(format!(
                    "switch indices must lie in [1, {}): {:?}",
                    self.length, self.switch_schedule
                )));
            }
        }
        let first_switch = self.switch_schedule.first().copied();
        for &m in &self.ma_frames {
            if m >= self.length {
                return Err(Error::Config(format!("MA frame {m} out of range")));
            }
            match first_switch {
                Some(s) if m >= s => {}
                _ => {
                    return Err(Error::Config(format!(
                        "MA frame {m} precedes every modality switch"
                    )))
                }
            }
        }
        if self.target.width < 4.0
            || self.target.height < 4.0
            || self.target.width >= self.image_size as f64 / 2.0
            || self.target.height >= self.image_size as f64 / 2.0
        {
            return Err(Error::Config(format!(
                "target {}x{} does not fit a {} image",
                self.target.width, self.target.height, self.image_size
            )));
        }
        Ok(())
    }
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Scene geometry for one frame: target center.
struct SceneState {
    cx: f64,
    cy: f64,
}

/// Render the scene in RGB; the shared geometry for both modalities.
fn render_rgb(cfg: &ToySequenceConfig, scene: &SceneState) -> Array3<f64> {
    let s = cfg.image_size;
    let mut img = Array3::<f64>::zeros((s, s, 3));
    let bg = &cfg.background;
    let tg = &cfg.target;
    let (hw, hh) = (tg.width / 2.0, tg.height / 2.0);

    for row in 0..s {
        for col in 0..s {
            let x = col as f64 + 0.5;
            let y = row as f64 + 0.5;
            let p = 0.5
                + 0.25 * (2.0 * std::f64::consts::PI * x / bg.period).sin()
                + 0.25 * (2.0 * std::f64::consts::PI * y / (bg.period * 1.37)).cos();
            let mut color = mix(bg.color_a, bg.color_b, p.clamp(0.0, 1.0));

            let dx = x - scene.cx;
            let dy = y - scene.cy;
            let inside = match tg.shape {
                TargetShape::Rect => dx.abs() <= hw && dy.abs() <= hh,
                TargetShape::Ellipse => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
            };
            if inside {
                let stripe = 0.5
                    + 0.5 * (2.0 * std::f64::consts::PI * (dx + dy) / tg.stripe_period).sin();
                color = mix(tg.color_a, tg.color_b, stripe);
            }

            img[[row, col, 0]] = color[0];
            img[[row, col, 1]] = color[1];
            img[[row, col, 2]] = color[2];
        }
    }
    img
}

/// Collapse an RGB rendering to the NIR stand-in: luminance, gamma 0.6
/// remap, a triangle fold, Gaussian noise sigma 0.02, replicated across
/// channels.
///
/// The fold (`v -> 1 - |2v - 1|`) makes the intensity response non-monotone
/// in visible luminance, the way infrared reflectance reorders material
/// brightness: mid-tones come out bright, extremes dark. Without it the
/// collapse is a monotone contrast change that modality-agnostic features
/// absorb almost for free, and the cross-modal appearance gap the generator
/// exists to produce never materializes.
fn rgb_to_nir(rgb: &Array3<f64>, rng: &mut impl Rng) -> Array3<f64> {
    let (h, w, _) = rgb.dim();
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for row in 0..h {
        for col in 0..w {
            let lum = luminance([
                rgb[[row, col, 0]],
                rgb[[row, col, 1]],
                rgb[[row, col, 2]],
            ]);
            let remapped = lum.max(0.0).powf(0.6);
            let folded = 1.0 - (2.0 * remapped - 1.0).abs();
            let v = (folded + noise.sample(rng)).clamp(0.0, 1.0);
            out[[row, col, 0]] = v;
            out[[row, col, 1]] = v;
            out[[row, col, 2]] = v;
        }
    }
    out
}

/// Render one full sequence from its recipe. Deterministic in the seed.
pub fn generate_toy_sequence(cfg: &ToySequenceConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size as f64;
    let (hw, hh) = (cfg.target.width / 2.0, cfg.target.height / 2.0);
    let jitter = Normal::new(0.0, cfg.motion.jitter.max(0.0)).expect("valid normal");

    let mut cx = rng.gen_range(hw + 1.0..s - hw - 1.0);
    let mut cy = rng.gen_range(hh + 1.0..s - hh - 1.0);
    let (mut vx, mut vy) = (cfg.motion.vx, cfg.motion.vy);

    let mut frames = Vec::with_capacity(cfg.length);
    let mut modality = Modality::Rgb;
    let mut next_switch = 0usize;

    for t in 0..cfg.length {
        if next_switch < cfg.switch_schedule.len() && cfg.switch_schedule[next_switch] == t {
            modality = modality.other();
            next_switch += 1;
        }

        if t > 0 {
            cx += vx + if cfg.motion.jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
            cy += vy + if cfg.motion.jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
            // Reflect at borders so the box always stays inside the image.
            let (lo_x, hi_x) = (hw, s - hw);
            if cx < lo_x {
                cx = 2.0 * lo_x - cx;
                vx = -vx;
            } else if cx > hi_x {
                cx = 2.0 * hi_x - cx;
                vx = -vx;
            }
            let (lo_y, hi_y) = (hh, s - hh);
            if cy < lo_y {
                cy = 2.0 * lo_y - cy;
                vy = -vy;
            } else if cy > hi_y {
                cy = 2.0 * hi_y - cy;
                vy = -vy;
            }
            cx = cx.clamp(lo_x, hi_x);
            cy = cy.clamp(lo_y, hi_y);
        }

        let scene = SceneState { cx, cy };
        let rgb = render_rgb(cfg, &scene);
        let mut img = match modality {
            Modality::Rgb => rgb,
            Modality::Nir => rgb_to_nir(&rgb, &mut rng),
        };
        if cfg.ma_frames.contains(&t) {
            img.mapv_inplace(|v| (v + 0.5).min(1.0));
        }

        frames.push(FrameRecord {
            image: ImageRef::Memory(Arc::new(ImageBuf::from_float(&img))),
            modality,
            gt: BoundingBox {
                x: cx - hw,
                y: cy - hh,
                w: cfg.target.width,
                h: cfg.target.height,
            },
            visible: true,
        });
    }

    let mut attributes = BTreeSet::new();
    if !cfg.ma_frames.is_empty() {
        attributes.insert(AttributeTag::Ma);
    }

    Ok(Sequence {
        id: cfg.id.clone(),
        frames,
        attributes,
        height: cfg.image_size,
        width: cfg.image_size,
    })
}

/// Render both modality streams of the same scene, producing a
/// co-registered dual-modality fixture with randomized challenge flags.
/// `challenge_seed` draws zero or more IV/TC runs; zero runs exercises the
/// converter's segment-injection path, many runs its discard path.
pub fn generate_dual_fixture(
    cfg: &ToySequenceConfig,
    challenge_seed: u64,
) -> Result<DualModalitySequence> {
    let mut base = cfg.clone();
    base.switch_schedule.clear();
    base.ma_frames.clear();
    base.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let s = base.image_size as f64;
    let (hw, hh) = (base.target.width / 2.0, base.target.height / 2.0);
    let jitter = Normal::new(0.0, base.motion.jitter.max(0.0)).expect("valid normal");

    let mut cx = rng.gen_range(hw + 1.0..s - hw - 1.0);
    let mut cy = rng.gen_range(hh + 1.0..s - hh - 1.0);
    let (mut vx, mut vy) = (base.motion.vx, base.motion.vy);

    let mut frames_a = Vec::with_capacity(base.length);
    let mut frames_b = Vec::with_capacity(base.length);
    let mut gt = Vec::with_capacity(base.length);
    for t in 0..base.length {
        if t > 0 {
            cx += vx + if base.motion.jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
            cy += vy + if base.motion.jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
            let (lo_x, hi_x) = (hw, s - hw);
            if cx < lo_x {
                cx = 2.0 * lo_x - cx;
                vx = -vx;
            } else if cx > hi_x {
                cx = 2.0 * hi_x - cx;
                vx = -vx;
            }
            let (lo_y, hi_y) = (hh, s - hh);
            if cy < lo_y {
                cy = 2.0 * lo_y - cy;
                vy = -vy;
            } else if cy > hi_y {
                cy = 2.0 * hi_y - cy;
                vy = -vy;
            }
            cx = cx.clamp(lo_x, hi_x);
            cy = cy.clamp(lo_y, hi_y);
        }
        let scene = SceneState { cx, cy };
        let rgb = render_rgb(&base, &scene);
        let nir = rgb_to_nir(&rgb, &mut rng);
        frames_a.push(ImageRef::Memory(Arc::new(ImageBuf::from_float(&rgb))));
        frames_b.push(ImageRef::Memory(Arc::new(ImageBuf::from_float(&nir))));
        gt.push(BoundingBox {
            x: cx - hw,
            y: cy - hh,
            w: base.target.width,
            h: base.target.height,
        });
    }

    // Challenge runs: up to three IV runs and two TC runs; possibly none.
    let mut crng = ChaCha8Rng::seed_from_u64(challenge_seed);
    let mut iv = vec![false; base.length];
    let mut tc = vec![false; base.length];
    for flags in [&mut iv, &mut tc] {
        let runs = crng.gen_range(0..=3usize);
        for _ in 0..runs {
            let start = crng.gen_range(0..base.length);
            let span = crng.gen_range(2..=6usize);
            for item in flags.iter_mut().skip(start).take(span) {
                *item = true;
            }
        }
    }

    Ok(DualModalitySequence {
        id: base.id.clone(),
        frames_a,
        frames_b,
        gt,
        iv,
        tc,
        height: base.image_size,
        width: base.image_size,
    })
}

// ---------------------------------------------------------------------------
// Benchmark generation
// ---------------------------------------------------------------------------

/// Knobs for the toy benchmark sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkOptions {
    pub image_size: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Fraction of sequences carrying imaging-adaptation frames.
    pub ma_fraction: f64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            image_size: 96,
            min_length: 80,
            max_length: 300,
            ma_fraction: 0.15,
        }
    }
}

/// Everything needed to regenerate a benchmark bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub master_seed: u64,
    pub options: BenchmarkOptions,
    pub train: Vec<ToySequenceConfig>,
    pub test: Vec<ToySequenceConfig>,
}

/// Draw a diverse sequence recipe. Switch counts skew toward one switch
/// (roughly 6:3:1 for one, two and three switches).
fn sample_config(
    id: String,
    opts: &BenchmarkOptions,
    rng: &mut ChaCha8Rng,
) -> ToySequenceConfig {
    let length = rng.gen_range(opts.min_length..=opts.max_length);
    let n_switches = match rng.gen_range(0.0..1.0) {
        p if p < 0.6 => 1,
        p if p < 0.9 => 2,
        _ => 3,
    };
    // Switch positions sit away from the ends with a minimum gap.
    let mut switches = Vec::new();
    let lo = length / 5;
    let hi = 4 * length / 5;
    let mut attempts = 0;
    while switches.len() < n_switches && attempts < 200 {
        attempts += 1;
        let cand = rng.gen_range(lo..hi);
        if switches.iter().all(|&s: &usize| s.abs_diff(cand) >= 10) {
            switches.push(cand);
        }
    }
    switches.sort_unstable();

    let ma_frames = if rng.gen_range(0.0..1.0) < opts.ma_fraction && !switches.is_empty() {
        let s = switches[rng.gen_range(0..switches.len())];
        let span = rng.gen_range(2..=4usize);
        (0..span).map(|k| s + k).filter(|&m| m < length).collect()
    } else {
        Vec::new()
    };

    // Colorful stripes over a green-tinted background. The two stripe
    // luminances are pushed apart so texture survives the NIR collapse,
    // while the mean target luminance stays close to the background's.
    let bg_a = [
        rng.gen_range(0.15..0.3),
        rng.gen_range(0.45..0.6),
        rng.gen_range(0.25..0.4),
    ];
    let bg_b = [
        rng.gen_range(0.25..0.4),
        rng.gen_range(0.55..0.7),
        rng.gen_range(0.35..0.5),
    ];
    let color_a = [
        rng.gen_range(0.75..0.95),
        rng.gen_range(0.05..0.2),
        rng.gen_range(0.05..0.25),
    ];
    let color_b = [
        rng.gen_range(0.05..0.2),
        rng.gen_range(0.25..0.45),
        rng.gen_range(0.75..0.95),
    ];

    // Target size scales with the image so small debug images stay valid.
    let side = rng.gen_range(0.16..0.23) * opts.image_size as f64;
    let aspect = rng.gen_range(0.85..1.2);
    let speed = rng.gen_range(0.4..1.2);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);

    ToySequenceConfig {
        id,
        length,
        image_size: opts.image_size,
        target: TargetStyle {
            shape: if rng.gen_bool(0.5) { TargetShape::Rect } else { TargetShape::Ellipse },
            width: side * aspect,
            height: side / aspect,
            color_a,
            color_b,
            stripe_period: rng.gen_range(5.0..9.0),
        },
        background: BackgroundStyle {
            color_a: bg_a,
            color_b: bg_b,
            period: rng.gen_range(17.0..29.0),
        },
        motion: MotionSpec {
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            jitter: rng.gen_range(0.1..0.4),
        },
        switch_schedule: switches,
        ma_frames,
        seed: rng.gen(),
    }
}

/// Generate a seeded toy benchmark with the default options.
pub fn generate_toy_benchmark(
    n_train: usize,
    n_test: usize,
    master_seed: u64,
) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    let (train, test, _) =
        generate_toy_benchmark_with(n_train, n_test, master_seed, &BenchmarkOptions::default())?;
    Ok((train, test))
}

/// Generate a seeded toy benchmark, returning the manifest as well.
pub fn generate_toy_benchmark_with(
    n_train: usize,
    n_test: usize,
    master_seed: u64,
    opts: &BenchmarkOptions,
) -> Result<(Vec<Sequence>, Vec<Sequence>, BenchmarkManifest)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config(
            "benchmark needs at least one train and one test sequence".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut train_cfgs = Vec::with_capacity(n_train);
    let mut test_cfgs = Vec::with_capacity(n_test);
    for i in 0..n_train {
        train_cfgs.push(sample_config(format!("train_{i:03}"), opts, &mut rng));
    }
    for i in 0..n_test {
        test_cfgs.push(sample_config(format!("test_{i:03}"), opts, &mut rng));
    }

    let train: Vec<Sequence> = train_cfgs
        .iter()
        .map(generate_toy_sequence)
        .collect::<Result<_>>()?;
    let test: Vec<Sequence> = test_cfgs
        .iter()
        .map(generate_toy_sequence)
        .collect::<Result<_>>()?;

    let manifest = BenchmarkManifest {
        master_seed,
        options: opts.clone(),
        train: train_cfgs,
        test: test_cfgs,
    };
    Ok((train, test, manifest))
}
