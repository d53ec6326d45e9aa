//! Data model for cross-modal sequences: bounding boxes, per-frame modality
//! labels, on-disk ingestion/persistence and dataset statistics.
//!
//! On-disk layout of a sequence directory:
//!
//! ```text
//! <seq>/
//!   img/000001.png      one image per frame (png or jpg), sorted by name
//!   groundtruth.txt     one line per frame: x,y,w,h (continuous pixels)
//!   modality.txt        one line per frame: RGB or NIR
//!   attributes.txt      optional, comma-separated attribute tags
//!   visible.txt         optional, 0/1 per frame
//! ```
//!
//! Boxes use continuous pixel coordinates with a top-left origin; fractional
//! values are allowed. While a target is invisible its ground truth is frozen
//! at the last visible box.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite =
            self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite {
            return Err(Error::Validation(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(format!(
                "box must have positive width and height, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Clip to an image of size `w x h`. In-bounds boxes pass through
    /// bit-identically; a box fully outside the image is an error.
    pub fn clip_to(&self, img_w: f64, img_h: f64) -> Result<Self> {
        if self.x >= 0.0 && self.y >= 0.0 && self.right() <= img_w && self.bottom() <= img_h {
            return Ok(*self);
        }
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(img_w);
        let y1 = self.bottom().min(img_h);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Validation(format!(
                "box {self:?} lies outside a {img_w}x{img_h} image"
            )));
        }
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Imaging modality of a frame. Exactly two values exist; the derived order
/// (RGB < NIR) keeps serialization deterministic.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Modality {
    Rgb,
    Nir,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Rgb => Modality::Nir,
            Modality::Nir => Modality::Rgb,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Rgb => write!(f, "RGB"),
            Modality::Nir => write!(f, "NIR"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "RGB" => Ok(Modality::Rgb),
            "NIR" => Ok(Modality::Nir),
            other => Err(Error::Validation(format!("unknown modality token {other:?}"))),
        }
    }
}

macro_rules! attribute_tags {
    ($($name:ident => $tok:literal),+ $(,)?) => {
        /// Sequence-level challenge attribute. The taxonomy is fixed at
        /// eleven tags.
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        pub enum AttributeTag {
            $(#[serde(rename = $tok)] $name),+
        }

        impl AttributeTag {
            pub const ALL: &'static [AttributeTag] = &[$(AttributeTag::$name),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $(AttributeTag::$name => $tok),+
                }
            }
        }

        impl FromStr for AttributeTag {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($tok => Ok(AttributeTag::$name),)+
                    other => Err(Error::Validation(format!(
                        "unknown attribute tag {other:?}"
                    ))),
                }
            }
        }
    };
}

attribute_tags! {
    Sv => "SV",
    Bc => "BC",
    Arc => "ARC",
    So => "SO",
    Fm => "FM",
    Ipr => "IPR",
    Ov => "OV",
    Po => "PO",
    Ma => "MA",
    Fo => "FO",
    Mb => "MB",
}

impl fmt::Display for AttributeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decoded RGB image held in memory as 8-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB triplets, `3 * width * height` bytes.
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "image buffer of {} bytes does not match {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(ImageBuf {
            height,
            width,
            data,
        })
    }

    /// Quantize a float image in [0,1] (H, W, 3) to 8-bit storage.
    pub fn from_float(img: &Array3<f64>) -> Self {
        let (h, w, c) = img.dim();
        assert_eq!(c, 3, "expected an RGB image");
        let mut data = Vec::with_capacity(h * w * 3);
        for v in img.iter() {
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        ImageBuf {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_float(&self) -> Array3<f64> {
        let mut out = Array3::zeros((self.height, self.width, 3));
        for (o, v) in out.iter_mut().zip(self.data.iter()) {
            *o = *v as f64 / 255.0;
        }
        out
    }
}

/// Reference to a frame image: either a file on disk or an in-memory buffer.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<ImageBuf>),
}

impl ImageRef {
    /// Image dimensions as (height, width) without decoding pixel data
    /// when the image lives on disk.
    pub fn dimensions(&self) -> Result<(usize, usize)> {
        match self {
            ImageRef::Path(p) => {
                let (w, h) = image::image_dimensions(p).map_err(|e| Error::Image {
                    path: p.clone(),
                    msg: e.to_string(),
                })?;
                Ok((h as usize, w as usize))
            }
            ImageRef::Memory(buf) => Ok((buf.height, buf.width)),
        }
    }

    /// Decode to a float array (H, W, 3) with values in [0, 1].
    pub fn load(&self) -> Result<Array3<f64>> {
        match self {
            ImageRef::Path(p) => {
                let img = image::open(p)
                    .map_err(|e| Error::Image {
                        path: p.clone(),
                        msg: e.to_string(),
                    })?
                    .to_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let buf = ImageBuf::new(h, w, img.into_raw())?;
                Ok(buf.to_float())
            }
            ImageRef::Memory(buf) => Ok(buf.to_float()),
        }
    }
}

/// One frame of a sequence.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub image: ImageRef,
    pub modality: Modality,
    pub gt: BoundingBox,
    pub visible: bool,
}

/// An ordered cross-modal sequence with per-frame ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<FrameRecord>,
    pub attributes: BTreeSet<AttributeTag>,
    /// Shared image height and width of every frame.
    pub height: usize,
    pub width: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.frames.iter().map(|f| f.modality)
    }
}

/// Number of frame boundaries at which the modality changes.
///
/// Depends only on the modality labels, never on frame content.
pub fn modality_switch_count(seq: &Sequence) -> usize {
    seq.frames
        .windows(2)
        .filter(|w| w[0].modality != w[1].modality)
        .count()
}

/// Histogram bin for switch counts, mirroring the benchmark's reporting
/// columns {1, 2, 3, >3}. Zero-switch sequences fall outside the bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchBin {
    Once,
    Twice,
    ThreeTimes,
    MoreThanThree,
}

impl SwitchBin {
    pub fn from_count(count: usize) -> Option<SwitchBin> {
        match count {
            0 => None,
            1 => Some(SwitchBin::Once),
            2 => Some(SwitchBin::Twice),
            3 => Some(SwitchBin::ThreeTimes),
            _ => Some(SwitchBin::MoreThanThree),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SwitchBin::Once => "once",
            SwitchBin::Twice => "twice",
            SwitchBin::ThreeTimes => "three",
            SwitchBin::MoreThanThree => "more",
        }
    }
}

/// Switch-count histogram over a set of sequences.
pub fn switch_histogram(seqs: &[Sequence]) -> std::collections::BTreeMap<SwitchBin, usize> {
    let mut hist = std::collections::BTreeMap::new();
    for seq in seqs {
        if let Some(bin) = SwitchBin::from_count(modality_switch_count(seq)) {
            *hist.entry(bin).or_insert(0) += 1;
        }
    }
    hist
}

/// Deterministic 1:2 test:train split. The partition is a pure function of
/// the sequence ids and the seed, independent of input order.
pub fn split_dataset(seqs: Vec<Sequence>, seed: u64) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    if seqs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 sequences to split, got {}",
            seqs.len()
        )));
    }
    let n = seqs.len();
    let n_test = (n as f64 / 3.0).round() as usize;

    let mut sorted = seqs;
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);

    let train = sorted.split_off(n_test);
    let test = sorted;
    Ok((train, test))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_box_line(line: &str, path: &Path, lineno: usize) -> Result<BoundingBox> {
    let parts: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
    if parts.len() != 4 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("expected 4 comma-separated fields, got {}", parts.len()),
        });
    }
    let mut vals = [0.0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p.parse::<f64>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("invalid number {p:?}"),
        })?;
    }
    Ok(BoundingBox {
        x: vals[0],
        y: vals[1],
        w: vals[2],
        h: vals[3],
    })
}

/// Load a sequence directory, logging any validation warnings.
pub fn load_sequence(root: &Path) -> Result<Sequence> {
    let (seq, warnings) = load_sequence_with_warnings(root)?;
    for w in &warnings {
        log::warn!("{}: {w}", root.display());
    }
    Ok(seq)
}

/// Load a sequence directory, returning non-fatal validation warnings
/// alongside the sequence.
pub fn load_sequence_with_warnings(root: &Path) -> Result<(Sequence, Vec<String>)> {
    let img_dir = root.join("img");
    let mut image_paths: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(Error::Structure(format!(
            "no frame images under {}",
            img_dir.display()
        )));
    }

    let gt_path = root.join("groundtruth.txt");
    let gt_lines = read_lines(&gt_path)?;
    let mod_path = root.join("modality.txt");
    let mod_lines = read_lines(&mod_path)?;

    if gt_lines.len() != image_paths.len() || mod_lines.len() != image_paths.len() {
        return Err(Error::Structure(format!(
            "per-frame file length mismatch in {}: {} images, {} ground-truth lines, {} modality lines",
            root.display(),
            image_paths.len(),
            gt_lines.len(),
            mod_lines.len()
        )));
    }

    let vis_path = root.join("visible.txt");
    let visible: Vec<bool> = if vis_path.exists() {
        let lines = read_lines(&vis_path)?;
        if lines.len() != image_paths.len() {
            return Err(Error::Structure(format!(
                "visible.txt has {} lines but there are {} frames",
                lines.len(),
                image_paths.len()
            )));
        }
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| match l.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse {
                    path: vis_path.clone(),
                    line: i + 1,
                    msg: format!("expected 0 or 1, got {other:?}"),
                }),
            })
            .collect::<Result<_>>()?
    } else {
        vec![true; image_paths.len()]
    };

    let attributes: BTreeSet<AttributeTag> = {
        let attr_path = root.join("attributes.txt");
        if attr_path.exists() {
            read_lines(&attr_path)?
                .iter()
                .flat_map(|l| l.split(','))
                .map(|t| t.trim())
                .filter(|t| !t.is_empty())
                .map(AttributeTag::from_str)
                .collect::<Result<_>>()?
        } else {
            BTreeSet::new()
        }
    };

    let first_ref = ImageRef::Path(image_paths[0].clone());
    let (height, width) = first_ref.dimensions()?;

    let mut warnings = Vec::new();
    let mut frames = Vec::with_capacity(image_paths.len());
    let mut prev_box: Option<BoundingBox> = None;
    for (i, img_path) in image_paths.iter().enumerate() {
        let image = ImageRef::Path(img_path.clone());
        let dims = image.dimensions()?;
        if dims != (height, width) {
            return Err(Error::Structure(format!(
                "frame {} has dimensions {:?} but the sequence starts at {:?}",
                i + 1,
                dims,
                (height, width)
            )));
        }

        let raw = parse_box_line(&gt_lines[i], &gt_path, i + 1)?;
        raw.validate()?;
        let vis = visible[i];
        if !vis {
            if let Some(prev) = prev_box {
                if raw != prev {
                    warnings.push(format!(
                        "frame {}: invisible target but box {:?} differs from the frozen box {:?}",
                        i + 1,
                        raw,
                        prev
                    ));
                }
            }
        }
        let gt = raw.clip_to(width as f64, height as f64)?;
        prev_box = Some(raw);

        let modality: Modality = mod_lines[i].parse()?;
        frames.push(FrameRecord {
            image,
            modality,
            gt,
            visible: vis,
        });
    }

    let id = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());

    Ok((
        Sequence {
            id,
            frames,
            attributes,
            height,
            width,
        },
        warnings,
    ))
}

/// Persist a sequence in the on-disk directory format. In-memory frames are
/// encoded as PNG; path-backed frames are copied.
pub fn save_sequence(seq: &Sequence, root: &Path) -> Result<()> {
    let img_dir = root.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut gt = String::new();
    let mut modality = String::new();
    let mut visible = String::new();
    for (i, frame) in seq.frames.iter().enumerate() {
        let dst = img_dir.join(format!("{:06}.png", i + 1));
        match &frame.image {
            ImageRef::Memory(buf) => {
                image::save_buffer(
                    &dst,
                    &buf.data,
                    buf.width as u32,
                    buf.height as u32,
                    image::ColorType::Rgb8,
                )
                .map_err(|e| Error::Image {
                    path: dst.clone(),
                    msg: e.to_string(),
                })?;
            }
            ImageRef::Path(src) => {
                fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
            }
        }
        gt.push_str(&format_box_line(&frame.gt));
        gt.push('\n');
        modality.push_str(&frame.modality.to_string());
        modality.push('\n');
        visible.push_str(if frame.visible { "1" } else { "0" });
        visible.push('\n');
    }

    fs::write(root.join("groundtruth.txt"), gt)
        .map_err(|e| Error::io(root.join("groundtruth.txt"), e))?;
    fs::write(root.join("modality.txt"), modality)
        .map_err(|e| Error::io(root.join("modality.txt"), e))?;
    fs::write(root.join("visible.txt"), visible)
        .map_err(|e| Error::io(root.join("visible.txt"), e))?;
    if !seq.attributes.is_empty() {
        let attrs = seq
            .attributes
            .iter()
            .map(|a| a.as_str())
            .collect::<Vec<_>>()
            .join(",");
        fs::write(root.join("attributes.txt"), attrs + "\n")
            .map_err(|e| Error::io(root.join("attributes.txt"), e))?;
    }
    Ok(())
}

fn format_box_line(b: &BoundingBox) -> String {
    // `{}` prints the shortest decimal that round-trips exactly.
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

/// Write tracker outputs, one `x,y,w,h` line per frame.
pub fn write_results(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::Validation("refusing to write empty results".into()));
    }
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format_box_line(b));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read tracker outputs written by [`write_results`].
pub fn read_results(path: &Path) -> Result<Vec<BoundingBox>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| parse_box_line(line, path, i + 1))
        .collect()
}
