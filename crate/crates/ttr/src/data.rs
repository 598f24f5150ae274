//! Desk-scale datasets: a synthetic shape-classification generator, IDX and
//! CIFAR binary loaders, and a graded corruption suite standing in for the
//! usual corrupted test sets.

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    TestClean,
    TestShifted { kind: CorruptionKind, severity: u8 },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::DataFormat(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::DataFormat(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Keep only the points at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split.clone(),
            provenance: format!("{} subset[{}]", self.provenance, indices.len()),
        }
    }
}

// ── synthetic shapes ────────────────────────────────────────────────

/// Render classes 0..C as distinct parametric shapes with randomized
/// position, scale, rotation (bounded so square and diamond stay apart) and
/// foreground/background intensity. Anti-aliased by a signed-distance
/// smooth edge.
pub fn generate_synthetic(
    num_classes: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(2..=10).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in [2, 10], got {num_classes}"
        )));
    }
    if image_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be at least 16, got {image_size}"
        )));
    }
    let mut images = Vec::with_capacity(num_classes * n_per_class);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for class in 0..num_classes {
        for i in 0..n_per_class {
            let mut rng = rng::rng(seed, stream::DATA_GEN, (class * n_per_class + i) as u64);
            images.push(render_shape(class, image_size, &mut rng));
            labels.push(class);
        }
    }
    let ds = Dataset {
        images,
        labels,
        num_classes,
        split: Split::Train,
        provenance: format!("synthetic(classes={num_classes}, per_class={n_per_class}, size={image_size}, seed={seed})"),
    };
    ds.validate()?;
    Ok(ds)
}

fn len2(x: f32, y: f32) -> f32 {
    (x * x + y * y).sqrt()
}

fn sd_box(px: f32, py: f32, bx: f32, by: f32) -> f32 {
    let dx = px.abs() - bx;
    let dy = py.abs() - by;
    len2(dx.max(0.0), dy.max(0.0)) + dx.max(dy).min(0.0)
}

fn sd_equilateral_triangle(mut px: f32, mut py: f32, r: f32) -> f32 {
    let k = 3.0f32.sqrt();
    px = px.abs() - r;
    py += r / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * r, 0.0);
    -len2(px, py) * py.signum()
}

/// Signed distance of class `shape` at centered coordinates (px, py).
fn shape_sdf(shape: usize, px: f32, py: f32, r: f32) -> f32 {
    match shape {
        // disk
        0 => len2(px, py) - r,
        // square
        1 => sd_box(px, py, 0.8 * r, 0.8 * r),
        // triangle
        2 => sd_equilateral_triangle(px, py, r),
        // ring
        3 => (len2(px, py) - 0.78 * r).abs() - 0.3 * r,
        // plus
        4 => sd_box(px, py, r, 0.34 * r).min(sd_box(px, py, 0.34 * r, r)),
        // diamond
        5 => (px.abs() + py.abs()) * std::f32::consts::FRAC_1_SQRT_2 - 0.85 * r,
        // horizontal bar
        6 => sd_box(px, py, 1.05 * r, 0.32 * r),
        // four-point star
        7 => (px.abs().sqrt() + py.abs().sqrt()).powi(2) * 0.5 - 0.95 * r,
        // crescent: disk minus offset disk
        8 => (len2(px, py) - r).max(-(len2(px - 0.55 * r, py) - 0.85 * r)),
        // ring with center dot
        9 => ((len2(px, py) - 0.82 * r).abs() - 0.22 * r).min(len2(px, py) - 0.3 * r),
        _ => unreachable!("shape class out of range"),
    }
}

fn render_shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f32;
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let r = rng.gen_range(0.22..0.34) * s;
    let theta = rng.gen_range(-18.0f32..18.0).to_radians();
    let bg = rng.gen_range(0.05..0.35f32);
    let fg = rng.gen_range(0.65..0.95f32);
    let (sin_t, cos_t) = theta.sin_cos();
    let aa = 1.0f32;
    let mut img = Image::constant(1, size, size, bg);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let px = cos_t * dx + sin_t * dy;
            let py = -sin_t * dx + cos_t * dy;
            let sd = shape_sdf(class, px, py, r);
            let coverage = (0.5 - sd / aa).clamp(0.0, 1.0);
            img.set(0, y, x, bg + (fg - bg) * coverage);
        }
    }
    img.clamp_unit();
    img
}

// ── corruptions ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    DefocusBlurApprox,
    Contrast,
    Brightness,
    Pixelate,
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::DefocusBlurApprox => "defocus_blur_approx",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        };
        f.write_str(s)
    }
}

pub const ALL_CORRUPTIONS: [CorruptionKind; 6] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::DefocusBlurApprox,
    CorruptionKind::Contrast,
    CorruptionKind::Brightness,
    CorruptionKind::Pixelate,
];

/// Severity tables, index 0 = severity 1. Each is strictly monotone in its
/// own direction; baseline accuracy on the synthetic set decreases with
/// severity for every kind (pinned by the regression tests below).
pub const GAUSSIAN_SIGMA: [f32; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const SHOT_PEAK: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
pub const BLUR_SIGMA: [f32; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];
pub const CONTRAST_FACTOR: [f32; 5] = [0.75, 0.55, 0.40, 0.30, 0.20];
pub const BRIGHTNESS_DELTA: [f32; 5] = [0.10, 0.18, 0.26, 0.34, 0.44];
pub const PIXELATE_FACTOR: [usize; 5] = [2, 3, 4, 5, 7];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!(
                "corruption severity must be in 1..=5, got {severity}"
            )));
        }
        Ok(CorruptionSpec { kind, severity, seed })
    }
}

/// Apply a corruption to every image; deterministic under the spec seed and
/// clamped to [0, 1]. The output split is tagged as shifted.
pub fn corrupt(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::InvalidArgument(format!(
            "corruption severity must be in 1..=5, got {}",
            spec.severity
        )));
    }
    let level = (spec.severity - 1) as usize;
    let images: Vec<Image> = dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = rng::rng(spec.seed, stream::CORRUPT, i as u64);
            corrupt_image(img, spec.kind, level, &mut rng)
        })
        .collect();
    Ok(Dataset {
        images,
        labels: dataset.labels.clone(),
        num_classes: dataset.num_classes,
        split: Split::TestShifted { kind: spec.kind, severity: spec.severity },
        provenance: format!(
            "{} + {}(severity={}, seed={})",
            dataset.provenance, spec.kind, spec.severity, spec.seed
        ),
    })
}

fn corrupt_image(img: &Image, kind: CorruptionKind, level: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_SIGMA[level];
            for v in &mut out.data {
                let z: f32 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        CorruptionKind::ShotNoise => {
            let peak = SHOT_PEAK[level];
            for v in &mut out.data {
                let lambda = (*v as f64) * peak;
                if lambda > 0.0 {
                    let pois = Poisson::new(lambda).expect("positive lambda");
                    let k: f64 = pois.sample(rng);
                    *v = (k / peak) as f32;
                }
            }
        }
        CorruptionKind::DefocusBlurApprox => {
            out = gaussian_blur(img, BLUR_SIGMA[level]);
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[level];
            let mean = img.data.iter().sum::<f32>() / img.numel() as f32;
            for v in &mut out.data {
                *v = (*v - mean) * f + mean;
            }
        }
        CorruptionKind::Brightness => {
            let d = BRIGHTNESS_DELTA[level];
            for v in &mut out.data {
                *v += d;
            }
        }
        CorruptionKind::Pixelate => {
            out = pixelate(img, PIXELATE_FACTOR[level]);
        }
    }
    out.clamp_unit();
    out
}

/// Separable Gaussian blur with clamp-to-edge borders; kernel normalized to
/// sum 1 so flat regions are unchanged.
fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let h = img.height as isize;
    let w = img.width as isize;
    let mut tmp = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut s = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + ki as isize - radius).clamp(0, w - 1) as usize;
                    s += k * img.get(c, y, xx);
                }
                tmp.set(c, y, x, s);
            }
        }
    }
    let mut out = tmp.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut s = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - radius).clamp(0, h - 1) as usize;
                    s += k * tmp.get(c, yy, x);
                }
                out.set(c, y, x, s);
            }
        }
    }
    out
}

/// Average each f x f block (ragged at the edges) and write it back whole.
fn pixelate(img: &Image, f: usize) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        let mut by = 0;
        while by < img.height {
            let bh = f.min(img.height - by);
            let mut bx = 0;
            while bx < img.width {
                let bw = f.min(img.width - bx);
                let mut s = 0.0;
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        s += img.get(c, y, x);
                    }
                }
                let avg = s / (bh * bw) as f32;
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        out.set(c, y, x, avg);
                    }
                }
                bx += f;
            }
            by += f;
        }
    }
    out
}

// ── IDX format ──────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::DataFormat(format!("truncated IDX file while reading {what}")))?;
    Ok(u32::from_be_bytes(b))
}

/// Single-channel images from an IDX u8 file (magic 0x00000803), pixels
/// scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Vec<Image>> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32_be(&mut f, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut f, "count")? as usize;
    let h = read_u32_be(&mut f, "height")? as usize;
    let w = read_u32_be(&mut f, "width")? as usize;
    let mut buf = vec![0u8; n * h * w];
    f.read_exact(&mut buf)
        .map_err(|_| Error::DataFormat(format!("truncated IDX image file: expected {} pixel bytes", n * h * w)))?;
    Ok(buf
        .chunks_exact(h * w)
        .map(|px| Image {
            channels: 1,
            height: h,
            width: w,
            data: px.iter().map(|&b| b as f32 / 255.0).collect(),
        })
        .collect())
}

/// Labels from an IDX u8 file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32_be(&mut f, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut f, "count")? as usize;
    let mut buf = vec![0u8; n];
    f.read_exact(&mut buf)
        .map_err(|_| Error::DataFormat(format!("truncated IDX label file: expected {n} label bytes")))?;
    Ok(buf.into_iter().map(|b| b as usize).collect())
}

/// Pair IDX image and label files into a dataset, checking counts and
/// label range.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: usize) -> Result<Dataset> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    let ds = Dataset {
        images,
        labels,
        num_classes,
        split: Split::TestClean,
        provenance: format!("idx({}, {})", images_path.display(), labels_path.display()),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_idx_images(path: &Path, images: &[Image]) -> Result<()> {
    let (h, w) = match images.first() {
        Some(img) => (img.height, img.width),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for img in images {
        if img.channels != 1 || img.height != h || img.width != w {
            return Err(Error::InvalidArgument(
                "IDX export requires uniform single-channel images".into(),
            ));
        }
        out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(Error::InvalidArgument(format!("label {l} exceeds IDX u8 range")));
        }
        out.push(l as u8);
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

// ── CIFAR binary format ─────────────────────────────────────────────

const CIFAR_ROW: usize = 1 + 3 * 32 * 32;

/// CIFAR binary rows: 1 label byte then 3072 pixel bytes (3x32x32 planar).
pub fn load_cifar_binary(path: &Path, num_classes: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_ROW != 0 {
        return Err(Error::DataFormat(format!(
            "truncated CIFAR file: {} bytes is not a multiple of {CIFAR_ROW}",
            bytes.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in bytes.chunks_exact(CIFAR_ROW).enumerate() {
        let label = row[0] as usize;
        if label >= num_classes {
            return Err(Error::DataFormat(format!(
                "label byte {label} out of range for {num_classes} classes in record {i}"
            )));
        }
        labels.push(label);
        images.push(Image {
            channels: 3,
            height: 32,
            width: 32,
            data: row[1..].iter().map(|&b| b as f32 / 255.0).collect(),
        });
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        split: Split::TestClean,
        provenance: format!("cifar({})", path.display()),
    })
}
