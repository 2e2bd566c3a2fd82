//! Synthetic victim data with ground-truth subject masks, subject extraction
//! and PPM/PGM image I/O.
//!
//! Every generated image is a textured dark background with one bright
//! geometric subject (a disk or a rectangle). The class label encodes the
//! subject's shape and intensity band, so a classifier has something to learn
//! and a threshold mask has something to find.

mod mask;
mod ppm;

pub use mask::{extract_subject, MaskProvider};
pub use ppm::{read_ppm, read_ppm_file, write_ppm, write_ppm_file};

use crate::error::{Error, Result};
use crate::numeric::{SeededRng, Tensor};

/// Number of classes produced by the generator: {disk, rectangle} x {dim, bright}.
pub const NUM_CLASSES: usize = 4;

/// Upper bound of background intensity.
pub const BACKGROUND_MAX: f64 = 0.35;
/// Lower bound of subject intensity.
pub const SUBJECT_MIN: f64 = 0.45;

/// A batch of `B x C x H x W` images in `[0, 1]` with labels and optional masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    images: Tensor,
    labels: Vec<usize>,
    masks: Option<Tensor>,
}

impl ImageBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, masks: Option<Tensor>) -> Result<Self> {
        let &[b, _, h, w] = images.shape() else {
            return Err(Error::Shape(format!(
                "image batch must be B x C x H x W, got {:?}",
                images.shape()
            )));
        };
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for {} images", labels.len(), b)));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel {v} outside [0, 1]")));
        }
        if let Some(m) = &masks {
            if m.shape() != [b, 1, h, w] {
                return Err(Error::Shape(format!(
                    "mask shape {:?} does not match images {:?}",
                    m.shape(),
                    images.shape()
                )));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Domain("mask entries must be 0 or 1".into()));
            }
        }
        Ok(Self { images, labels, masks })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn masks(&self) -> Option<&Tensor> {
        self.masks.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Flattened length of one sample.
    pub fn sample_len(&self) -> usize {
        self.images.inner_len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Sample `i` as a `C x H x W` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        self.images.slice_leading(i)
    }

    pub fn mask(&self, i: usize) -> Option<&[f64]> {
        self.masks.as_ref().map(|m| m.row(i))
    }

    /// Batch made of the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<ImageBatch> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Shape(format!("sample {i} out of range {}", self.len())));
        }
        let pick = |t: &Tensor| {
            let rows: Vec<Tensor> = indices.iter().map(|&i| t.slice_leading(i)).collect();
            Tensor::stack(&rows)
        };
        Ok(ImageBatch {
            images: pick(&self.images)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            masks: self.masks.as_ref().map(pick).transpose()?,
        })
    }
}

/// Snaps a `[0, 1]` value to the nearest 8-bit level, rounding half up.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// The value an 8-bit image file would store for `v`, mapped back to `[0, 1]`.
pub fn snap_to_8bit(v: f64) -> f64 {
    quantize_u8(v) as f64 / 255.0
}

/// Shape and placement of the generated subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubjectSpec {
    /// Random disk or rectangle; size drawn from `[min_frac, max_frac]` of the
    /// shorter image side (radius for disks, half-extent for rectangles).
    Random { min_frac: f64, max_frac: f64 },
    /// Disk of the given radius (pixels) centred in the image.
    CenteredDisk { radius: f64 },
}

impl Default for SubjectSpec {
    fn default() -> Self {
        SubjectSpec::Random {
            min_frac: 0.12,
            max_frac: 0.42,
        }
    }
}

/// Generates `b` labelled `c x h x w` images with ground-truth subject masks.
pub fn gen_synthetic_batch(
    rng: &mut SeededRng,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    spec: &SubjectSpec,
) -> Result<ImageBatch> {
    if b == 0 || !(c == 1 || c == 3) || h < 8 || w < 8 {
        return Err(Error::Shape(format!(
            "generator needs B >= 1, C in {{1, 3}}, H, W >= 8; got {b}x{c}x{h}x{w}"
        )));
    }
    if let SubjectSpec::Random { min_frac, max_frac } = *spec {
        if !(0.0 < min_frac && min_frac <= max_frac && max_frac <= 0.5) {
            return Err(Error::Domain(format!(
                "subject size range [{min_frac}, {max_frac}] must lie in (0, 0.5]"
            )));
        }
    }
    let plane = h * w;
    let mut images = Vec::with_capacity(b * c * plane);
    let mut masks = Vec::with_capacity(b * plane);
    // Classes are dealt in shuffled blocks so every batch of at least
    // NUM_CLASSES samples contains every class.
    let mut labels = Vec::with_capacity(b + NUM_CLASSES);
    while labels.len() < b {
        labels.extend(rng.sample_indices(NUM_CLASSES, NUM_CLASSES));
    }
    labels.truncate(b);
    for &label in &labels {
        let (disk_shape, bright) = (label / 2 == 0, label % 2 == 1);
        let side = h.min(w) as f64;
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let mask: Vec<bool> = match *spec {
            SubjectSpec::CenteredDisk { radius } => disk(h, w, cy, cx, radius),
            SubjectSpec::Random { min_frac, max_frac } => {
                if disk_shape {
                    let r = side * rng.uniform_range(min_frac, max_frac);
                    let cy = rng.uniform_range(r.min(cy), (h as f64 - r).max(cy));
                    let cx = rng.uniform_range(r.min(cx), (w as f64 - r).max(cx));
                    disk(h, w, cy, cx, r)
                } else {
                    let hy = side * rng.uniform_range(min_frac, max_frac);
                    let hx = side * rng.uniform_range(min_frac, max_frac);
                    let cy = rng.uniform_range(hy.min(cy), (h as f64 - hy).max(cy));
                    let cx = rng.uniform_range(hx.min(cx), (w as f64 - hx).max(cx));
                    rect(h, w, cy, cx, hy, hx)
                }
            }
        };

        let level = if bright {
            rng.uniform_range(0.8, 0.95)
        } else {
            rng.uniform_range(0.5, 0.65)
        };
        let bg_level = rng.uniform_range(0.05, 0.2);
        let (fy, fx) = (rng.uniform_range(0.2, 0.8), rng.uniform_range(0.2, 0.8));
        let (py, px) = (rng.uniform_range(0.0, 6.3), rng.uniform_range(0.0, 6.3));
        let shade = rng.uniform_range(-0.04, 0.04);
        for _ in 0..c {
            let tint = rng.uniform_range(-0.04, 0.04);
            for y in 0..h {
                for x in 0..w {
                    let v = if mask[y * w + x] {
                        let ramp = shade * ((y as f64 - cy) / side + (x as f64 - cx) / side);
                        (level + tint + ramp + 0.02 * rng.uniform_range(-1.0, 1.0))
                            .clamp(SUBJECT_MIN, 1.0)
                    } else {
                        let wave = 0.06 * ((fy * y as f64 + py).sin() * (fx * x as f64 + px).cos());
                        (bg_level + wave + tint + 0.04 * rng.uniform())
                            .clamp(0.0, BACKGROUND_MAX)
                    };
                    images.push(snap_to_8bit(v));
                }
            }
        }
        masks.extend(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }
    ImageBatch::new(
        Tensor::from_vec(&[b, c, h, w], images)?,
        labels,
        Some(Tensor::from_vec(&[b, 1, h, w], masks)?),
    )
}

fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Vec<bool> {
    let mut m = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            m.push(dy * dy + dx * dx <= r * r);
        }
    }
    m
}

fn rect(h: usize, w: usize, cy: f64, cx: f64, hy: f64, hx: f64) -> Vec<bool> {
    let mut m = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            m.push((y as f64 + 0.5 - cy).abs() <= hy && (x as f64 + 0.5 - cx).abs() <= hx);
        }
    }
    m
}
