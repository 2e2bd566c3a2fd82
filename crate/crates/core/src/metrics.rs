//! Reconstruction quality and attack-effect measurements.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::Shape("empty images".into()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / mse)` for a peak value of 1, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Mean structural similarity of two `C x H x W` images over all 8x8 windows
/// (stride 1) of every channel, dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let &[c, h, w] = a.shape() else {
        return Err(Error::Shape(format!("expected C x H x W, got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least 8x8 pixels, got {h}x{w}")));
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let (pa, pb) = (&a.data()[ch * plane..(ch + 1) * plane], &b.data()[ch * plane..(ch + 1) * plane]);
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        sa += pa[y * w + x];
                        sb += pb[y * w + x];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (da, db) = (pa[y * w + x] - ma, pb[y * w + x] - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Quality of one reconstruction against its (masked) ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub mse: f64,
    pub psnr: f64,
    /// Clamped to `[0, 1]`.
    pub ssim: f64,
}

pub fn quality(reconstruction: &Tensor, truth: &Tensor) -> Result<Quality> {
    let m = mse(reconstruction, truth)?;
    Ok(Quality {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim(reconstruction, truth)?.clamp(0.0, 1.0),
    })
}

/// Per-sample qualities and both averaging orders of PSNR.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub per_sample: Vec<Quality>,
    pub mean_mse: f64,
    /// Mean of per-sample PSNR values.
    pub mean_psnr: f64,
    /// PSNR of the mean MSE.
    pub psnr_of_mean_mse: f64,
    pub mean_ssim: f64,
}

impl QualityReport {
    pub fn new(per_sample: Vec<Quality>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let n = per_sample.len() as f64;
        let mean_mse = per_sample.iter().map(|q| q.mse).sum::<f64>() / n;
        Ok(Self {
            mean_mse,
            mean_psnr: per_sample.iter().map(|q| q.psnr).sum::<f64>() / n,
            psnr_of_mean_mse: psnr_from_mse(mean_mse),
            mean_ssim: per_sample.iter().map(|q| q.ssim).sum::<f64>() / n,
            per_sample,
        })
    }
}

/// Fraction of samples, over all trials, that were not flagged overlapped.
pub fn separation_ratio(overlapped_per_trial: &[Vec<bool>]) -> Result<f64> {
    let total: usize = overlapped_per_trial.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let separated: usize = overlapped_per_trial
        .iter()
        .map(|t| t.iter().filter(|&&o| !o).count())
        .sum();
    Ok(separated as f64 / total as f64)
}

/// Overlap flags of a batch given each sample's unit: a sample is overlapped
/// when another sample shares its unit.
pub fn overlap_flags(units: &[usize]) -> Vec<bool> {
    units
        .iter()
        .map(|u| units.iter().filter(|v| *v == u).count() > 1)
        .collect()
}

/// Lower edges of the gradient-difference bins; the first bin is open below.
pub const DIFF_BIN_EDGES: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
pub const DIFF_BIN_LABELS: [&str; 6] = [
    "(-inf,1e-6)",
    "[1e-6,1e-5)",
    "[1e-5,1e-4)",
    "[1e-4,1e-3)",
    "[1e-3,1e-2)",
    "[1e-2,inf)",
];

/// Histogram of per-entry absolute differences between two aggregated
/// gradients, accumulated over any number of comparisons.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiffHistogram {
    pub counts: [u64; 6],
}

impl DiffHistogram {
    pub fn add(&mut self, with_attack: &[(String, Tensor)], without: &[(String, Tensor)]) -> Result<()> {
        if with_attack.len() != without.len() {
            return Err(Error::Shape("gradient layouts differ in length".into()));
        }
        for ((na, a), (nb, b)) in with_attack.iter().zip(without) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::Shape(format!("layout mismatch at {na:?} vs {nb:?}")));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                let d = (x - y).abs();
                let bin = DIFF_BIN_EDGES.iter().take_while(|&&e| d >= e).count();
                self.counts[bin] += 1;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn proportions(&self) -> [f64; 6] {
        let t = self.total().max(1) as f64;
        self.counts.map(|c| c as f64 / t)
    }
}

/// Bin proportions for one pair of aggregated gradients.
pub fn gradient_diff_proportions(
    with_attack: &[(String, Tensor)],
    without: &[(String, Tensor)],
) -> Result<[f64; 6]> {
    let mut h = DiffHistogram::default();
    h.add(with_attack, without)?;
    Ok(h.proportions())
}
