use std::path::PathBuf;

use super::{read_ppm_file, ImageBatch};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Source of binary subject masks.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskProvider {
    /// Ground-truth masks carried by the batch (from the generator).
    Oracle,
    /// Pixels whose channel-mean intensity exceeds the threshold.
    Luminance { threshold: f64 },
    /// One P5 file per sample, `<dir>/mask_<index>.pgm`, with values 0 or 255.
    External { dir: PathBuf },
}

impl MaskProvider {
    /// Masks for every sample as a `B x 1 x H x W` tensor of zeros and ones.
    pub fn masks(&self, batch: &ImageBatch) -> Result<Tensor> {
        let (c, h, w) = batch.geometry();
        let b = batch.len();
        match self {
            MaskProvider::Oracle => batch.masks().cloned().ok_or_else(|| Error::Masking {
                index: 0,
                reason: "batch carries no ground-truth masks".into(),
            }),
            MaskProvider::Luminance { threshold } => {
                let plane = h * w;
                let mut out = Vec::with_capacity(b * plane);
                for i in 0..b {
                    let s = batch.sample(i);
                    for p in 0..plane {
                        let lum = (0..c).map(|ch| s[ch * plane + p]).sum::<f64>() / c as f64;
                        out.push(if lum > *threshold { 1.0 } else { 0.0 });
                    }
                }
                Tensor::from_vec(&[b, 1, h, w], out)
            }
            MaskProvider::External { dir } => {
                let mut out = Vec::with_capacity(b * h * w);
                for i in 0..b {
                    let path = dir.join(format!("mask_{i}.pgm"));
                    let img = read_ppm_file(&path).map_err(|e| Error::Masking {
                        index: i,
                        reason: format!("{}: {e}", path.display()),
                    })?;
                    if img.shape() != [1, h, w] {
                        return Err(Error::Masking {
                            index: i,
                            reason: format!("mask shape {:?}, expected [1, {h}, {w}]", img.shape()),
                        });
                    }
                    for &v in img.data() {
                        if v != 0.0 && v != 1.0 {
                            return Err(Error::Masking {
                                index: i,
                                reason: "mask values must be 0 or 255".into(),
                            });
                        }
                        out.push(v);
                    }
                }
                Tensor::from_vec(&[b, 1, h, w], out)
            }
        }
    }
}

/// Keeps subject pixels and sets everything else to exactly zero.
///
/// The returned batch carries the masks that were applied.
pub fn extract_subject(batch: &ImageBatch, provider: &MaskProvider) -> Result<ImageBatch> {
    let masks = provider.masks(batch)?;
    let (c, h, w) = batch.geometry();
    let plane = h * w;
    let mut images = batch.images().clone();
    for i in 0..batch.len() {
        let m = masks.row(i).to_vec();
        let s = images.row_mut(i);
        for ch in 0..c {
            for (p, &keep) in s[ch * plane..(ch + 1) * plane].iter_mut().zip(&m) {
                if keep == 0.0 {
                    *p = 0.0;
                }
            }
        }
    }
    ImageBatch::new(images, batch.labels().to_vec(), Some(masks))
}
