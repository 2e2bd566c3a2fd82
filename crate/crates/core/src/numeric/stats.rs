use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Per-channel mean, population variance and anisotropic total variation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub variance: f64,
    pub tv: f64,
}

/// Statistics of every channel of a `C x H x W` image.
///
/// TV is the L1 norm of forward differences along both axes, without
/// wrap-around.
pub fn channel_stats(image: &Tensor) -> Result<Vec<ChannelStats>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "channel_stats expects C x H x W, got {:?}",
            image.shape()
        )));
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    Ok((0..c)
        .map(|ch| plane_stats(&image.data()[ch * h * w..(ch + 1) * h * w], h, w))
        .collect())
}

pub(crate) fn plane_stats(plane: &[f64], h: usize, w: usize) -> ChannelStats {
    let n = (h * w) as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let variance = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ChannelStats {
        mean,
        variance,
        tv: plane_tv(plane, h, w),
    }
}

pub(crate) fn plane_tv(plane: &[f64], h: usize, w: usize) -> f64 {
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            tv += (plane[y * w + x + 1] - plane[y * w + x]).abs();
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            tv += (plane[(y + 1) * w + x] - plane[y * w + x]).abs();
        }
    }
    tv
}

/// Euclidean norm of a single tensor.
pub fn l2_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Joint Euclidean norm of several tensors, as if flattened and concatenated.
pub fn l2_norm_all<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    tensors
        .into_iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
