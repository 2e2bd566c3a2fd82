use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::numeric::{channel_stats, ChannelStats};

use super::MetricFactors;

/// Per-sample statistics and normalized reverse indices of one batch.
///
/// Layout, row-major: a `B x C x 3` block of (mean, variance, TV) followed by
/// `B` entries `i0 / K`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    batch: usize,
    channels: usize,
    data: Vec<f64>,
}

impl MetricMatrix {
    pub fn from_parts(batch: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * (3 * channels + 1) {
            return Err(Error::Shape(format!(
                "metric matrix of {batch} samples x {channels} channels needs {} entries, got {}",
                batch * (3 * channels + 1),
                data.len()
            )));
        }
        Ok(Self { batch, channels, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The `B x C x 3` statistics portion.
    pub fn metrics(&self) -> &[f64] {
        &self.data[..self.batch * 3 * self.channels]
    }

    /// The `B` normalized reverse indices.
    pub fn indices(&self) -> &[f64] {
        &self.data[self.batch * 3 * self.channels..]
    }

    pub fn stats(&self, sample: usize, channel: usize) -> ChannelStats {
        let o = (sample * self.channels + channel) * 3;
        ChannelStats {
            mean: self.data[o],
            variance: self.data[o + 1],
            tv: self.data[o + 2],
        }
    }

    /// Per-channel statistics of one sample.
    pub fn sample_stats(&self, sample: usize) -> Vec<ChannelStats> {
        (0..self.channels).map(|c| self.stats(sample, c)).collect()
    }

    /// Metric-layer input: factor-weighted statistics padded to `slots`
    /// samples, then `slots` weighted index entries, then a reference entry
    /// equal to the index factor.
    pub fn layer_input(&self, factors: &MetricFactors, slots: usize) -> Result<Vec<f64>> {
        if self.batch > slots {
            return Err(Error::Shape(format!(
                "batch of {} exceeds {slots} metric slots",
                self.batch
            )));
        }
        let per = 3 * self.channels;
        let f = factors.as_array();
        let mut u = vec![0.0; slots * (per + 1) + 1];
        for (j, v) in self.metrics().iter().enumerate() {
            u[j] = v * f[j % 3];
        }
        for (o, v) in u[slots * per..slots * per + self.batch].iter_mut().zip(self.indices()) {
            *o = v * factors.index;
        }
        u[slots * (per + 1)] = factors.index;
        Ok(u)
    }
}

/// Builds the metric matrix of a masked batch given 1-based reverse units.
pub fn metric_matrix(masked: &ImageBatch, reverse_units: &[usize], units: usize) -> Result<MetricMatrix> {
    let b = masked.len();
    if reverse_units.len() != b {
        return Err(Error::Shape(format!("{} reverse indices for {b} samples", reverse_units.len())));
    }
    if let Some(&u) = reverse_units.iter().find(|&&u| u == 0 || u > units) {
        return Err(Error::Domain(format!("reverse unit {u} outside [1, {units}]")));
    }
    let (c, _, _) = masked.geometry();
    let mut data = Vec::with_capacity(b * (3 * c + 1));
    for i in 0..b {
        for s in channel_stats(&masked.image(i))? {
            data.extend([s.mean, s.variance, s.tv]);
        }
    }
    data.extend(reverse_units.iter().map(|&u| u as f64 / units as f64));
    MetricMatrix::from_parts(b, c, data)
}
