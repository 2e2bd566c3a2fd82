use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Location/scale of a Laplace distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceParams {
    pub mu: f64,
    pub s: f64,
}

impl LaplaceParams {
    pub fn new(mu: f64, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !mu.is_finite() {
            return Err(Error::Domain(format!(
                "Laplace scale must be positive and finite, got mu={mu}, s={s}"
            )));
        }
        Ok(Self { mu, s })
    }
}

/// Inverse CDF of `Laplace(mu, s)` at `p`.
pub fn laplace_quantile(p: f64, params: LaplaceParams) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level {p} outside (0, 1)")));
    }
    let centered = p - 0.5;
    // (1 - 2|p - 0.5|) computed as 2*min(p, 1-p) keeps precision near the tails.
    let tail = 2.0 * p.min(1.0 - p);
    Ok(params.mu - params.s * centered.signum() * tail.ln())
}

pub fn laplace_cdf(x: f64, params: LaplaceParams) -> f64 {
    let z = (x - params.mu) / params.s;
    if z < 0.0 {
        0.5 * z.exp()
    } else {
        1.0 - 0.5 * (-z).exp()
    }
}

/// Maximum-likelihood Laplace fit: the median and the mean absolute
/// deviation from it.
pub fn fit_laplace(values: &[f64]) -> Result<LaplaceParams> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let s = sorted.iter().map(|v| (v - median).abs()).sum::<f64>() / n as f64;
    LaplaceParams::new(median, s)
}

/// Scale estimates for a zero-mean Gaussian observed through its negative half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfNormalEstimate {
    /// `-mean * sqrt(pi/2)`; the primary estimate.
    pub from_mean: f64,
    /// `sqrt(var * pi / (pi - 2))`; kept as a cross-check.
    pub from_variance: f64,
    pub samples: usize,
}

impl HalfNormalEstimate {
    pub fn sigma(&self) -> f64 {
        self.from_mean
    }
}

/// Estimates the scale of `N(0, sigma^2)` from its non-positive draws.
///
/// The negative half of a centered Gaussian is half-normal with mean
/// `-sigma*sqrt(2/pi)` and variance `sigma^2 (1 - 2/pi)`.
pub fn half_normal_sigma(negatives: &[f64]) -> Result<HalfNormalEstimate> {
    if negatives.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if let Some(v) = negatives.iter().find(|v| !(**v <= 0.0)) {
        return Err(Error::Domain(format!(
            "half-normal estimator expects values <= 0, found {v}"
        )));
    }
    let n = negatives.len() as f64;
    let mean = negatives.iter().sum::<f64>() / n;
    let var = negatives.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(HalfNormalEstimate {
        from_mean: -mean * (PI / 2.0).sqrt(),
        from_variance: (var * PI / (PI - 2.0)).sqrt(),
        samples: negatives.len(),
    })
}
