use crate::error::{Error, Result};
use crate::data::ImageBatch;
use crate::numeric::{fit_laplace, laplace_quantile, LaplaceParams, Tensor};

/// Input-side weighting of the three per-channel statistics and of the
/// reverse-index entries fed to the metric layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricFactors {
    pub mean: f64,
    pub variance: f64,
    pub tv: f64,
    pub index: f64,
}

impl Default for MetricFactors {
    fn default() -> Self {
        Self {
            mean: 1.0,
            variance: 10.0,
            tv: 1e-3,
            index: 10.0,
        }
    }
}

impl MetricFactors {
    pub fn as_array(&self) -> [f64; 3] {
        [self.mean, self.variance, self.tv]
    }
}

/// Everything needed to build the malicious prefix for one image geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `K`, units of the weight layer.
    pub units: usize,
    /// Shared value of every weight-layer entry.
    pub w0: f64,
    /// `D_b`, input size of the bias layer (number of bias-gradient copies).
    pub bias_inputs: usize,
    pub laplace: LaplaceParams,
    /// `N_m`, output units of the metric layer.
    pub metric_units: usize,
    pub metric_factors: MetricFactors,
    /// Scale of the metric-layer output relative to the separation output.
    pub metric_gain: f64,
    /// Number of per-sample slots reserved in the metric-layer input.
    pub metric_slots: usize,
}

impl StructureConfig {
    /// Flattened sample size `C*H*W`.
    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Weight-layer input size: the convolution doubles the channels.
    pub fn weight_inputs(&self) -> usize {
        2 * self.sample_len()
    }

    /// Length of one copy of the metric-layer input vector.
    pub fn metric_input_len(&self) -> usize {
        self.metric_slots * (3 * self.channels + 1) + 1
    }
}

/// The malicious prefix: zero-gradient convolution, equal-row weight layer,
/// Laplace-quantile bias layer and metric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceStructure {
    config: StructureConfig,
    /// `2C x C` 1x1 kernel; identity on the first `C` outputs, zero after.
    pub conv: Tensor,
    /// `K x 2S`.
    pub weight: Tensor,
    /// `D_b x K`, fed a vector of ones.
    pub bias: Tensor,
    /// `N_m x (D_b * L)` where `L` is [`StructureConfig::metric_input_len`].
    pub metric: Tensor,
}

/// Quantile level used for unit `k` (1-based). The last unit uses `K/(K+1)`
/// because the quantile diverges at 1.
pub fn unit_level(k: usize, units: usize) -> f64 {
    if k == units {
        units as f64 / (units as f64 + 1.0)
    } else {
        k as f64 / units as f64
    }
}

/// Fits the per-copy bias distribution to public samples, so that the
/// effective quantiles `D_b * F^{-1}(k/K)` follow `w0 * sum(x)` of masked data.
pub fn calibrate_laplace(public_masked: &ImageBatch, w0: f64, bias_inputs: usize) -> Result<LaplaceParams> {
    if bias_inputs == 0 {
        return Err(Error::Domain("bias inputs must be positive".into()));
    }
    let d = bias_inputs as f64;
    let sums: Vec<f64> = (0..public_masked.len())
        .map(|i| w0 * public_masked.sample(i).iter().sum::<f64>() / d)
        .collect();
    fit_laplace(&sums)
}

/// Builds the structure with its documented initial parameters.
pub fn build_structure(cfg: &StructureConfig) -> Result<InferenceStructure> {
    if cfg.units < 2 {
        return Err(Error::Domain(format!("need at least 2 units, got {}", cfg.units)));
    }
    if cfg.bias_inputs == 0 || cfg.metric_units == 0 || cfg.metric_slots == 0 {
        return Err(Error::Domain(
            "bias inputs, metric units and metric slots must be positive".into(),
        ));
    }
    if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Shape("empty sample geometry".into()));
    }
    if !(cfg.metric_factors.index > 0.0 && cfg.metric_factors.index.is_finite()) {
        return Err(Error::Domain(format!(
            "index factor must be positive, got {}",
            cfg.metric_factors.index
        )));
    }
    if !cfg.w0.is_finite() || !cfg.metric_gain.is_finite() {
        return Err(Error::Domain("non-finite structure coefficient".into()));
    }
    let laplace = LaplaceParams::new(cfg.laplace.mu, cfg.laplace.s)?;
    let c = cfg.channels;
    let mut conv = Tensor::zeros(&[2 * c, c]);
    for ch in 0..c {
        conv.data_mut()[ch * c + ch] = 1.0;
    }
    let weight = Tensor::full(&[cfg.units, cfg.weight_inputs()], cfg.w0);
    let column: Vec<f64> = (1..=cfg.units)
        .map(|k| laplace_quantile(unit_level(k, cfg.units), laplace).map(|q| -q))
        .collect::<Result<_>>()?;
    if column.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::Domain("bias construction is not strictly decreasing".into()));
    }
    let mut bias = Tensor::zeros(&[cfg.bias_inputs, cfg.units]);
    for d in 0..cfg.bias_inputs {
        bias.row_mut(d).copy_from_slice(&column);
    }
    let metric = Tensor::zeros(&[cfg.metric_units, cfg.bias_inputs * cfg.metric_input_len()]);
    Ok(InferenceStructure {
        config: cfg.clone(),
        conv,
        weight,
        bias,
        metric,
    })
}

/// Result of routing one sample through the separation layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReverseIndex {
    /// 1-based unit carrying the sample's gradients.
    pub unit: usize,
    /// No activation was positive; the sample was routed to unit 1.
    pub degenerate: bool,
}

impl InferenceStructure {
    pub fn config(&self) -> &StructureConfig {
        &self.config
    }

    pub fn units(&self) -> usize {
        self.config.units
    }

    /// Bias-layer output per unit, `D_b * b_{1,k}` for the built structure.
    pub fn effective_biases(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.config.units];
        for d in 0..self.config.bias_inputs {
            for (o, b) in out.iter_mut().zip(self.bias.row(d)) {
                *o += b;
            }
        }
        out
    }

    /// Separation-layer pre-activations of a masked sample, in closed form
    /// `w0 * sum(x) + D_b * b_{1,k}`.
    pub fn activations(&self, masked_sample: &[f64]) -> Vec<f64> {
        let lin = self.config.w0 * masked_sample.iter().sum::<f64>();
        let d = self.config.bias_inputs as f64;
        self.bias.row(0).iter().map(|b| lin + d * b).collect()
    }

    /// Reverse unit of a masked sample under the built parameters.
    pub fn reverse_index(&self, masked_sample: &[f64]) -> ReverseIndex {
        reverse_index_from_activations(&self.activations(masked_sample))
    }

    /// Named parameter tensors in bundle order.
    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            (CONV, &self.conv),
            (WEIGHT, &self.weight),
            (BIAS, &self.bias),
            (METRIC, &self.metric),
        ]
    }

    /// Rebuilds a structure from a config and explicit parameter tensors.
    pub fn from_parts(
        config: StructureConfig,
        conv: Tensor,
        weight: Tensor,
        bias: Tensor,
        metric: Tensor,
    ) -> Result<Self> {
        let built = build_structure(&config)?;
        for (name, got, want) in [
            (CONV, &conv, &built.conv),
            (WEIGHT, &weight, &built.weight),
            (BIAS, &bias, &built.bias),
            (METRIC, &metric, &built.metric),
        ] {
            if got.shape() != want.shape() {
                return Err(Error::Shape(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self {
            config,
            conv,
            weight,
            bias,
            metric,
        })
    }
}

pub const CONV: &str = "conv";
pub const WEIGHT: &str = "weight";
pub const BIAS: &str = "bias";
pub const METRIC: &str = "metric";

/// The unit holding the minimal positive activation, by linear scan.
///
/// For strictly decreasing activations this is the last positive one. When no
/// activation is positive the sample is routed to unit 1 and flagged.
pub fn reverse_index_from_activations(acts: &[f64]) -> ReverseIndex {
    let mut best: Option<usize> = None;
    for (k, &a) in acts.iter().enumerate() {
        if a > 0.0 && best.is_none_or(|b| a <= acts[b]) {
            best = Some(k);
        }
    }
    match best {
        Some(k) => ReverseIndex {
            unit: k + 1,
            degenerate: false,
        },
        None => ReverseIndex {
            unit: 1,
            degenerate: true,
        },
    }
}
