use crate::error::{Error, Result};
use crate::model::{ObservedGradients, StructureConfig, BIAS, METRIC, WEIGHT};
use crate::numeric::{half_normal_sigma, ChannelStats, Tensor};

/// Noise-scale estimate from the planted zero-gradient positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaEstimate {
    /// Mean-based estimate, the one used downstream.
    pub sigma: f64,
    /// Variance-based estimate, for cross-checking only.
    pub variance_based: f64,
    pub negatives: usize,
}

/// Weight-layer gradient entries fed by the zero output channels of the
/// convolution: columns `[S, 2S)` of every unit.
pub fn zero_position_values(observed: &ObservedGradients, cfg: &StructureConfig) -> Result<Vec<f64>> {
    let g = observed.get(WEIGHT)?;
    let s = cfg.sample_len();
    if g.shape() != [cfg.units, 2 * s] {
        return Err(Error::Shape(format!(
            "weight gradient {:?} does not match structure [{}, {}]",
            g.shape(),
            cfg.units,
            2 * s
        )));
    }
    Ok((0..cfg.units).flat_map(|k| g.row(k)[s..].iter().copied()).collect())
}

/// Half-normal estimate of the noise scale from values that are pure noise.
///
/// All-zero input means no noise was added and yields 0.
pub fn estimate_sigma_from(values: &[f64], min_negatives: usize) -> Result<SigmaEstimate> {
    if values.iter().all(|&v| v == 0.0) {
        return Ok(SigmaEstimate {
            sigma: 0.0,
            variance_based: 0.0,
            negatives: 0,
        });
    }
    let negatives: Vec<f64> = values.iter().copied().filter(|&v| v < 0.0).collect();
    if negatives.is_empty() {
        return Err(Error::Domain("zero-gradient positions hold no negative values".into()));
    }
    if negatives.len() < min_negatives {
        return Err(Error::InsufficientSamples {
            needed: min_negatives,
            got: negatives.len(),
        });
    }
    let est = half_normal_sigma(&negatives)?;
    Ok(SigmaEstimate {
        sigma: est.sigma(),
        variance_based: est.from_variance,
        negatives: negatives.len(),
    })
}

/// Step 1: privacy-parameter extraction.
pub fn estimate_sigma(
    observed: &ObservedGradients,
    cfg: &StructureConfig,
    min_negatives: usize,
) -> Result<SigmaEstimate> {
    estimate_sigma_from(&zero_position_values(observed, cfg)?, min_negatives)
}

/// Step 2: average the `D_b` repeated copies of every bias gradient.
pub fn reconstruct_bias(observed: &ObservedGradients) -> Result<Vec<f64>> {
    let g = observed.get(BIAS)?;
    let &[d, k] = g.shape() else {
        return Err(Error::Shape(format!("bias gradient must be 2-D, got {:?}", g.shape())));
    };
    if d == 0 {
        return Err(Error::Shape("bias gradient has no rows".into()));
    }
    // Offsets from the first copy keep identical copies exact.
    let first = g.row(0).to_vec();
    let mut offset = vec![0.0; k];
    for r in 1..d {
        for ((o, v), f) in offset.iter_mut().zip(g.row(r)).zip(&first) {
            *o += v - f;
        }
    }
    Ok(first.iter().zip(&offset).map(|(f, o)| f + o / d as f64).collect())
}

/// Candidates of step 3, one per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCandidates {
    /// `K x S`, row `k` is the candidate of unit `k + 1`.
    pub images: Tensor,
    /// `false` where the averaged bias gradient was below the division floor.
    pub valid: Vec<bool>,
}

/// Step 3: divide each unit's weight gradient (real channels only) by its
/// averaged bias gradient.
pub fn raw_reconstruct(
    weight_grads: &Tensor,
    bias_hat: &[f64],
    sample_len: usize,
    floor: f64,
) -> Result<RawCandidates> {
    let &[k, d_in] = weight_grads.shape() else {
        return Err(Error::Shape(format!("weight gradient must be 2-D, got {:?}", weight_grads.shape())));
    };
    if bias_hat.len() != k || d_in < sample_len {
        return Err(Error::Shape(format!(
            "{k} units with {d_in} inputs vs {} biases and sample length {sample_len}",
            bias_hat.len()
        )));
    }
    let mut images = Tensor::zeros(&[k, sample_len]);
    let mut valid = vec![false; k];
    for u in 0..k {
        let b = bias_hat[u];
        if b.abs() < floor || b == 0.0 {
            continue;
        }
        valid[u] = true;
        for (o, w) in images.row_mut(u).iter_mut().zip(&weight_grads.row(u)[..sample_len]) {
            *o = w / b;
        }
    }
    Ok(RawCandidates { images, valid })
}

/// One decoded slot of the metric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotMetrics {
    pub slot: usize,
    /// Per-channel statistics, factor weighting undone.
    pub stats: Vec<ChannelStats>,
    /// Decoded `i0 / K` before rounding.
    pub index_value: f64,
    /// Decoded 1-based unit, clamped to `[1, K]`; meaningless unless `present`.
    pub unit: usize,
    pub present: bool,
}

/// Step 4 output.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredMetrics {
    pub slots: Vec<SlotMetrics>,
    /// The recovered metric-layer input vector (one copy).
    pub input: Vec<f64>,
    /// Noise std of every entry of `input`, estimated from the spread of the
    /// repeated copies; `None` with a single copy.
    pub noise: Option<f64>,
    pub warnings: Vec<String>,
}

impl RecoveredMetrics {
    pub fn present(&self) -> impl Iterator<Item = &SlotMetrics> {
        self.slots.iter().filter(|s| s.present)
    }
}

/// Step 4: recover the metric-layer input from its gradients.
///
/// Every copy of the input contributes `delta_q * u_l` to entry `(q, l)`; the
/// copies are averaged, then `u` is solved in least squares across units
/// against the known last entry, which equals the index factor.
///
/// A slot is present when its entries carry more energy than noise alone
/// would plausibly produce. With a single copy the noise is unknown and a
/// slot is present when its index decodes to a unit.
pub fn reconstruct_metrics(observed: &ObservedGradients, cfg: &StructureConfig) -> Result<RecoveredMetrics> {
    let g = observed.get(METRIC)?;
    let len = cfg.metric_input_len();
    if g.shape() != [cfg.metric_units, cfg.bias_inputs * len] {
        return Err(Error::Shape(format!(
            "metric gradient {:?} does not match structure [{}, {}]",
            g.shape(),
            cfg.metric_units,
            cfg.bias_inputs * len
        )));
    }
    let mut avg = vec![0.0; cfg.metric_units * len];
    for q in 0..cfg.metric_units {
        let row = g.row(q);
        let dst = &mut avg[q * len..(q + 1) * len];
        for d in 0..cfg.bias_inputs {
            for (o, v) in dst.iter_mut().zip(&row[d * len..(d + 1) * len]) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= cfg.bias_inputs as f64);
    }
    let r = len - 1;
    let denom: f64 = (0..cfg.metric_units).map(|q| avg[q * len + r].powi(2)).sum();
    if !(denom > 0.0) {
        return Err(Error::Domain("metric layer gradients carry no signal".into()));
    }
    let copies = cfg.bias_inputs;
    let noise = (copies > 1).then(|| {
        let mut sq = 0.0;
        for q in 0..cfg.metric_units {
            let row = g.row(q);
            let mean = &avg[q * len..(q + 1) * len];
            for d in 0..copies {
                sq += row[d * len..(d + 1) * len].iter().zip(mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
            }
        }
        let per_copy = sq / (cfg.metric_units * len * (copies - 1)) as f64;
        cfg.metric_factors.index * (per_copy / copies as f64 / denom).sqrt()
    });
    let reference = cfg.metric_factors.index;
    let input: Vec<f64> = (0..len)
        .map(|l| {
            reference * (0..cfg.metric_units).map(|q| avg[q * len + l] * avg[q * len + r]).sum::<f64>() / denom
        })
        .collect();

    let c = cfg.channels;
    let per = 3 * c;
    let factors = cfg.metric_factors.as_array();
    let mut warnings = Vec::new();
    let mut slots = Vec::with_capacity(cfg.metric_slots);
    for s in 0..cfg.metric_slots {
        let stats = (0..c)
            .map(|ch| {
                let v = |t: usize| {
                    let f = factors[t];
                    if f == 0.0 {
                        0.0
                    } else {
                        input[s * per + ch * 3 + t] / f
                    }
                };
                ChannelStats {
                    mean: v(0),
                    variance: v(1),
                    tv: v(2),
                }
            })
            .collect();
        let index_value = input[cfg.metric_slots * per + s] / cfg.metric_factors.index;
        let scaled = (index_value * cfg.units as f64).round();
        let entries = input[s * per..(s + 1) * per].iter().chain([&input[cfg.metric_slots * per + s]]);
        let present = match noise {
            None => scaled >= 1.0,
            Some(0.0) => entries.into_iter().any(|&v| v != 0.0),
            Some(n) => {
                let dof = (per + 1) as f64;
                entries.map(|v| (v / n).powi(2)).sum::<f64>() > dof + 8.0 * (2.0 * dof).sqrt()
            }
        };
        let unit = if scaled > cfg.units as f64 {
            warnings.push(format!("slot {s}: decoded unit {scaled} beyond {}, clamped", cfg.units));
            cfg.units
        } else {
            scaled.max(1.0) as usize
        };
        slots.push(SlotMetrics {
            slot: s,
            stats,
            index_value,
            unit,
            present,
        });
    }
    Ok(RecoveredMetrics {
        slots,
        input,
        noise,
        warnings,
    })
}

/// Units whose real-channel weight gradient carries more energy than noise
/// alone would plausibly produce, or whose averaged bias gradient (noise std
/// `sigma_hat / sqrt(copies)`) stands clear of zero.
pub fn active_units(
    weight_grads: &Tensor,
    bias_hat: &[f64],
    copies: usize,
    sample_len: usize,
    sigma_hat: f64,
) -> Vec<bool> {
    let n = sample_len as f64;
    let threshold = n * sigma_hat * sigma_hat + 8.0 * sigma_hat * sigma_hat * (2.0 * n).sqrt();
    let bias_threshold = 5.0 * sigma_hat / (copies.max(1) as f64).sqrt();
    (0..weight_grads.shape()[0])
        .map(|k| {
            let e: f64 = weight_grads.row(k)[..sample_len].iter().map(|v| v * v).sum();
            e > threshold || bias_hat[k].abs() > bias_threshold
        })
        .collect()
}

/// Unit chosen for one present metric slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// An active unit near the decoded value.
    Active(usize),
    /// No active unit was free nearby; the rounded decoded value.
    Decoded(usize),
    /// No active unit nearby and too close to zero to rule out an empty slot.
    Dropped,
}

impl Assignment {
    pub fn unit(self) -> Option<usize> {
        match self {
            Assignment::Active(u) | Assignment::Decoded(u) => Some(u),
            Assignment::Dropped => None,
        }
    }
}

/// Decoded values closer than this to an owned active unit share it.
const SHARE_DISTANCE: f64 = 1.0;
/// Smallest decoded value kept without an active unit nearby.
const MIN_UNSUPPORTED: f64 = 2.5;

/// [`assign_units_by`] with the squared index distance as cost.
pub fn assign_units(values: &[f64], active: &[bool], radius: f64) -> Vec<Assignment> {
    assign_units_by(values, active, radius, |i, u| (u as f64 - values[i]).powi(2), 1.0)
}

/// Matches decoded continuous unit values (1-based) to active units.
///
/// `cost(slot, unit)` scores a pairing, lower is better. Pairs cheaper than
/// `confident` are matched first, each active unit going to one slot; then
/// the cheapest pairs within index distance one; remaining slots share an
/// owned unit within distance one, then take the cheapest free active unit
/// within `radius`, and otherwise keep their rounded value.
pub fn assign_units_by(
    values: &[f64],
    active: &[bool],
    radius: f64,
    cost: impl Fn(usize, usize) -> f64,
    confident: f64,
) -> Vec<Assignment> {
    let k = active.len();
    // (cost, index distance, slot, unit)
    let mut pairs: Vec<(f64, f64, usize, usize)> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let lo = (v - radius).ceil().max(1.0) as usize;
        let hi = ((v + radius).floor().max(0.0) as usize).min(k);
        for u in lo..=hi {
            if active[u - 1] {
                pairs.push((cost(i, u), (u as f64 - v).abs(), i, u));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
    let mut out = vec![None; values.len()];
    let mut owned = vec![false; k];
    let exclusive = |out: &mut Vec<Option<Assignment>>, owned: &mut Vec<bool>, keep: &dyn Fn(f64, f64) -> bool| {
        for &(c, d, i, u) in &pairs {
            if keep(c, d) && out[i].is_none() && !owned[u - 1] {
                out[i] = Some(Assignment::Active(u));
                owned[u - 1] = true;
            }
        }
    };
    exclusive(&mut out, &mut owned, &|c, d| c <= confident && d <= radius);
    exclusive(&mut out, &mut owned, &|_, d| d <= SHARE_DISTANCE);
    let mut nearest: Vec<_> = pairs.iter().filter(|p| p.1 <= SHARE_DISTANCE).collect();
    nearest.sort_by(|a, b| a.1.total_cmp(&b.1));
    for &&(_, _, i, u) in &nearest {
        if out[i].is_none() && owned[u - 1] {
            out[i] = Some(Assignment::Active(u));
        }
    }
    exclusive(&mut out, &mut owned, &|_, _| true);
    out.into_iter()
        .zip(values)
        .map(|(a, &v)| {
            a.unwrap_or(if v >= MIN_UNSUPPORTED {
                Assignment::Decoded((v.round() as usize).clamp(1, k))
            } else {
                Assignment::Dropped
            })
        })
        .collect()
}

/// Per-channel mean and variance of the real-channel part of a candidate.
fn mean_variance(candidate: &[f64], channels: usize) -> Vec<(f64, f64)> {
    let plane = candidate.len() / channels;
    candidate
        .chunks(plane)
        .map(|p| {
            let m = p.iter().sum::<f64>() / plane as f64;
            (m, p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane as f64)
        })
        .collect()
}

/// Matching cost of a metric slot against a unit's raw candidate: squared
/// standardized gaps of the index and of every channel mean and variance.
///
/// The candidate carries pixel noise of std `sigma_hat / |bias|`, which
/// inflates its variance; `entry_noise` is the noise std of the recovered
/// metric-layer input.
pub fn slot_cost(
    slot: &SlotMetrics,
    unit: usize,
    candidate: &[f64],
    bias: f64,
    sigma_hat: f64,
    entry_noise: f64,
    cfg: &StructureConfig,
) -> f64 {
    let f = &cfg.metric_factors;
    let units = cfg.units;
    let index_sd = entry_noise * units as f64 / f.index;
    let mut cost = ((unit as f64 - slot.index_value * units as f64) / index_sd).powi(2);
    let n = (candidate.len() / cfg.channels) as f64;
    let pixel_var = (sigma_hat / bias).powi(2);
    for ((m, v), t) in mean_variance(candidate, cfg.channels).into_iter().zip(&slot.stats) {
        let var_x = t.variance.max(0.0);
        let mean_sd2 = pixel_var / n + (entry_noise / f.mean).powi(2);
        let var_sd2 = 2.0 * pixel_var * pixel_var / n + 4.0 * var_x * pixel_var / n + (entry_noise / f.variance).powi(2);
        cost += (m - t.mean).powi(2) / mean_sd2 + (v - var_x - pixel_var).powi(2) / var_sd2;
    }
    cost
}

/// A candidate paired with its sample's recovered metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub slot: usize,
    pub unit: usize,
    pub image: Vec<f64>,
    pub stats: Vec<ChannelStats>,
    /// Another sample decoded to the same unit.
    pub overlapped: bool,
    /// The unit's bias gradient cleared the division floor.
    pub valid: bool,
}

/// Steps 5 and 6: keep only the candidates at recovered reverse units and
/// pair each with its metrics, in sample order.
pub fn align_and_filter(raw: &RawCandidates, metrics: &RecoveredMetrics, units: &[usize]) -> Result<Vec<AlignedSample>> {
    let present: Vec<&SlotMetrics> = metrics.present().collect();
    if present.len() != units.len() {
        return Err(Error::Shape(format!(
            "{} units for {} present metric slots",
            units.len(),
            present.len()
        )));
    }
    let k = raw.valid.len();
    if let Some(&u) = units.iter().find(|&&u| u == 0 || u > k) {
        return Err(Error::Domain(format!("unit {u} outside [1, {k}]")));
    }
    Ok(present
        .iter()
        .zip(units)
        .map(|(slot, &unit)| AlignedSample {
            slot: slot.slot,
            unit,
            image: raw.images.row(unit - 1).to_vec(),
            stats: slot.stats.clone(),
            overlapped: units.iter().filter(|&&v| v == unit).count() > 1,
            valid: raw.valid[unit - 1],
        })
        .collect())
}

/// Step 8: zero pixels whose numerator `|p| * |b|` lies inside the scaled
/// noise interval `z * sigma_hat * sqrt(2)`. Returns the image and whether
/// every pixel ended up zero.
pub fn noise_filter(image: &[f64], sigma_hat: f64, bias_hat: f64, z: f64) -> (Vec<f64>, bool) {
    let threshold = z * sigma_hat * std::f64::consts::SQRT_2;
    let out: Vec<f64> = image
        .iter()
        .map(|&p| if (p * bias_hat).abs() <= threshold { 0.0 } else { p })
        .collect();
    let degenerate = out.iter().all(|&v| v == 0.0);
    (out, degenerate)
}
