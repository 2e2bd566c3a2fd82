//! Server-side reconstruction of a victim's training samples from one round
//! of protected gradients.
//!
//! [`run_attack`] chains the eight steps: noise-scale extraction, bias
//! averaging, raw reconstruction, metric recovery, alignment, filtering of
//! meaningless candidates, metric-matching refinement and noise filtering.
//! [`primary_attack`] is the plain fully-connected baseline.

mod steps;

pub use steps::{
    active_units, align_and_filter, estimate_sigma, estimate_sigma_from, noise_filter, raw_reconstruct,
    reconstruct_bias, reconstruct_metrics, assign_units, assign_units_by, slot_cost, zero_position_values, AlignedSample,
    Assignment, RawCandidates, RecoveredMetrics, SigmaEstimate, SlotMetrics,
};

use crate::data::{snap_to_8bit, ImageBatch};
use crate::error::{Error, Result};
use crate::metrics::{quality, Quality};
use crate::model::{ObservedGradients, StructureConfig, WEIGHT};
use crate::numeric::{ChannelStats, Tensor};
use crate::optimize::{descend, ObjectiveWeights};

/// Attacker-side settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Confidence multiplier of the noise filter.
    pub z: f64,
    /// Averaged bias gradients below this magnitude are not divided by.
    pub division_floor: f64,
    /// Fewest negative zero-position entries accepted for noise estimation.
    pub min_negatives: usize,
    /// How far a decoded unit may be moved onto an active unit.
    pub snap_radius: usize,
    pub objective: ObjectiveWeights,
    /// Snap final images to the 8-bit grid of the source images.
    pub quantize: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            z: 2.576,
            division_floor: 1e-12,
            min_negatives: 1000,
            snap_radius: 3,
            objective: ObjectiveWeights::default(),
            quantize: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z > 0.0 && self.z.is_finite()) {
            return Err(Error::Domain(format!("confidence multiplier must be positive, got {}", self.z)));
        }
        if !(self.division_floor >= 0.0) {
            return Err(Error::Domain(format!("division floor must be nonnegative, got {}", self.division_floor)));
        }
        self.objective.validate()
    }
}

/// One reconstructed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReconstruction {
    /// Metric slot the sample was decoded from, equal to its batch position.
    pub slot: usize,
    /// Recovered reverse unit, 1-based.
    pub unit: usize,
    pub overlapped: bool,
    pub stats: Vec<ChannelStats>,
    /// Aligned raw candidate, before refinement and filtering.
    pub raw: Tensor,
    /// After refinement, before noise filtering.
    pub optimized: Tensor,
    pub image: Tensor,
    /// Noise filter applied to the raw candidate, without refinement.
    pub filtered_only: Tensor,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Problems met on this sample; the image is still populated.
    pub errors: Vec<String>,
}

/// Quality of every image variant against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleQuality {
    pub final_image: Quality,
    /// Neither refinement nor noise filtering.
    pub raw: Quality,
    /// Noise filtering without refinement.
    pub filtered_only: Quality,
    /// Refinement without noise filtering.
    pub optimized: Quality,
}

/// Everything the pipeline produced.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub sigma: SigmaEstimate,
    pub bias_hat: Vec<f64>,
    pub raw: RawCandidates,
    pub metrics: RecoveredMetrics,
    /// Number of raw candidates not kept by alignment.
    pub discarded: usize,
    pub samples: Vec<SampleReconstruction>,
    /// Present once [`AttackResult::score`] has run.
    pub quality: Option<Vec<SampleQuality>>,
    pub warnings: Vec<String>,
}

impl AttackResult {
    pub fn sigma_hat(&self) -> f64 {
        self.sigma.sigma
    }

    pub fn reverse_hat(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.unit).collect()
    }

    pub fn final_images(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn overlapped(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.overlapped).collect()
    }

    /// Scores every reconstruction against the masked ground truth of its slot.
    pub fn score(&mut self, truth: &ImageBatch) -> Result<&[SampleQuality]> {
        let mut out = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.slot >= truth.len() {
                return Err(Error::Shape(format!(
                    "sample decoded from slot {} but ground truth holds {}",
                    s.slot,
                    truth.len()
                )));
            }
            let t = truth.image(s.slot);
            out.push(SampleQuality {
                final_image: quality(&s.image, &t)?,
                raw: quality(&s.raw, &t)?,
                filtered_only: quality(&s.filtered_only, &t)?,
                optimized: quality(&s.optimized, &t)?,
            });
        }
        Ok(self.quality.insert(out))
    }
}

/// Fails when a batch cannot be separated by `units` units.
pub fn check_separable(batch: usize, units: usize) -> Result<()> {
    if batch > units {
        return Err(Error::Unseparable { batch, units });
    }
    Ok(())
}

fn finish(v: f64, quantize: bool) -> f64 {
    let v = if v.is_finite() { v } else { 0.0 };
    if quantize {
        snap_to_8bit(v)
    } else {
        v
    }
}

/// Runs the whole pipeline on one uploaded gradient set.
pub fn run_attack(observed: &ObservedGradients, structure: &StructureConfig, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let s_len = structure.sample_len();
    let shape = [structure.channels, structure.height, structure.width];

    let sigma = estimate_sigma(observed, structure, cfg.min_negatives)?;
    let bias_hat = reconstruct_bias(observed)?;
    let weight = observed.get(WEIGHT)?;
    let raw = raw_reconstruct(weight, &bias_hat, s_len, cfg.division_floor)?;
    let metrics = reconstruct_metrics(observed, structure)?;
    let mut warnings = metrics.warnings.clone();

    let active = active_units(weight, &bias_hat, structure.bias_inputs, s_len, sigma.sigma);
    let mut metrics = metrics;
    let present: Vec<&SlotMetrics> = metrics.present().collect();
    let values: Vec<f64> = present.iter().map(|m| m.index_value * structure.units as f64).collect();
    let radius = cfg.snap_radius as f64;
    let assignments = match metrics.noise {
        Some(noise) if noise > 0.0 && sigma.sigma > 0.0 => {
            let dof = (1 + 2 * structure.channels) as f64;
            assign_units_by(
                &values,
                &active,
                radius,
                |i, u| {
                    let candidate = &raw.images.row(u - 1)[..s_len];
                    slot_cost(present[i], u, candidate, bias_hat[u - 1], sigma.sigma, noise, structure)
                },
                dof + 8.0 * (2.0 * dof).sqrt(),
            )
        }
        _ => assign_units(&values, &active, radius),
    };
    let mut units = Vec::new();
    let mut next = assignments.iter().zip(&values);
    for slot in metrics.slots.iter_mut().filter(|s| s.present) {
        let (&a, &v) = next.next().expect("one assignment per present slot");
        match a {
            Assignment::Dropped => {
                warnings.push(format!("slot {}: no active unit near {v:.2}, dropped", slot.slot));
                slot.present = false;
                continue;
            }
            Assignment::Decoded(u) => {
                warnings.push(format!("slot {}: no free active unit near {v:.2}, kept unit {u}", slot.slot))
            }
            Assignment::Active(u) if u != slot.unit => {
                warnings.push(format!("slot {}: unit {} snapped to {u}", slot.slot, slot.unit))
            }
            Assignment::Active(_) => {}
        }
        let u = a.unit().expect("kept slots carry a unit");
        slot.unit = u;
        units.push(u);
    }
    let aligned = align_and_filter(&raw, &metrics, &units)?;
    let mut kept = units.clone();
    kept.sort_unstable();
    kept.dedup();
    let discarded = structure.units - kept.len();

    let samples = aligned
        .into_iter()
        .map(|a| reconstruct_sample(a, &bias_hat, sigma.sigma, &shape, cfg))
        .collect::<Result<Vec<_>>>()?;

    Ok(AttackResult {
        sigma,
        bias_hat,
        raw,
        metrics,
        discarded,
        samples,
        quality: None,
        warnings,
    })
}

fn reconstruct_sample(
    a: AlignedSample,
    bias_hat: &[f64],
    sigma_hat: f64,
    shape: &[usize],
    cfg: &AttackConfig,
) -> Result<SampleReconstruction> {
    let b = bias_hat[a.unit - 1];
    let mut errors = Vec::new();
    if !a.valid {
        errors.push(format!("unit {}: bias gradient below division floor", a.unit));
    }
    let raw = Tensor::from_vec(shape, a.image)?;
    let (optimized, initial_objective, final_objective) = match descend(&raw, &a.stats, &cfg.objective) {
        Ok(d) => (d.image, d.initial_objective, d.final_objective),
        Err(e) => {
            errors.push(format!("refinement failed: {e}"));
            (raw.clone(), f64::NAN, f64::NAN)
        }
    };
    let (filtered, degenerate) = noise_filter(optimized.data(), sigma_hat, b, cfg.z);
    if degenerate {
        errors.push("noise filter zeroed every pixel".into());
    }
    let (filtered_only, _) = noise_filter(raw.data(), sigma_hat, b, cfg.z);
    let q = cfg.quantize;
    let snap = |t: &Tensor| t.map(|v| finish(v, q));
    Ok(SampleReconstruction {
        slot: a.slot,
        unit: a.unit,
        overlapped: a.overlapped,
        stats: a.stats,
        image: Tensor::from_vec(shape, filtered.into_iter().map(|v| finish(v, q)).collect())?,
        filtered_only: Tensor::from_vec(shape, filtered_only.into_iter().map(|v| finish(v, q)).collect())?,
        optimized: snap(&optimized),
        raw: snap(&raw),
        initial_objective,
        final_objective,
        errors,
    })
}

/// Baseline against a plain fully-connected first layer: the ratio of
/// weight to bias gradients of one unit is the batch mean of its inputs.
pub fn primary_attack(weight_grads: &[f64], bias_grad: f64) -> Result<Vec<f64>> {
    if bias_grad == 0.0 {
        return Err(Error::Domain("bias gradient is zero".into()));
    }
    Ok(weight_grads.iter().map(|w| w / bias_grad).collect())
}

#[cfg(test)]
mod tests;
