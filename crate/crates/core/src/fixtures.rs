//! Small deterministic setups shared by unit tests.

use crate::data::{extract_subject, gen_synthetic_batch, ImageBatch, MaskProvider, SubjectSpec, NUM_CLASSES};
use crate::model::{calibrate_laplace, GlobalModel, MetricFactors, StructureConfig};
use crate::numeric::SeededRng;

/// 3x8x8 structure whose Laplace grid is fitted to the generator's subjects.
pub fn small_config(units: usize, bias_inputs: usize) -> StructureConfig {
    let w0 = 5e-4;
    let public = gen_synthetic_batch(&mut SeededRng::new(u64::MAX), 256, 3, 8, 8, &SubjectSpec::default()).unwrap();
    let public = extract_subject(&public, &MaskProvider::Oracle).unwrap();
    StructureConfig {
        channels: 3,
        height: 8,
        width: 8,
        units,
        w0,
        bias_inputs,
        laplace: calibrate_laplace(&public, w0, bias_inputs).unwrap(),
        metric_units: 4,
        metric_factors: MetricFactors::default(),
        metric_gain: 1.0,
        metric_slots: 8,
    }
}

pub fn small_model(cfg: &StructureConfig, seed: u64) -> GlobalModel {
    GlobalModel::new(cfg, 8, NUM_CLASSES, &mut SeededRng::new(seed)).unwrap()
}

/// `(original, oracle-masked)` batch of the config's geometry.
pub fn batch_pair(cfg: &StructureConfig, b: usize, seed: u64) -> (ImageBatch, ImageBatch) {
    let orig = gen_synthetic_batch(
        &mut SeededRng::new(seed),
        b,
        cfg.channels,
        cfg.height,
        cfg.width,
        &SubjectSpec::default(),
    )
    .unwrap();
    let masked = extract_subject(&orig, &MaskProvider::Oracle).unwrap();
    (orig, masked)
}
