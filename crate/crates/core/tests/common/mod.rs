//! Shared setups for the integration tests.
#![allow(dead_code)]

use ldp_recon::config::RunConfig;
use ldp_recon::data::{extract_subject, gen_synthetic_batch, ImageBatch, MaskProvider, SubjectSpec, NUM_CLASSES};
use ldp_recon::model::{calibrate_laplace, GlobalModel, MetricFactors, StructureConfig};
use ldp_recon::numeric::SeededRng;

/// 3x8x8 structure with a Laplace grid fitted to generated subjects.
pub fn small_structure(units: usize, bias_inputs: usize, slots: usize) -> StructureConfig {
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
        metric_gain: 0.1,
        metric_slots: slots,
    }
}

pub fn model(cfg: &StructureConfig, seed: u64) -> GlobalModel {
    GlobalModel::new(cfg, 16, NUM_CLASSES, &mut SeededRng::new(seed)).unwrap()
}

/// `(original, oracle-masked)` batch of the structure's geometry.
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

/// Required keys plus `extra`, everything else at its default.
pub fn run_config(extra: &[(&str, &str)]) -> RunConfig {
    let mut pairs = vec![("batch", "8"), ("units", "256"), ("epsilon", "10"), ("clip_bound", "10")];
    pairs.extend_from_slice(extra);
    RunConfig::from_pairs(pairs).unwrap()
}

/// Federated setup at 3x8x8 with 64 units.
pub fn flsim_config(extra: &[(&str, &str)]) -> RunConfig {
    let mut pairs = vec![
        ("units", "64"),
        ("height", "8"),
        ("width", "8"),
        ("bias_inputs", "10"),
        ("w0", "5e-4"),
        ("metric_slots", "8"),
        ("calibration_samples", "256"),
    ];
    pairs.extend_from_slice(extra);
    run_config(&pairs)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
