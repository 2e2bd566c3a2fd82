use super::*;
use crate::fixtures::{batch_pair, small_config, small_model};
use crate::ldp::{clip, perturb};
use crate::model::{forward_backward, GradientBundle, BIAS};
use crate::numeric::SeededRng;
use proptest::prelude::*;

const TAU: f64 = 1000.0;

fn distinct(units: &[usize]) -> usize {
    let mut u = units.to_vec();
    u.sort_unstable();
    u.dedup();
    u.len()
}

/// Seed whose batch routes every sample to its own unit.
fn collision_free(cfg: &StructureConfig, b: usize) -> (u64, crate::model::ForwardResult, ImageBatch) {
    let model = small_model(cfg, 1);
    for seed in 0..200 {
        let (orig, masked) = batch_pair(cfg, b, seed);
        let fr = forward_backward(&model, &orig, &masked, TAU).unwrap();
        let units: Vec<usize> = fr.reverse.iter().map(|r| r.unit).collect();
        if distinct(&units) == b && fr.reverse.iter().all(|r| !r.degenerate) {
            return (seed, fr, masked);
        }
    }
    panic!("no collision-free batch found");
}

fn exact_config() -> AttackConfig {
    AttackConfig {
        min_negatives: 0,
        ..AttackConfig::default()
    }
}

#[test]
fn noiseless_sigma_is_zero() {
    let cfg = small_config(32, 4);
    let (_, fr, _) = collision_free(&cfg, 4);
    let est = estimate_sigma(&fr.bundle.upload(), &cfg, 1000).unwrap();
    assert_eq!(est.sigma, 0.0);
    assert_eq!(est.negatives, 0);
}

#[test]
fn sigma_estimate_error_cases() {
    let mut rng = SeededRng::new(3);
    let pos: Vec<f64> = (0..5000).map(|_| rng.normal(0.0, 0.01).abs() + 1e-9).collect();
    assert!(matches!(estimate_sigma_from(&pos, 1000), Err(Error::Domain(_))));
    let few: Vec<f64> = (0..100).map(|_| rng.normal(0.0, 0.01)).collect();
    assert!(matches!(
        estimate_sigma_from(&few, 1000),
        Err(Error::InsufficientSamples { needed: 1000, .. })
    ));
    let many: Vec<f64> = (0..400_000).map(|_| rng.normal(0.0, 0.002)).collect();
    let est = estimate_sigma_from(&many, 1000).unwrap();
    assert!((est.sigma - 0.002).abs() / 0.002 < 0.02, "{est:?}");
    assert!((est.variance_based - 0.002).abs() / 0.002 < 0.02, "{est:?}");
}

#[test]
fn bias_copies_average_exactly_without_noise() {
    let cfg = small_config(32, 10);
    let (_, fr, _) = collision_free(&cfg, 4);
    let bias_hat = reconstruct_bias(&fr.bundle.upload()).unwrap();
    for (k, &b) in bias_hat.iter().enumerate() {
        match fr.reverse.iter().position(|r| r.unit == k + 1) {
            Some(i) => assert_eq!(b, fr.upstream[i]),
            None => assert_eq!(b, 0.0),
        }
    }
}

#[test]
fn single_bias_input_returns_raw_column() {
    let cfg = small_config(16, 1);
    let (_, fr, _) = collision_free(&cfg, 3);
    let mut rng = SeededRng::new(9);
    let noisy = perturb(fr.bundle, 0.01, &mut rng).unwrap();
    let obs = noisy.upload();
    assert_eq!(reconstruct_bias(&obs).unwrap(), obs.get(BIAS).unwrap().row(0).to_vec());
}

#[test]
fn bias_average_variance_shrinks_with_copies() {
    let sigma = 0.002;
    let k = 64;
    for d in [10usize, 100] {
        let mut rng = SeededRng::new(d as u64);
        let mut sq = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let data: Vec<f64> = (0..d * k).map(|_| rng.normal(0.0, sigma)).collect();
            let obs = ObservedGradients::new(vec![(BIAS.into(), Tensor::from_vec(&[d, k], data).unwrap())]);
            sq += reconstruct_bias(&obs).unwrap().iter().map(|v| v * v).sum::<f64>();
        }
        let var = sq / (trials * k) as f64;
        let expected = sigma * sigma / d as f64;
        assert!((var / expected - 1.0).abs() < 0.1, "D_b={d}: {var} vs {expected}");
    }
}

#[test]
fn raw_division_and_floor() {
    let x = [0.1, 0.2, 0.3, 0.4];
    let mut w = Tensor::zeros(&[2, 6]);
    for (j, v) in x.iter().enumerate() {
        w.row_mut(0)[j] = 2.0 * v;
        w.row_mut(1)[j] = 5.0;
    }
    let raw = raw_reconstruct(&w, &[2.0, 1e-13], 4, 1e-12).unwrap();
    assert_eq!(raw.images.row(0), &x);
    assert_eq!(raw.valid, vec![true, false]);
    assert!(raw.images.row(1).iter().all(|&v| v == 0.0));
    assert!(raw_reconstruct(&w, &[1.0], 4, 1e-12).is_err());
}

#[test]
fn metrics_recovered_exactly_without_noise() {
    let mut cfg = small_config(64, 5);
    cfg.metric_slots = 16;
    let (_, fr, _) = collision_free(&cfg, 16);
    let rec = reconstruct_metrics(&fr.bundle.upload(), &cfg).unwrap();
    let truth = fr.metrics.layer_input(&cfg.metric_factors, cfg.metric_slots).unwrap();
    for (a, b) in rec.input.iter().zip(&truth) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
    let present: Vec<&SlotMetrics> = rec.present().collect();
    assert_eq!(present.len(), 16);
    assert_eq!(present.iter().map(|s| s.stats.len() * 3).sum::<usize>(), 144);
    for (i, s) in present.iter().enumerate() {
        assert_eq!(s.unit, fr.reverse[i].unit);
        let expect = fr.metrics.sample_stats(i);
        for (a, b) in s.stats.iter().zip(&expect) {
            assert!((a.mean - b.mean).abs() < 1e-10);
            assert!((a.variance - b.variance).abs() < 1e-10);
            assert!((a.tv - b.tv).abs() < 1e-7);
        }
    }
}

#[test]
fn out_of_range_index_is_clamped_with_warning() {
    let cfg = small_config(8, 1);
    let len = cfg.metric_input_len();
    let mut u = vec![0.0; len];
    u[len - 1] = 1.0;
    u[cfg.metric_slots * 9] = 1.5;
    let g: Vec<f64> = (0..cfg.metric_units).flat_map(|q| u.iter().map(move |v| v * (q as f64 + 1.0))).collect();
    let obs = ObservedGradients::new(vec![(
        crate::model::METRIC.into(),
        Tensor::from_vec(&[cfg.metric_units, len], g).unwrap(),
    )]);
    let rec = reconstruct_metrics(&obs, &cfg).unwrap();
    assert_eq!(rec.slots[0].unit, 8);
    assert!(rec.slots[0].present);
    assert_eq!(rec.warnings.len(), 1);
    assert_eq!(rec.present().count(), 1);
}

#[test]
fn alignment_discards_unused_units() {
    let mut cfg = small_config(1024, 2);
    cfg.metric_slots = 16;
    let (_, fr, masked) = collision_free(&cfg, 16);
    let res = run_attack(&fr.bundle.upload(), &cfg, &exact_config()).unwrap();
    assert_eq!(res.discarded, 1008);
    let truth: Vec<usize> = fr.reverse.iter().map(|r| r.unit).collect();
    assert_eq!(res.reverse_hat(), truth);
    assert!(res.samples.iter().enumerate().all(|(i, s)| s.slot == i && !s.overlapped));
    assert_eq!(res.samples.len(), masked.len());
}

#[test]
fn collisions_are_flagged() {
    let mut raw = RawCandidates {
        images: Tensor::zeros(&[4, 3]),
        valid: vec![true; 4],
    };
    raw.images.row_mut(2).copy_from_slice(&[1.0, 2.0, 3.0]);
    let slot = |s, unit| SlotMetrics {
        slot: s,
        stats: vec![],
        index_value: unit as f64 / 4.0,
        unit,
        present: true,
    };
    let metrics = RecoveredMetrics {
        slots: vec![slot(0, 3), slot(1, 1), slot(2, 3)],
        input: vec![],
        noise: None,
        warnings: vec![],
    };
    let pairs = align_and_filter(&raw, &metrics, &[3, 1, 3]).unwrap();
    assert_eq!(pairs.iter().map(|p| p.overlapped).collect::<Vec<_>>(), vec![true, false, true]);
    assert_eq!(pairs[0].image, pairs[2].image);
    assert!(align_and_filter(&raw, &metrics, &[3, 1]).is_err());
    assert!(align_and_filter(&raw, &metrics, &[3, 1, 5]).is_err());
}

#[test]
fn assignment_prefers_nearest_active_unit() {
    use Assignment::*;
    let mut active = [false; 10];
    active[1] = true;
    active[3] = true;
    active[5] = true;
    assert_eq!(assign_units(&[2.2], &active, 3.0), vec![Active(2)]);
    assert_eq!(assign_units(&[3.49], &active, 3.0), vec![Active(4)]);
    assert_eq!(assign_units(&[6.1, 5.8], &active, 3.0), vec![Active(6), Active(6)]);
    assert_eq!(assign_units(&[6.2, 7.9], &active, 3.0), vec![Active(6), Decoded(8)]);
    assert_eq!(assign_units(&[8.9], &active, 3.0), vec![Active(6)]);
    assert_eq!(assign_units(&[8.9], &active, 1.0), vec![Decoded(9)]);
    let idle = [false; 10];
    assert_eq!(assign_units(&[0.9, 2.4, 2.6, 12.0], &idle, 3.0), vec![Dropped, Dropped, Decoded(3), Decoded(10)]);
}

#[test]
fn noiseless_attack_reproduces_masked_samples() {
    let cfg = small_config(64, 3);
    let (_, fr, masked) = collision_free(&cfg, 4);
    let mut res = run_attack(&fr.bundle.upload(), &cfg, &exact_config()).unwrap();
    let q = res.score(&masked).unwrap().to_vec();
    for (i, s) in res.samples.iter().enumerate() {
        assert_eq!(s.image, masked.image(i));
        assert!(s.errors.is_empty(), "{:?}", s.errors);
        assert_eq!(q[i].final_image.mse, 0.0);
        assert_eq!(q[i].final_image.ssim, 1.0);
    }
}

#[test]
fn clipping_alone_does_not_change_output() {
    let cfg = small_config(64, 3);
    let (_, fr, _) = collision_free(&cfg, 4);
    let plain = run_attack(&fr.bundle.upload(), &cfg, &exact_config()).unwrap();
    for c in [0.1, 1.0, 10.0] {
        let (clipped, _) = clip(fr.bundle.clone(), c).unwrap();
        let res = run_attack(&clipped.upload(), &cfg, &exact_config()).unwrap();
        assert_eq!(res.final_images(), plain.final_images());
        assert_eq!(res.reverse_hat(), plain.reverse_hat());
    }
}

#[test]
fn noisy_attack_recovers_units_and_flags_nothing_broken() {
    let cfg = small_config(64, 20);
    let (_, fr, masked) = collision_free(&cfg, 4);
    let mut rng = SeededRng::new(11);
    let (clipped, _) = clip(fr.bundle.clone(), 10.0).unwrap();
    let noisy: GradientBundle = perturb(clipped, 0.002, &mut rng).unwrap();
    let mut res = run_attack(&noisy.upload(), &cfg, &AttackConfig::default()).unwrap();
    let truth: Vec<usize> = fr.reverse.iter().map(|r| r.unit).collect();
    assert_eq!(res.reverse_hat(), truth);
    assert!((res.sigma_hat() - 0.002).abs() / 0.002 < 0.1);
    let q = res.score(&masked).unwrap();
    assert!(q.iter().all(|s| s.final_image.mse.is_finite()));
    assert!(res.samples.iter().all(|s| s.image.all_finite()));
}

#[test]
fn filter_identity_and_degenerate() {
    let img = [0.0, 0.3, -0.2, 1e-9];
    assert_eq!(noise_filter(&img, 0.0, 0.5, 2.576), (img.to_vec(), false));
    let (out, degenerate) = noise_filter(&img, 1.0, 0.5, 2.576);
    assert!(degenerate && out.iter().all(|&v| v == 0.0));
    let (out, _) = noise_filter(&[0.5, 0.003], 0.001, 1.0, 2.576);
    assert_eq!(out, vec![0.5, 0.0]);
}

#[test]
fn unseparable_batch_rejected() {
    assert!(matches!(check_separable(9, 8), Err(Error::Unseparable { batch: 9, units: 8 })));
    assert!(check_separable(8, 8).is_ok());
}

/// Plain fully-connected unit `y = w.x + b` under `L = mean(y)`.
fn fcl_grads(samples: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let n = samples.len() as f64;
    let mut gw = vec![0.0; samples[0].len()];
    for x in samples {
        for (g, v) in gw.iter_mut().zip(x) {
            *g += v / n;
        }
    }
    (gw, 1.0)
}

#[test]
fn primary_attack_returns_batch_mean() {
    let (w, b) = fcl_grads(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert_eq!(primary_attack(&w, b).unwrap(), vec![0.5, 0.5]);
    let single = vec![0.25, 0.75, 0.5];
    let (w, b) = fcl_grads(std::slice::from_ref(&single));
    assert_eq!(primary_attack(&w, b).unwrap(), single);
    assert!(primary_attack(&w, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn primary_attack_matches_mean_oracle(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = SeededRng::new(seed);
        let samples: Vec<Vec<f64>> = (0..16).map(|_| (0..12).map(|_| rng.uniform()).collect()).collect();
        // L = scale * sum(y): dL/dw = scale * sum(x), dL/db = 16 * scale.
        let gw: Vec<f64> = (0..12).map(|j| scale * samples.iter().map(|x| x[j]).sum::<f64>()).collect();
        let got = primary_attack(&gw, 16.0 * scale).unwrap();
        for j in 0..12 {
            let mean = samples.iter().map(|x| x[j]).sum::<f64>() / 16.0;
            prop_assert!((got[j] - mean).abs() <= 1e-10);
        }
    }
}
