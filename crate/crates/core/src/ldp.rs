//! Victim-side gradient protection: clip the whole gradient to an L2 bound,
//! then add i.i.d. Gaussian noise to every entry.

use crate::error::{Error, Result};
use crate::model::GradientBundle;
use crate::numeric::SeededRng;

/// How the clipping bound is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipMode {
    /// One norm over the whole flattened bundle.
    #[default]
    Global,
    /// Every tensor clipped separately to `C / sqrt(n_tensors)`, so the
    /// bundle norm still stays within `C`.
    PerLayer,
}

/// Local privacy parameters of one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdpConfig {
    pub epsilon: f64,
    /// Carried for reporting; the noise scale does not depend on it.
    pub delta: f64,
    pub clip_bound: f64,
    pub c_const: f64,
    /// Minimal local dataset size `m`.
    pub min_dataset: f64,
    pub clip_mode: ClipMode,
}

impl Default for LdpConfig {
    fn default() -> Self {
        Self {
            epsilon: 10.0,
            delta: 0.01,
            clip_bound: 10.0,
            c_const: 1.0,
            min_dataset: 1000.0,
            clip_mode: ClipMode::Global,
        }
    }
}

impl LdpConfig {
    pub fn validate(&self) -> Result<()> {
        noise_sigma(self.c_const, self.clip_bound, self.min_dataset, self.epsilon)?;
        if !(self.min_dataset >= 1.0) {
            return Err(Error::Domain(format!("m must be >= 1, got {}", self.min_dataset)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Domain(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// `2 c C / (m epsilon)`.
    pub fn sigma(&self) -> Result<f64> {
        noise_sigma(self.c_const, self.clip_bound, self.min_dataset, self.epsilon)
    }
}

/// Gaussian noise scale `sigma = 2 c C / (m epsilon)`.
pub fn noise_sigma(c_const: f64, clip_bound: f64, m: f64, epsilon: f64) -> Result<f64> {
    for (name, v) in [("c", c_const), ("C", clip_bound), ("m", m), ("epsilon", epsilon)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(2.0 * c_const * clip_bound / (m * epsilon))
}

/// Divides every entry by `max(1, ||g|| / C)` and returns that factor.
pub fn clip(mut bundle: GradientBundle, clip_bound: f64) -> Result<(GradientBundle, f64)> {
    if !(clip_bound > 0.0) {
        return Err(Error::Domain(format!("clipping bound must be positive, got {clip_bound}")));
    }
    let delta = (bundle.norm() / clip_bound).max(1.0);
    if delta > 1.0 {
        for t in bundle.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v /= delta);
        }
    }
    bundle.record_clip(delta);
    Ok((bundle, delta))
}

fn clip_per_layer(mut bundle: GradientBundle, clip_bound: f64) -> Result<(GradientBundle, f64)> {
    if !(clip_bound > 0.0) {
        return Err(Error::Domain(format!("clipping bound must be positive, got {clip_bound}")));
    }
    let n = bundle.entries().len().max(1) as f64;
    let bound = clip_bound / n.sqrt();
    let mut worst = 1.0f64;
    for t in bundle.tensors_mut() {
        let d = (crate::numeric::l2_norm(t) / bound).max(1.0);
        if d > 1.0 {
            t.data_mut().iter_mut().for_each(|v| *v /= d);
        }
        worst = worst.max(d);
    }
    bundle.record_clip(worst);
    Ok((bundle, worst))
}

/// Adds independent `N(0, sigma^2)` noise to every entry, in bundle order.
pub fn perturb(mut bundle: GradientBundle, sigma: f64, rng: &mut SeededRng) -> Result<GradientBundle> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise scale must be >= 0, got {sigma}")));
    }
    if sigma > 0.0 {
        for t in bundle.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += sigma * rng.standard_normal());
        }
    }
    bundle.record_noise(sigma);
    Ok(bundle)
}

/// Full local protection: clip, then perturb.
pub fn protect(bundle: GradientBundle, cfg: &LdpConfig, rng: &mut SeededRng) -> Result<GradientBundle> {
    cfg.validate()?;
    let (clipped, _) = match cfg.clip_mode {
        ClipMode::Global => clip(bundle, cfg.clip_bound)?,
        ClipMode::PerLayer => clip_per_layer(bundle, cfg.clip_bound)?,
    };
    perturb(clipped, cfg.sigma()?, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn bundle(values: Vec<Vec<f64>>) -> GradientBundle {
        GradientBundle::new(
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("t{i}"), Tensor::from_vec(&[v.len()], v).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_noise_scale() {
        assert!((noise_sigma(1.0, 10.0, 1000.0, 10.0).unwrap() - 0.002).abs() < 1e-15);
        assert!((noise_sigma(1.0, 10.0, 1000.0, 5.0).unwrap() - 0.004).abs() < 1e-15);
        assert!((noise_sigma(1.0, 5.0, 1000.0, 10.0).unwrap() - 0.001).abs() < 1e-15);
        assert!((LdpConfig::default().sigma().unwrap() - 0.002).abs() < 1e-15);
        assert!(noise_sigma(0.0, 10.0, 1000.0, 10.0).is_err());
        assert!(noise_sigma(1.0, -1.0, 1000.0, 10.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let (b, d) = clip(bundle(vec![vec![12.0], vec![16.0]]), 10.0).unwrap();
        assert_eq!(d, 2.0);
        assert_eq!(b.get("t0").unwrap().data(), &[6.0]);
        assert_eq!(b.get("t1").unwrap().data(), &[8.0]);
        assert_eq!(b.clip_factor(), Some(2.0));
        let orig = bundle(vec![vec![3.0], vec![4.0]]);
        let (b, d) = clip(orig.clone(), 10.0).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(b.entries(), orig.entries());
    }

    #[test]
    fn clipped_norm_matches_scalar_loop() {
        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            let scale = rng.uniform_range(0.1, 50.0);
            let vals: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..20).map(|_| scale * rng.standard_normal()).collect())
                .collect();
            let mut pre = 0.0;
            for v in vals.iter().flatten() {
                pre += v * v;
            }
            let pre = pre.sqrt();
            let (b, _) = clip(bundle(vals), 10.0).unwrap();
            let mut post = 0.0;
            for (_, t) in b.entries() {
                for v in t.data() {
                    post += v * v;
                }
            }
            assert!((post.sqrt() - pre.min(10.0)).abs() <= 1e-9);
        }
    }

    #[test]
    fn per_layer_keeps_total_within_bound() {
        let (b, _) = clip_per_layer(bundle(vec![vec![100.0], vec![0.1], vec![-50.0, 50.0]]), 3.0).unwrap();
        assert!(b.norm() <= 3.0 + 1e-12);
        assert_eq!(b.get("t1").unwrap().data(), &[0.1]);
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let orig = bundle(vec![vec![1.0, -2.0]]);
        let out = perturb(orig.clone(), 0.0, &mut SeededRng::new(1)).unwrap();
        assert_eq!(out.entries(), orig.entries());
    }

    #[test]
    fn perturb_empirical_std() {
        let out = perturb(bundle(vec![vec![0.0; 1_000_000]]), 0.002, &mut SeededRng::new(2)).unwrap();
        let d = out.get("t0").unwrap().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((0.00198..=0.00202).contains(&std), "{std}");
    }

    #[test]
    fn perturb_is_reproducible() {
        let a = perturb(bundle(vec![vec![0.0; 100]]), 0.1, &mut SeededRng::new(3)).unwrap();
        let b = perturb(bundle(vec![vec![0.0; 100]]), 0.1, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn protect_small_gradient_without_noise_is_identity() {
        let cfg = LdpConfig {
            epsilon: 1e300,
            ..LdpConfig::default()
        };
        let orig = bundle(vec![vec![1.0, 2.0]]);
        let out = protect(orig.clone(), &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(out.entries(), orig.entries());
    }

    #[test]
    fn zero_positions_are_gaussian() {
        let n = 100_000;
        let mut vals = vec![0.0; n];
        vals.push(1e6);
        let out = protect(bundle(vec![vals]), &LdpConfig::default(), &mut SeededRng::new(4)).unwrap();
        let mut noise: Vec<f64> = out.get("t0").unwrap().data()[..n].to_vec();
        noise.sort_by(f64::total_cmp);
        let normal = Normal::new(0.0, 0.002).unwrap();
        let mut ks = 0.0f64;
        for (i, v) in noise.iter().enumerate() {
            let f = normal.cdf(*v);
            ks = ks.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // 1% critical value of the one-sample KS statistic
        assert!(ks < 1.628 / (n as f64).sqrt(), "KS = {ks}");
    }

    proptest! {
        #[test]
        fn clipping_preserves_ratios(
            a in -1e3f64..1e3,
            b in prop::num::f64::NORMAL.prop_filter("nonzero", |v| v.abs() > 1e-6 && v.abs() < 1e6),
            exp in 1i32..40,
            frac in 1.0f64..2.0,
        ) {
            let pow2 = 2f64.powi(exp);
            prop_assert_eq!((a / pow2) / (b / pow2), a / b);
            let delta = pow2 * frac;
            let r = (a / delta) / (b / delta);
            prop_assert!((r - a / b).abs() <= 4.0 * f64::EPSILON * (a / b).abs());
        }
    }
}
