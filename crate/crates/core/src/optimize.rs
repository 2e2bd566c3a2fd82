//! Metric-matching refinement of reconstructed samples.
//!
//! Minimizes, per sample,
//! `w_mu * sum_l |mu_l(x) - mu_l*| + w_sigma * sum_l |var_l(x) - var_l*| + w_tv * sum_l |TV_l(x) - TV_l*|`
//! over channels `l`, by plain gradient descent with sign subgradients,
//! clamping to `[0, 1]` after every step and halving the step on increase.

use crate::error::{Error, Result};
use crate::numeric::{channel_stats, ChannelStats, Tensor};

/// Objective weights and descent schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub w_mu: f64,
    pub w_sigma: f64,
    pub w_tv: f64,
    /// Initial step size of every round.
    pub lr: f64,
    pub rounds: usize,
    /// Step halvings tried before the descent stops.
    pub max_halvings: usize,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            w_mu: 1e6,
            w_sigma: 2e4,
            w_tv: 1e4,
            lr: 1e-5,
            rounds: 1000,
            max_halvings: 10,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_mu", self.w_mu), ("w_sigma", self.w_sigma), ("w_tv", self.w_tv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

fn check(x: &Tensor, target: &[ChannelStats]) -> Result<(usize, usize, usize)> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("expected C x H x W, got {:?}", x.shape())));
    };
    if target.len() != c {
        return Err(Error::Shape(format!("{} target blocks for {c} channels", target.len())));
    }
    Ok((c, h, w))
}

/// Weighted absolute metric mismatch.
pub fn objective(x: &Tensor, target: &[ChannelStats], weights: &ObjectiveWeights) -> Result<f64> {
    check(x, target)?;
    Ok(channel_stats(x)?
        .iter()
        .zip(target)
        .map(|(s, t)| {
            weights.w_mu * (s.mean - t.mean).abs()
                + weights.w_sigma * (s.variance - t.variance).abs()
                + weights.w_tv * (s.tv - t.tv).abs()
        })
        .sum())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Objective and its (sub)gradient with respect to every pixel.
pub fn objective_gradient(
    x: &Tensor,
    target: &[ChannelStats],
    weights: &ObjectiveWeights,
) -> Result<(f64, Tensor)> {
    let (c, h, w) = check(x, target)?;
    let stats = channel_stats(x)?;
    let plane = h * w;
    let n = plane as f64;
    let mut grad = Tensor::zeros(x.shape());
    let mut value = 0.0;
    for ch in 0..c {
        let (s, t) = (stats[ch], target[ch]);
        value += weights.w_mu * (s.mean - t.mean).abs()
            + weights.w_sigma * (s.variance - t.variance).abs()
            + weights.w_tv * (s.tv - t.tv).abs();
        let gm = weights.w_mu * sign(s.mean - t.mean) / n;
        let gv = weights.w_sigma * sign(s.variance - t.variance) * 2.0 / n;
        let gt = weights.w_tv * sign(s.tv - t.tv);
        let xs = &x.data()[ch * plane..(ch + 1) * plane];
        let g = &mut grad.data_mut()[ch * plane..(ch + 1) * plane];
        for p in 0..plane {
            g[p] = gm + gv * (xs[p] - s.mean);
        }
        if gt != 0.0 {
            for y in 0..h {
                for xx in 0..w - 1 {
                    let p = y * w + xx;
                    let d = sign(xs[p + 1] - xs[p]) * gt;
                    g[p + 1] += d;
                    g[p] -= d;
                }
            }
            for y in 0..h - 1 {
                for xx in 0..w {
                    let p = y * w + xx;
                    let d = sign(xs[p + w] - xs[p]) * gt;
                    g[p + w] += d;
                    g[p] -= d;
                }
            }
        }
    }
    Ok((value, grad))
}

/// Outcome of one descent.
#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub image: Tensor,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub accepted_steps: usize,
}

/// Runs up to `rounds` descent steps from `x` clamped to `[0, 1]`.
pub fn descend(x: &Tensor, target: &[ChannelStats], weights: &ObjectiveWeights) -> Result<Descent> {
    weights.validate()?;
    let mut current = x.map(|v| v.clamp(0.0, 1.0));
    let initial = objective(&current, target, weights)?;
    let mut value = initial;
    let mut accepted = 0;
    'rounds: for _ in 0..weights.rounds {
        let (_, grad) = objective_gradient(&current, target, weights)?;
        if grad.data().iter().all(|&g| g == 0.0) {
            break;
        }
        let mut lr = weights.lr;
        for _ in 0..=weights.max_halvings {
            let trial = Tensor::from_vec(
                current.shape(),
                current
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(v, g)| (v - lr * g).clamp(0.0, 1.0))
                    .collect(),
            )?;
            let trial_value = objective(&trial, target, weights)?;
            if trial_value < value {
                current = trial;
                value = trial_value;
                accepted += 1;
                continue 'rounds;
            }
            lr *= 0.5;
        }
        break;
    }
    Ok(Descent {
        image: current,
        initial_objective: initial,
        final_objective: value,
        accepted_steps: accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;
    use proptest::prelude::*;

    fn random_image(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn shifted_targets(x: &Tensor, rng: &mut SeededRng) -> Vec<ChannelStats> {
        channel_stats(x)
            .unwrap()
            .into_iter()
            .map(|s| ChannelStats {
                mean: s.mean + rng.uniform_range(-0.2, 0.2),
                variance: s.variance * rng.uniform_range(0.5, 1.5),
                tv: s.tv * rng.uniform_range(0.5, 1.5),
            })
            .collect()
    }

    #[test]
    fn perfect_match_is_zero() {
        let x = random_image(&mut SeededRng::new(1), 3, 8, 8);
        let t = channel_stats(&x).unwrap();
        assert_eq!(objective(&x, &t, &ObjectiveWeights::default()).unwrap(), 0.0);
        let d = descend(&x, &t, &ObjectiveWeights::default()).unwrap();
        assert_eq!(d.image, x);
    }

    #[test]
    fn zero_weights_are_zero() {
        let mut rng = SeededRng::new(2);
        let x = random_image(&mut rng, 3, 8, 8);
        let t = shifted_targets(&x, &mut rng);
        let w = ObjectiveWeights {
            w_mu: 0.0,
            w_sigma: 0.0,
            w_tv: 0.0,
            ..ObjectiveWeights::default()
        };
        assert_eq!(objective(&x, &t, &w).unwrap(), 0.0);
    }

    #[test]
    fn matches_scalar_recomputation() {
        let mut rng = SeededRng::new(3);
        let w = ObjectiveWeights::default();
        for _ in 0..20 {
            let x = random_image(&mut rng, 3, 8, 8);
            let t = shifted_targets(&x, &mut rng);
            let mut oracle = 0.0;
            for ch in 0..3 {
                let px: Vec<f64> = x.data()[ch * 64..(ch + 1) * 64].to_vec();
                let mean = px.iter().sum::<f64>() / 64.0;
                let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
                let mut tv = 0.0;
                for y in 0..8 {
                    for xx in 0..8 {
                        if xx + 1 < 8 {
                            tv += (px[y * 8 + xx + 1] - px[y * 8 + xx]).abs();
                        }
                        if y + 1 < 8 {
                            tv += (px[(y + 1) * 8 + xx] - px[y * 8 + xx]).abs();
                        }
                    }
                }
                oracle += 1e6 * (mean - t[ch].mean).abs()
                    + 2e4 * (var - t[ch].variance).abs()
                    + 1e4 * (tv - t[ch].tv).abs();
            }
            let got = objective(&x, &t, &w).unwrap();
            assert!((got - oracle).abs() <= 1e-9 * oracle);
        }
    }

    fn fd_check(weights: ObjectiveWeights, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let x = random_image(&mut rng, 3, 8, 8);
        let t = shifted_targets(&x, &mut rng);
        let (_, g) = objective_gradient(&x, &t, &weights).unwrap();
        let h = 1e-7;
        // cancellation error of the central difference itself
        let roundoff = 8.0 * f64::EPSILON * objective(&x, &t, &weights).unwrap() / h;
        for j in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[j] += h;
            let mut down = x.clone();
            down.data_mut()[j] -= h;
            let fd = (objective(&up, &t, &weights).unwrap() - objective(&down, &t, &weights).unwrap()) / (2.0 * h);
            let an = g.data()[j];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + roundoff,
                "pixel {j}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            fd_check(ObjectiveWeights::default(), seed);
            fd_check(
                ObjectiveWeights {
                    w_mu: 0.0,
                    w_sigma: 0.0,
                    w_tv: 1.0,
                    ..ObjectiveWeights::default()
                },
                100 + seed,
            );
        }
    }

    #[test]
    fn zero_rounds_is_identity() {
        let mut rng = SeededRng::new(4);
        let x = random_image(&mut rng, 3, 8, 8);
        let t = shifted_targets(&x, &mut rng);
        let w = ObjectiveWeights { rounds: 0, ..ObjectiveWeights::default() };
        assert_eq!(descend(&x, &t, &w).unwrap().image, x);
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor::zeros(&[3, 8, 8]);
        let t = vec![ChannelStats { mean: 0.0, variance: 0.0, tv: 0.0 }];
        assert!(objective(&x, &t, &ObjectiveWeights::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn descent_is_monotone_and_bounded(seed in 0u64..10_000, rounds in 1usize..40) {
            let mut rng = SeededRng::new(seed);
            let x = random_image(&mut rng, 3, 8, 8);
            let t = shifted_targets(&x, &mut rng);
            let w = ObjectiveWeights { rounds, ..ObjectiveWeights::default() };
            let d = descend(&x, &t, &w).unwrap();
            prop_assert!(d.final_objective <= d.initial_objective);
            prop_assert!(d.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(d.final_objective, objective(&d.image, &t, &w).unwrap());
        }
    }
}
