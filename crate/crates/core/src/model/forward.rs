use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

use super::{
    metric_matrix, reverse_index_from_activations, GlobalModel, GradientBundle, InferenceStructure,
    MetricMatrix, ReverseIndex, BIAS, CONV, METRIC, WEIGHT,
};

/// Everything one local training step produces on the user side.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Mean cross-entropy of the target model.
    pub loss: f64,
    pub bundle: GradientBundle,
    /// Reverse unit of every sample, in batch order.
    pub reverse: Vec<ReverseIndex>,
    /// Separation outputs `y_min` per sample.
    pub y_min: Vec<f64>,
    /// `dL/dy_min` per sample.
    pub upstream: Vec<f64>,
    pub metrics: MetricMatrix,
    pub warnings: Vec<String>,
}

/// Dot product with four partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let (x, y) = (&a[4 * c..4 * c + 4], &b[4 * c..4 * c + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output of the 1x1 convolution for one `C x H x W` sample: `2C x H x W`.
pub fn conv_output(structure: &InferenceStructure, sample: &[f64]) -> Vec<f64> {
    let c = structure.config().channels;
    let plane = sample.len() / c;
    let mut out = vec![0.0; 2 * c * plane];
    for o in 0..2 * c {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for ch in 0..c {
            let k = structure.conv.data()[o * c + ch];
            if k != 0.0 {
                for (d, s) in dst.iter_mut().zip(&sample[ch * plane..(ch + 1) * plane]) {
                    *d += k * s;
                }
            }
        }
    }
    out
}

/// Separation-layer pre-activations computed from the actual parameters.
pub fn layer_activations(structure: &InferenceStructure, conv_out: &[f64], bias_out: &[f64]) -> Vec<f64> {
    (0..structure.units())
        .map(|k| dot(structure.weight.row(k), conv_out) + bias_out[k])
        .collect()
}

/// Gradients of the convolution, weight and bias layers for given per-sample
/// upstream gradients `dL/dy_min`.
///
/// Sample `i` contributes `upstream[i] * conv_output(x_i)` to weight row
/// `i0 - 1` and `upstream[i]` to every entry of bias column `i0 - 1`.
pub fn separation_grads(
    structure: &InferenceStructure,
    masked: &ImageBatch,
    reverse: &[ReverseIndex],
    upstream: &[f64],
) -> Result<(Tensor, Tensor, Tensor)> {
    let b = masked.len();
    if reverse.len() != b || upstream.len() != b {
        return Err(Error::Shape(format!(
            "{} reverse indices and {} upstream values for {b} samples",
            reverse.len(),
            upstream.len()
        )));
    }
    let cfg = structure.config();
    let c = cfg.channels;
    let plane = cfg.height * cfg.width;
    let mut g_conv = Tensor::zeros(structure.conv.shape());
    let mut g_weight = Tensor::zeros(structure.weight.shape());
    let mut g_bias = Tensor::zeros(structure.bias.shape());
    for i in 0..b {
        let x = masked.sample(i);
        let v = conv_output(structure, x);
        let k = reverse[i].unit - 1;
        let g = upstream[i];
        for (gw, vj) in g_weight.row_mut(k).iter_mut().zip(&v) {
            *gw += g * vj;
        }
        for d in 0..cfg.bias_inputs {
            g_bias.data_mut()[d * cfg.units + k] += g;
        }
        // dL/dv = g * W[k, :]
        let wrow = structure.weight.row(k);
        for o in 0..2 * c {
            for ch in 0..c {
                let s = dot(&wrow[o * plane..(o + 1) * plane], &x[ch * plane..(ch + 1) * plane]);
                g_conv.data_mut()[o * c + ch] += g * s;
            }
        }
    }
    Ok((g_conv, g_weight, g_bias))
}

/// One local step of a user holding `original` samples whose subject-masked
/// versions are `masked`, with structure output coefficient `tau`.
///
/// The target model sees `x + tau * (y_min + gain * r)`, where `y_min` is the
/// sample's minimal positive separation output (broadcast over every input
/// unit) and `r` is the metric-layer output tiled over the input.
pub fn forward_backward(
    model: &GlobalModel,
    original: &ImageBatch,
    masked: &ImageBatch,
    tau: f64,
) -> Result<ForwardResult> {
    let structure = &model.structure;
    let cfg = structure.config();
    let b = original.len();
    if masked.images().shape() != original.images().shape() || masked.labels() != original.labels() {
        return Err(Error::Shape("masked batch does not match original batch".into()));
    }
    let (c, h, w) = original.geometry();
    if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
        return Err(Error::Shape(format!(
            "batch geometry {c}x{h}x{w} does not match structure {}x{}x{}",
            cfg.channels, cfg.height, cfg.width
        )));
    }
    let s = cfg.sample_len();
    if model.target.inputs() != s {
        return Err(Error::Shape(format!(
            "target model expects {} inputs, samples have {s}",
            model.target.inputs()
        )));
    }
    if b > cfg.metric_slots {
        return Err(Error::Shape(format!(
            "batch of {b} exceeds the {} metric slots of the structure",
            cfg.metric_slots
        )));
    }
    if !tau.is_finite() {
        return Err(Error::Domain(format!("non-finite tau {tau}")));
    }

    let bias_out = structure.effective_biases();
    let mut reverse = Vec::with_capacity(b);
    let mut y_min = Vec::with_capacity(b);
    let mut warnings = Vec::new();
    for i in 0..b {
        let v = conv_output(structure, masked.sample(i));
        let acts = layer_activations(structure, &v, &bias_out);
        let r = reverse_index_from_activations(&acts);
        if r.degenerate {
            warnings.push(format!("sample {i}: no positive separation output, routed to unit 1"));
        }
        y_min.push(acts[r.unit - 1]);
        reverse.push(r);
    }

    let units: Vec<usize> = reverse.iter().map(|r| r.unit).collect();
    let metrics = metric_matrix(masked, &units, cfg.units)?;
    let u = metrics.layer_input(&cfg.metric_factors, cfg.metric_slots)?;
    let len = u.len();
    let nm = cfg.metric_units;
    let r_out: Vec<f64> = (0..nm)
        .map(|q| {
            let row = structure.metric.row(q);
            (0..cfg.bias_inputs)
                .map(|d| dot(&row[d * len..(d + 1) * len], &u))
                .sum::<f64>()
        })
        .collect();

    let mut inputs = original.images().data().to_vec();
    for i in 0..b {
        let shift = tau * y_min[i];
        for (j, z) in inputs[i * s..(i + 1) * s].iter_mut().enumerate() {
            *z += shift + tau * cfg.metric_gain * r_out[j % nm];
        }
    }
    let pass = model.target.forward_backward(&inputs, original.labels())?;

    let mut upstream = vec![0.0; b];
    let mut delta = vec![0.0; nm];
    for i in 0..b {
        let gz = &pass.input_grads[i * s..(i + 1) * s];
        upstream[i] = tau * gz.iter().sum::<f64>();
        for (j, g) in gz.iter().enumerate() {
            delta[j % nm] += g;
        }
    }
    delta.iter_mut().for_each(|d| *d *= tau * cfg.metric_gain);

    let (g_conv, g_weight, g_bias) = separation_grads(structure, masked, &reverse, &upstream)?;
    let mut g_metric = Tensor::zeros(structure.metric.shape());
    for q in 0..nm {
        let row = g_metric.row_mut(q);
        for d in 0..cfg.bias_inputs {
            for (gm, ul) in row[d * len..(d + 1) * len].iter_mut().zip(&u) {
                *gm = delta[q] * ul;
            }
        }
    }

    let mut entries = vec![
        (CONV.to_string(), g_conv),
        (WEIGHT.to_string(), g_weight),
        (BIAS.to_string(), g_bias),
        (METRIC.to_string(), g_metric),
    ];
    for (name, t) in [
        (super::target::W1, pass.grads.w1),
        (super::target::B1, pass.grads.b1),
        (super::target::W2, pass.grads.w2),
        (super::target::B2, pass.grads.b2),
    ] {
        entries.push((name.to_string(), t));
    }
    Ok(ForwardResult {
        loss: pass.loss,
        bundle: GradientBundle::new(entries)?,
        reverse,
        y_min,
        upstream,
        metrics,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{batch_pair, small_config, small_model};
    use crate::model::target::{B1, W1, W2};

    #[test]
    fn single_sample_division_is_exact() {
        let cfg = small_config(32, 10);
        let model = small_model(&cfg, 1);
        for seed in 0..10 {
            let (orig, masked) = batch_pair(&cfg, 1, seed);
            let out = forward_backward(&model, &orig, &masked, 1000.0).unwrap();
            let k = out.reverse[0].unit - 1;
            let gw = out.bundle.get(WEIGHT).unwrap().row(k).to_vec();
            let gb = out.bundle.get(BIAS).unwrap();
            let mean_b: f64 = (0..cfg.bias_inputs).map(|d| gb.row(d)[k]).sum::<f64>() / cfg.bias_inputs as f64;
            for (j, x) in masked.sample(0).iter().enumerate() {
                assert!((gw[j] / mean_b - x).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn support_and_identical_bias_copies() {
        let cfg = small_config(64, 10);
        let model = small_model(&cfg, 2);
        let (orig, masked) = batch_pair(&cfg, 6, 3);
        let out = forward_backward(&model, &orig, &masked, 1000.0).unwrap();
        let gw = out.bundle.get(WEIGHT).unwrap();
        let nonzero: Vec<usize> = (0..cfg.units).filter(|&k| gw.row(k).iter().any(|&v| v != 0.0)).collect();
        assert!(nonzero.len() <= 6);
        for k in &nonzero {
            assert!(out.reverse.iter().any(|r| r.unit - 1 == *k));
        }
        let gb = out.bundle.get(BIAS).unwrap();
        for r in &out.reverse {
            let col: Vec<f64> = (0..cfg.bias_inputs).map(|d| gb.row(d)[r.unit - 1]).collect();
            assert!(col.iter().all(|&v| v == col[0]));
        }
        let s = cfg.sample_len();
        for k in 0..cfg.units {
            assert!(gw.row(k)[s..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_tau_matches_bare_target() {
        let mut cfg = small_config(16, 4);
        cfg.metric_factors = crate::model::MetricFactors { mean: 0.0, variance: 0.0, tv: 0.0, index: 1.0 };
        let model = small_model(&cfg, 4);
        let (orig, masked) = batch_pair(&cfg, 5, 5);
        let out = forward_backward(&model, &orig, &masked, 0.0).unwrap();
        let bare = model.target.forward_backward(orig.images().data(), orig.labels()).unwrap();
        for (name, t) in bare.grads.named() {
            let got = out.bundle.get(name).unwrap();
            for (a, b) in got.data().iter().zip(t.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(out.loss, bare.loss);
    }

    fn loss_of(model: &GlobalModel, orig: &ImageBatch, masked: &ImageBatch, tau: f64) -> f64 {
        forward_backward(model, orig, masked, tau).unwrap().loss
    }

    fn param_mut<'a>(m: &'a mut GlobalModel, name: &str) -> &'a mut Tensor {
        match name {
            CONV => &mut m.structure.conv,
            WEIGHT => &mut m.structure.weight,
            BIAS => &mut m.structure.bias,
            METRIC => &mut m.structure.metric,
            W1 => &mut m.target.w1,
            B1 => &mut m.target.b1,
            W2 => &mut m.target.w2,
            _ => &mut m.target.b2,
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = small_config(16, 3);
        let mut model = small_model(&cfg, 6);
        // nonzero metric weights so the metric output reaches the loss
        let mut rng = crate::numeric::SeededRng::new(60);
        model.structure.metric.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, 0.05));
        let (orig, masked) = batch_pair(&cfg, 4, 7);
        let tau = 5.0;
        let out = forward_backward(&model, &orig, &masked, tau).unwrap();
        let h = 1e-6;
        let mut rng = crate::numeric::SeededRng::new(61);
        for (name, grad) in out.bundle.entries() {
            let picks: Vec<usize> = if grad.len() <= 64 {
                (0..grad.len()).collect()
            } else {
                (0..64).map(|_| rng.below(grad.len())).collect()
            };
            for j in picks {
                param_mut(&mut model, name).data_mut()[j] += h;
                let up = loss_of(&model, &orig, &masked, tau);
                param_mut(&mut model, name).data_mut()[j] -= 2.0 * h;
                let down = loss_of(&model, &orig, &masked, tau);
                param_mut(&mut model, name).data_mut()[j] += h;
                let fd = (up - down) / (2.0 * h);
                let an = grad.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()) + 1e-9,
                    "{name}[{j}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = small_config(16, 3);
        let model = small_model(&cfg, 1);
        let (orig, masked) = batch_pair(&cfg, 2, 1);
        let (other, _) = batch_pair(&cfg, 3, 1);
        assert!(forward_backward(&model, &other, &masked, 1.0).is_err());
        let (big, big_masked) = batch_pair(&cfg, 9, 1);
        assert!(forward_backward(&model, &big, &big_masked, 1.0).is_err());
        assert!(forward_backward(&model, &orig, &masked, f64::NAN).is_err());
    }
}
