use crate::error::{Error, Result};
use crate::numeric::{SeededRng, Tensor};

pub const W1: &str = "target.w1";
pub const B1: &str = "target.b1";
pub const W2: &str = "target.w2";
pub const B2: &str = "target.b2";

/// Fixed offset subtracted from every input before the hidden layer.
pub const INPUT_CENTER: f64 = 0.5;

/// One-hidden-layer ReLU classifier with softmax cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    /// `hidden x inputs`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `classes x hidden`.
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Gradients of the target parameters, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrads {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Loss, parameter gradients and input gradients of one batch.
#[derive(Debug, Clone)]
pub struct TargetPass {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grads: TargetGrads,
    /// `dL/dinput`, `B x inputs` row-major.
    pub input_grads: Vec<f64>,
}

impl TargetModel {
    /// He-initialised hidden layer, zero biases.
    pub fn new(inputs: usize, hidden: usize, classes: usize, rng: &mut SeededRng) -> Result<Self> {
        if inputs == 0 || hidden == 0 || classes < 2 {
            return Err(Error::Shape(format!(
                "target model needs inputs, hidden >= 1 and classes >= 2; got {inputs}, {hidden}, {classes}"
            )));
        }
        let s1 = (2.0 / inputs as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let w1 = (0..hidden * inputs).map(|_| rng.normal(0.0, s1)).collect();
        let w2 = (0..classes * hidden).map(|_| rng.normal(0.0, s2)).collect();
        Ok(Self {
            w1: Tensor::from_vec(&[hidden, inputs], w1)?,
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::from_vec(&[classes, hidden], w2)?,
            b2: Tensor::zeros(&[classes]),
        })
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [(W1, &self.w1), (B1, &self.b1), (W2, &self.w2), (B2, &self.b2)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            (W1, &mut self.w1),
            (B1, &mut self.b1),
            (W2, &mut self.w2),
            (B2, &mut self.b2),
        ]
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        let d = self.inputs();
        (0..self.hidden())
            .map(|h| {
                let row = &self.w1.data()[h * d..(h + 1) * d];
                self.b1.data()[h] + row.iter().zip(x).map(|(w, v)| w * (v - INPUT_CENTER)).sum::<f64>()
            })
            .collect()
    }

    fn logits(&self, hid: &[f64]) -> Vec<f64> {
        let nh = self.hidden();
        (0..self.classes())
            .map(|c| {
                let row = &self.w2.data()[c * nh..(c + 1) * nh];
                self.b2.data()[c] + row.iter().zip(hid).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Class probabilities of one flattened input.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let hid: Vec<f64> = self.hidden_pre(x).into_iter().map(|v| v.max(0.0)).collect();
        softmax(&self.logits(&hid))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        let mut best = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = c;
            }
        }
        best
    }

    /// Forward and backward pass over `B` flattened inputs.
    pub fn forward_backward(&self, inputs: &[f64], labels: &[usize]) -> Result<TargetPass> {
        let d = self.inputs();
        let (nh, nc) = (self.hidden(), self.classes());
        let b = labels.len();
        if b == 0 || inputs.len() != b * d {
            return Err(Error::Shape(format!(
                "{} input values for {b} labels of width {d}",
                inputs.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= nc) {
            return Err(Error::Shape(format!("label {l} out of {nc} classes")));
        }
        let mut grads = TargetGrads {
            w1: Tensor::zeros(&[nh, d]),
            b1: Tensor::zeros(&[nh]),
            w2: Tensor::zeros(&[nc, nh]),
            b2: Tensor::zeros(&[nc]),
        };
        let mut input_grads = vec![0.0; b * d];
        let mut loss = 0.0;
        let inv_b = 1.0 / b as f64;
        for (i, &label) in labels.iter().enumerate() {
            let x = &inputs[i * d..(i + 1) * d];
            let pre = self.hidden_pre(x);
            let hid: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let logits = self.logits(&hid);
            let p = softmax(&logits);
            loss -= log_softmax_at(&logits, label) * inv_b;

            let dlogit: Vec<f64> = (0..nc)
                .map(|c| (p[c] - if c == label { 1.0 } else { 0.0 }) * inv_b)
                .collect();
            let mut dhid = vec![0.0; nh];
            for c in 0..nc {
                grads.b2.data_mut()[c] += dlogit[c];
                let gw2 = &mut grads.w2.data_mut()[c * nh..(c + 1) * nh];
                let w2 = &self.w2.data()[c * nh..(c + 1) * nh];
                for h in 0..nh {
                    gw2[h] += dlogit[c] * hid[h];
                    dhid[h] += dlogit[c] * w2[h];
                }
            }
            let gx = &mut input_grads[i * d..(i + 1) * d];
            for h in 0..nh {
                if pre[h] <= 0.0 {
                    continue;
                }
                let dh = dhid[h];
                grads.b1.data_mut()[h] += dh;
                let gw1 = &mut grads.w1.data_mut()[h * d..(h + 1) * d];
                let w1 = &self.w1.data()[h * d..(h + 1) * d];
                for j in 0..d {
                    gw1[j] += dh * (x[j] - INPUT_CENTER);
                    gx[j] += dh * w1[j];
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Domain(format!("non-finite loss {loss}")));
        }
        Ok(TargetPass {
            loss,
            grads,
            input_grads,
        })
    }
}

impl TargetGrads {
    pub fn named(&self) -> [(&'static str, &Tensor); 4] {
        [(W1, &self.w1), (B1, &self.b1), (W2, &self.w2), (B2, &self.b2)]
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_at(logits: &[f64], c: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    logits[c] - m - z.ln()
}
