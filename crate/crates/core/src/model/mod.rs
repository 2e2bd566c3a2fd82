//! The malicious global model: zero-gradient convolution, improved separation
//! layer (weight layer plus bias layer), metric layer, and a small target
//! classifier, with an exact forward pass and closed-form backward pass.

mod bundle;
pub mod container;
mod forward;
mod metric;
mod structure;
pub mod target;

pub use bundle::{GradientBundle, ObservedGradients};
pub use container::Container;
pub use forward::{conv_output, forward_backward, layer_activations, separation_grads, ForwardResult};
pub use metric::{metric_matrix, MetricMatrix};
pub use structure::{
    build_structure, calibrate_laplace, reverse_index_from_activations, unit_level, InferenceStructure, MetricFactors,
    ReverseIndex, StructureConfig, BIAS, CONV, METRIC, WEIGHT,
};
pub use target::{TargetGrads, TargetModel, TargetPass};


use crate::error::{Error, Result};
use crate::numeric::{LaplaceParams, SeededRng, Tensor};

/// Inference structure plus target model, as distributed by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub structure: InferenceStructure,
    pub target: TargetModel,
}

impl GlobalModel {
    pub fn new(cfg: &StructureConfig, hidden: usize, classes: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            structure: build_structure(cfg)?,
            target: TargetModel::new(cfg.sample_len(), hidden, classes, rng)?,
        })
    }

    /// All parameters in bundle order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<_> = self.structure.params().into_iter().collect();
        out.extend(self.target.params());
        out
    }

    pub fn to_container(&self) -> Container {
        let c = self.structure.config();
        let f = c.metric_factors;
        let metadata = [
            ("kind", "global-model".to_string()),
            ("channels", c.channels.to_string()),
            ("height", c.height.to_string()),
            ("width", c.width.to_string()),
            ("units", c.units.to_string()),
            ("w0", c.w0.to_string()),
            ("bias_inputs", c.bias_inputs.to_string()),
            ("laplace_mu", c.laplace.mu.to_string()),
            ("laplace_s", c.laplace.s.to_string()),
            ("metric_units", c.metric_units.to_string()),
            ("mean_factor", f.mean.to_string()),
            ("variance_factor", f.variance.to_string()),
            ("tv_factor", f.tv.to_string()),
            ("index_factor", f.index.to_string()),
            ("metric_gain", c.metric_gain.to_string()),
            ("metric_slots", c.metric_slots.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let tensors = self
            .params()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Container { metadata, tensors }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "global-model" {
            return Err(Error::Parse("container does not hold a global model".into()));
        }
        let cfg = StructureConfig {
            channels: c.meta_parse("channels")?,
            height: c.meta_parse("height")?,
            width: c.meta_parse("width")?,
            units: c.meta_parse("units")?,
            w0: c.meta_parse("w0")?,
            bias_inputs: c.meta_parse("bias_inputs")?,
            laplace: LaplaceParams::new(c.meta_parse("laplace_mu")?, c.meta_parse("laplace_s")?)?,
            metric_units: c.meta_parse("metric_units")?,
            metric_factors: MetricFactors {
                mean: c.meta_parse("mean_factor")?,
                variance: c.meta_parse("variance_factor")?,
                tv: c.meta_parse("tv_factor")?,
                index: c.meta_parse("index_factor")?,
            },
            metric_gain: c.meta_parse("metric_gain")?,
            metric_slots: c.meta_parse("metric_slots")?,
        };
        let structure = InferenceStructure::from_parts(
            cfg,
            c.tensor(CONV)?.clone(),
            c.tensor(WEIGHT)?.clone(),
            c.tensor(BIAS)?.clone(),
            c.tensor(METRIC)?.clone(),
        )?;
        let target = TargetModel {
            w1: c.tensor(target::W1)?.clone(),
            b1: c.tensor(target::B1)?.clone(),
            w2: c.tensor(target::W2)?.clone(),
            b2: c.tensor(target::B2)?.clone(),
        };
        let (h, d) = (target.w1.shape()[0], target.w1.shape().get(1).copied().unwrap_or(0));
        if d != structure.config().sample_len()
            || target.b1.shape() != [h]
            || target.w2.shape().len() != 2
            || target.w2.shape()[1] != h
            || target.b2.shape() != [target.w2.shape()[0]]
        {
            return Err(Error::Shape("inconsistent target-model tensors".into()));
        }
        Ok(Self { structure, target })
    }
}

impl GradientBundle {
    /// Persists the gradient values (never the victim bookkeeping).
    pub fn to_container(&self) -> Container {
        Container {
            metadata: vec![("kind".into(), "gradients".into())],
            tensors: self.entries().to_vec(),
        }
    }
}

impl ObservedGradients {
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "gradients" {
            return Err(Error::Parse("container does not hold gradients".into()));
        }
        Ok(Self::new(c.tensors.clone()))
    }
}
