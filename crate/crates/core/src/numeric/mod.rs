//! Deterministic numeric substrate shared by every other module.

mod dist;
mod rng;
mod stats;
mod tensor;

pub use dist::{fit_laplace, half_normal_sigma, laplace_cdf, laplace_quantile, HalfNormalEstimate, LaplaceParams};
pub use rng::SeededRng;
pub use stats::{channel_stats, l2_norm, l2_norm_all, ChannelStats};
pub use tensor::Tensor;
