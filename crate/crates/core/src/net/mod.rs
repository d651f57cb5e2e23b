//! Small differentiable function approximators: dense layers with optional
//! spectral normalization, Mish MLPs with exact reverse-mode gradients, the
//! sinusoidal time embedding and an Adam optimizer.

mod activation;
mod dense;
mod embed;
mod grads;
mod mlp;
mod optim;

pub use activation::{mish, mish_grad_scalar, mish_scalar, sigmoid, softplus};
pub use dense::{dot, spectral_normalize, DenseLayer, SpectralState};
pub use embed::{embed_time, TimeEmbedding};
pub use grads::ParamGrads;
pub use mlp::{Mlp, MlpTrace, Parameterized};
pub use optim::Adam;
