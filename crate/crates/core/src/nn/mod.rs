//! Minimal dense layers with hand-written backward passes.
//!
//! Activations are 2-D matrices: one row per token (or per pixel), one column
//! per channel. Layers cache what their backward pass needs during `forward`
//! and add parameter gradients into a [`ParamStore`].

mod attention;
mod conv;
mod layers;
mod optim;
mod store;
pub mod weights;

pub use attention::CausalSelfAttention;
pub use conv::{extract_patches, ConvTranspose2d};
pub use layers::{BatchNorm, Gelu, LayerNorm, LeakyRelu, Linear, Relu, Sigmoid};
pub use optim::{Adam, AdamConfig};
pub use store::{Entry, ParamId, ParamStore, Role};

use ndarray::NdFloat;

/// Scalar type the model is generic over (`f32` for training, `f64` for
/// finite-difference oracles).
pub trait Float: NdFloat + Default {}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
pub fn cast<F: Float>(x: f64) -> F {
    <F as num_traits::NumCast>::from(x).expect("finite constant")
}

/// Train mode uses batch statistics and updates running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Deterministic Gaussian initialiser shared by all components.
pub struct Init {
    rng: rand_chacha::ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Init {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Float>(&mut self, shape: &[usize], std: f64) -> ndarray::ArrayD<F> {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| cast(dist.sample(&mut self.rng))).collect();
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape")
    }
}
