//! Human-object interaction detection by steering a frozen generator with
//! candidate-specific visual kernels.

// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod perception;
pub mod raster;
pub mod scalar;
pub mod steering;
pub mod tensor;
pub mod train;
pub mod types;

use rand::SeedableRng;

/// Deterministic generator used for every seeded stream in the crate.
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub use error::{Error, Result};

pub type Model32 = model::HoiModel<f32>;
pub type Model64 = model::HoiModel<f64>;
pub type Mat32 = tensor::Mat<f32>;
pub type Mat64 = tensor::Mat<f64>;
pub type Sample32 = data::HoiSample<f32>;
pub type Sample64 = data::HoiSample<f64>;
pub type Triplet32 = types::HoiTriplet<f32>;
pub type Triplet64 = types::HoiTriplet<f64>;
