//! Minimal dense-tensor algebra with reverse-mode gradients.
//!
//! Tensors are row-major contiguous buffers behind reference-counted nodes.
//! Forward ops eagerly compute data and record a backward closure; calling
//! [`Tensor::backward`] on a scalar loss walks the graph in reverse
//! topological order and accumulates gradients into every `requires_grad`
//! leaf. The engine is generic over [`Scalar`] so the same code runs in
//! single precision for training and double precision for gradient
//! checking.

mod gradcheck;
pub mod nn;
pub mod ops;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_multi, GradcheckReport};
pub use tensor::{Tensor, TensorId};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Numeric precision selector for a run.
///
/// Gradient checking is only valid in [`PrecisionMode::Double`]: central
/// differences with h = 1e-5 lose all signal in f32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    Single,
    Double,
}

impl std::str::FromStr for PrecisionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" | "f32" => Ok(PrecisionMode::Single),
            "double" | "f64" => Ok(PrecisionMode::Double),
            other => Err(format!("unknown precision mode: {other}")),
        }
    }
}

/// Element type of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    const MODE: PrecisionMode;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const MODE: PrecisionMode = PrecisionMode::Single;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const MODE: PrecisionMode = PrecisionMode::Double;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// The one RNG used for initialization and sampling.
///
/// All randomness in the crate is threaded through an explicit `Rng` handle;
/// there is no ambient global generator. ChaCha8 state can be captured and
/// restored exactly, which checkpointing relies on.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate RNG from a u64 seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Snapshot of the RNG state, serializable for checkpoints.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn rng_state(rng: &Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn rng_restore(state: &RngState) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}
