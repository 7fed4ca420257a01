//! Pruned-denoiser fine-tuning with concept unlearning, posed as a
//! penalized bilevel problem and solved with a first-order double loop.
//!
//! The crate is generic over the floating-point [`Scalar`]; the `*64`
//! aliases below fix it to `f64`, which is what every experiment uses.

pub mod bilevel;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fd;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pruning;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use diffusion::{DiffusionBatch, NoiseSchedule};
pub use error::{Error, Result};
pub use params::{ParamKind, ParamStore, StoreId};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
