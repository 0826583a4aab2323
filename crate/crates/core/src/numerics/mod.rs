//! Dense arrays, reverse-mode differentiation and training utilities.

pub mod adam;
pub mod bigru;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use bigru::{bigru_encode, init_bigru, BackwardState};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, FLOOR_FACTOR, KINK_TOL};
pub use layers::{dense, dropout};
pub use params::ParamStore;
pub use rng::{RngStreams, StreamRng};
pub use tape::{Gradients, GruVars, Segments, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
mod tape_tests;
