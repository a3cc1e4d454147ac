//! Minimal reverse-mode differentiation over dense `f64` arrays, the Adam
//! optimizer, and a finite-difference gradient checker.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, TrainLog};
pub use gradcheck::{check_gradients, GradCheck, GradCheckReport};
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
