//! Minimal deterministic reverse-mode differentiation and optimization on
//! dense `f64` tensors: just enough for small MLP encoders, decoders and
//! classifiers.

pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, gradient_check_report, GradCheckReport};
pub use optim::{optimizer_step, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::ParameterSet;
pub use rng::{derive_seed, streams, SeededRng};
pub use tape::{softmax_rows, Bound, OpRecord, Tape, Var};
pub use tensor::Tensor;
