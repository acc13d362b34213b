//! Dense reverse-mode differentiation and the graph-attention + LSTM model.

pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use model::{GraphInput, LstmInput, ModelConfig, ModelParams};
pub use optim::{AdamConfig, AdamState};
pub use tape::{Csr, Tape, Var};
pub use tensor::Tensor;
