//! Minimal f64 neural-network kit: NCHW tensors, the fixed layer set, an LSTM
//! cell, losses, Adam, finite-difference gradient checks and a weight format.

mod adam;
mod conv;
mod gradcheck;
mod layer;
mod loss;
mod lstm;
mod sequential;
mod tensor;
mod weights;

pub use adam::{adam_update, AdamState};
pub use gradcheck::{
    grad_check, relative_error, GradCheckReport, GRAD_CHECK_FLOOR, GRAD_CHECK_STEP,
};
pub use layer::{Cache, Layer, LayerSpec, Mode};
pub use loss::{cross_entropy, mse_loss, one_hot, Loss};
pub use lstm::{lstm_step, LstmState};
pub use sequential::{AuxConcat, Sequential, Trace};
pub use tensor::Tensor;
pub use weights::{
    decode_weights, encode_weights, load_weights, save_weights, TensorEntry, WeightManifest,
    WEIGHT_MAGIC,
};
