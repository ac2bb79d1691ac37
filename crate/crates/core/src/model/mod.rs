//! Prescription networks: architecture specs, parameters, forward passes,
//! losses, training and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod params;
pub mod spec;
pub mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint,
    RngState,
};
pub use loss::{loss_aux, loss_main, loss_total, record_losses, LossVars};
pub use network::{forward, predict_batched, record_forward, ForwardPass, Mode, ModelOutputs};
pub use params::{build_model, inventory, ModelParameters};
pub use spec::{ArchitectureSpec, DropoutRates, Variant};
pub use train::{
    evaluate_losses, predict_prescription, train, write_history_csv, EpochRecord, OptimizerConfig, OptimizerState,
    Prescription, TrainConfig, TrainOutcome,
};
