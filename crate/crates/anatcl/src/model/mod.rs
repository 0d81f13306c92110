//! Encoder, optimizer, checkpointing, and the pretraining loop.

pub mod adam;
pub mod checkpoint;
pub mod encoder;
pub mod train;

pub use adam::{adam_step, effective_lr, AdamState};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use encoder::{
    encode_on_tape, forward, forward_on_tape, project_on_tape, Affine, EncoderConfig, ParamVars,
    Parameters,
};
pub use train::{
    batch_loss, mean_global_descriptors, pretrain, write_loss_trace, BatchInputs, PretrainOutput,
    TrainConfig,
};
