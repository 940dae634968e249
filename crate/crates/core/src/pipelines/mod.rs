//! End-to-end pretraining: the two models, data, optimizer, training loop and
//! checkpoints.

mod checkpoint;
mod data;
mod model;
mod optim;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, RngState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use data::{random_resized_crop, Corpus, CropConfig};
pub use model::{build_model, ForwardOutput, Model, ModelConfig, PipelineKind, Reconstruction};
pub use optim::{cosine_lr, decays, scaled_lr, AdamW, AdamWConfig};
pub use train::{converged_loss, epoch_means, write_curve, CurveRow, TrainConfig, Trainer, CURVE_HEADER};
