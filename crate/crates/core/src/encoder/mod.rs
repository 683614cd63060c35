//! Trainable embedding head over frozen backbone patch features.

mod data;
mod head;
mod loss;
mod train;

pub use data::{augment_features, Sample, TrainingDataset};
pub use head::{
    gelu, gelu_derivative, Embedded, EncoderHead, ForwardCache, Gradients, Layer, BACKBONE_DIM,
    DEFAULT_DROPOUT, DEFAULT_LAYER_DIMS, EMBEDDING_DIM,
};
pub use loss::{contrastive_loss, similarity_by_label, LossConfig, LossOutput};
pub use train::{
    evaluate, train, train_step, validation_samples, write_loss_log, Adam, EpochLog, EvalStats,
    TrainConfig, TrainOutcome, TrainState,
};
