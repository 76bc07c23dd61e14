//! Toy text-conditioned denoiser, its training loops and the edit pipeline.

mod denoiser;
mod pipeline;
pub mod tape;
mod train;

pub use denoiser::{
    clip_to_tokens, time_embedding, Block, ForwardPass, LayerNorm,
    init_image_model, init_image_model_with_std, inflate, load_model, save_model, tokens_to_clip_layout, DenoiserConfig,
    Role, Tensor, TensorMut, ToyDenoiser, Tuning, INIT_STD,
};
pub use pipeline::{edit, reconstruction_mse, roundtrip, RoundTrip};
pub use train::{
    evaluation_loss, finetune, finetune_full, finetune_lora, finetune_save, loss_curve_csv, pretrain, training_gradients, Adam,
    Gradients, LossPoint, PretrainHyper, TrainHyper,
};
