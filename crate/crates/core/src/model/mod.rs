//! Toy decoder-only transformer with pluggable attention.
//!
//! Pre-normalization residual blocks, GELU feed-forward, learned absolute position
//! embeddings indexed by the (possibly remapped) position of each token.

mod config;
mod forward;
mod ops;
mod train;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    forward, generate, generate_with, perplexity, response_perplexities, span_perplexity, AttentionRecord,
    CostCounters, Decoder, ForwardTrace, GenerateOptions, HiddenRecord, TraceSpec,
};
pub use train::{
    loss_and_grad, sequence_loss, train_toy, training_logits, Optimizer, TrainOptions, TrainReport,
};
pub use weights::{write_atomic, LayerWeights, ModelWeights};
