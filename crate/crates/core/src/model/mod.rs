//! The detection network and its checkpoints.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    config_path, first_divergent_field, load_backbone_into, load_checkpoint, read_checkpoint_config, save_checkpoint,
    BACKBONE_FIELDS,
};
pub use config::{ClipPooling, DecoderKind, EncoderKind, ModelConfig};
pub use network::{
    decays, is_backbone_path, linear_softmax_pool, AstSed, ForwardOutput, FrameSequence, FrameSource, Predictions,
    TokenGrid, BACKBONE_PREFIXES,
};
