//! Desk-scale image/text encoders and attention fusion.

mod checkpoint;
mod encoders;
mod fusion;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_MAGIC,
};
pub use encoders::{
    encode_image, encode_text, EncodedImage, EncodedPair, EncodedText, Model, ModelConfig, Vocab,
    UNK,
};
pub use fusion::{attn, attn_values, fuse_all, FuseOptions, Fusion, GLOBAL_ATTN_TEMPERATURE};
