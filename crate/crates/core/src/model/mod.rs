//! The audio classifier: convolutional front encoder with attention blocks,
//! conformer encoder, BiGRU decoder and the three-branch trial block head.

mod blocks;
mod config;
mod conformer;
mod encoder;
mod net;
mod trial;

pub use blocks::{FeedForward, ResidualAttentionBlock};
pub use config::{preset_config, ReneConfig, StageShapes, TrialKernels};
pub use conformer::{ConformerBlock, ConformerBlockCache, ConformerEncoder, ConvModule};
pub use encoder::WhisperEncoder;
pub use net::{bigru_decode, map_geometry, rene_forward, ReneModel, ReneNet, ReneOutput};
pub use trial::{receptive_field, TrialBlock};
