//! The segmentation network: configuration, layers, loss, parameter
//! accounting and checkpoints.

pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod count;
pub mod encoder;
pub mod layers;
pub mod loss;
pub mod network;
pub mod params;

pub use attention::{sdpa, FeedForward, MultiHeadAttention, TransBlock};
pub use check::{gradcheck_input_name, gradcheck_model};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{derive_dims, AttentionScale, LevelDim, LevelDims, ModelConfig};
pub use count::{count_params, ParamCount, ParamGroup};
pub use loss::{combined_loss, loss_parts, EmptyClassMask, LossConfig, LossParts};
pub use network::{argmax_channels, ForwardOutput, SegModel};
pub use params::{Binding, ParamId, ParamStore};
