//! Baseline U-Net and the box-gated variant.
//!
//! Levels are numbered from 0 (full resolution) to `depth - 1`. Level `l`
//! has `base_filters * 2^l` filters; the bottleneck sits at `2^depth` times
//! the base. Every convolution block is Conv -> ReLU -> BatchNorm ->
//! SpatialDropout. In the gated variant the skip at level `l` is multiplied by
//! `sigmoid(conv(conv(maxpool^l(B))))` where `B` is the 32-channel box map.

mod checkpoint;
mod layers;
mod network;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use layers::{
    max_pool2, max_pool2_backward, sigmoid, softmax_backward, softmax_channels, BatchNorm, Conv2d, ConvTranspose2x2,
    Param, BN_EPS,
};
pub use network::{
    image_batch, predict_mask, target_batch, ConvBlock, ForwardCache, Gate, Network, NetworkConfig, PriorPyramid,
    Variant,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
