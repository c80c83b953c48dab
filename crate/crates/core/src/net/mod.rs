//! Network building blocks, the U-Net and its checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod unet;

pub use checkpoint::{decode_weights, encode_weights, read_weights, write_weights};
pub use layers::{ConvShape, UpConvShape};
pub use tensor::Tensor5;
pub use unet::{unet_forward, Gradients, LayerKind, LayerSlot, NetworkConfig, NetworkWeights, UNet};
