//! The denoising network: architecture, parameters, forward and backward passes.

pub mod arch;
mod denoise;
mod forward;
pub mod model;
mod prepare;
mod serialize;
#[cfg(test)]
mod reference_tests;

use thiserror::Error;

use crate::image_io::ImageError;
use crate::nn::NnError;
use crate::patch::PatchError;

pub use arch::{count_params, ArchDescriptor, SlSpec, Variant, WEIGHT_NET_DEPTH};
pub use denoise::{denoise, denoise_with, DenoiseOptions, DenoiseResult, DEFAULT_CHUNK};
pub use forward::{
    apply_column_weights, backward_batch, forward_batch, mse_loss, weight_net_forward, BnUpdates, Trace,
};
pub use model::{Branch, Fusion, ModelParams, Tbr, WeightNet};
pub use prepare::Prepared;
pub use serialize::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("model expects {model}-channel images, got {image}")]
    Channels { model: usize, image: usize },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("not a model file (bad magic bytes)")]
    Magic,
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("model file truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("model file holds {found} tensors, expected {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("tensor {index} is named {found:?}, expected {expected:?}")]
    TensorName {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
