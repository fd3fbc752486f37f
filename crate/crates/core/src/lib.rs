//! Lightweight learned image denoising with instance adaptation.
//!
//! Each pixel is denoised from the `k` nearest patches around it at two
//! scales. A small network of separable layers mixes each group, and the
//! denoised patches are averaged back into the image. Trained models can be
//! adapted to related clean images or to the noisy input itself.
//!
//! The guide under `book/` walks through each module.

pub mod image_io;
pub mod net;
pub mod nn;
pub mod patch;
pub mod real;
pub mod selftest;
pub mod synth;
pub mod train;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/images.md")]
    struct Images;
    #[doc = include_str!("../../../book/src/patches.md")]
    struct Patches;
    #[doc = include_str!("../../../book/src/separable.md")]
    struct Separable;
    #[doc = include_str!("../../../book/src/network.md")]
    struct Network;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
