//! Perceptual transcoding loss toolkit.
//!
//! A pristine source `S` is compressed once into a non-pristine reference `R`
//! and transcoded again into `D`. The quality network scores `D` using `R` only
//! as context, is trained to rank patches by their fidelity to `S`, and then
//! serves as a loss term inside a toy rate-distortion optimization loop.
//!
//! Module map:
//! - [`media_io`]: clips, patches, Y4M and PNG frame directories
//! - [`synth`]: seeded procedural source clips
//! - [`degrade`]: DCT degrader, external encoder adapter, S→R→D corpus
//! - [`sampler`]: co-located patch pairs, proxy labels, ranked pairs
//! - [`net`]: spatial pyramid + selective scan quality network with gradients
//! - [`train`]: Siamese hinge ranking training
//! - [`codec`]: loss mixing and the overfitted coordinate-network codec
//! - [`eval`]: PSNR, SSIM, BD-rate, reports
//! - [`cli`]: the `ptloss` command line

pub mod error;
pub mod media_io;
pub mod synth;
pub mod degrade;
pub mod eval;
pub mod net;
pub mod sampler;
pub mod optim;
pub mod train;
pub mod codec;
pub mod cli;

pub use error::{Error, Result};
