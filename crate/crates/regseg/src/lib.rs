//! Joint deformable registration, few-shot segmentation, and pixel-wise
//! adversarial confidence training on synthetic 2-D scenes.
//!
//! The crate is organised around a minimal reverse-mode engine ([`tape`])
//! over dense [`grid::Grid`] values. On top of it sit the spatial
//! transformer ([`warp`]), the loss zoo ([`losses`]), the three small
//! encoder-decoder networks ([`nets`]), a seeded synthetic corpus generator
//! ([`synthdata`]), the alternating training loop ([`trainer`]), and the
//! Dice evaluation / ablation harness ([`evalkit`]).

pub mod error;
pub mod grid;
pub mod util;

mod conv;
mod sampling;

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod trainer;
pub mod checksuite;
pub mod evalkit;
pub mod losses;
pub mod nets;
pub mod rsf;
pub mod synthdata;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{Grid, Scalar};
