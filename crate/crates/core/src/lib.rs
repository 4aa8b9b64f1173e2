//! Core of a subcellular semantic segmentation stack built on two frozen
//! image encoders (a SAM-style structure encoder and an MAE-style texture
//! encoder).
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece:
//! a small reverse-mode autodiff [`tape`], the feature alignment and fusion
//! module ([`fafm`]), the prototype-driven class prompt encoder
//! ([`class_prompt`]), a lightweight promptable mask decoder ([`maskhead`]),
//! the training objective ([`objective`]), evaluation [`metrics`] and the
//! training/evaluation [`engine`]. File IO and the command line live in the
//! companion `scsam` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod class_prompt;
pub mod codec;
pub mod emdata;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod fafm;
pub mod grid;
pub mod maskhead;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod synthetic;
pub mod tape;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
