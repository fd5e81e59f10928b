//! Core library for skeleton-based gait recognition with periodic dynamics.
//!
//! Everything in this crate is pure computation over `f64` buffers: a small
//! reverse-mode autodiff tape ([`diffcore`]), the temporal branch that
//! parameterizes gait periodicity through a real DFT ([`periodic`]), the
//! multi-scale dense graph convolution ([`graph`]), the assembled model with
//! its losses ([`model`]), evaluation metrics ([`metrics`]), and the skeleton
//! sequence handling plus synthetic gait generator ([`data`], [`synth`]).
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, the CLI and
//! the training driver live in the companion `gaitphase` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod diffcore;
pub mod error;
mod fmath;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod periodic;
pub mod rng;
pub mod synth;

pub use diffcore::array::NdArray;
pub use diffcore::optim::{Adam, ParamId, ParamStore};
pub use diffcore::tape::{NodeId, Tape};
pub use error::CoreError;
