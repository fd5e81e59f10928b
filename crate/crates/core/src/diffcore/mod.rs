//! Reverse-mode differentiable computation core.
//!
//! [`array`] holds the dense f64 buffer type and its kernels, [`tape`] the
//! Wengert-list graph with forward ops and backward rules, [`fft`] the real
//! DFT used both as a tape primitive and as a standalone transform, and
//! [`optim`] the parameter store, Adam and the cosine learning-rate schedule.

pub mod array;
pub mod fft;
pub mod optim;
pub mod tape;
