//! diffup-core: few-shot segmentation as conditional diffusion over
//! backbone-agnostic prior maps.
//!
//! The crate is sans-IO and `no_std` compatible (it needs `alloc`). Every
//! stochastic operation takes an explicit seed, so the whole pipeline is a
//! pure function of its inputs:
//!
//! synthetic episodes ([`synthshapes`]) -> frozen feature pyramids
//! ([`encoders`]) -> cosine prior maps ([`baft`]) -> mean/variance fusion
//! ([`uapf`]) -> a diffusion decoder that only ever sees dimensionless
//! priors ([`uqdd`], [`diffusion`]) -> training ([`trainer`]) and metrics
//! ([`evalkit`]).
//!
//! Disable the default `std` feature for `no_std` targets; `std` only
//! switches on runtime SIMD detection in the GEMM kernels and the platform
//! float intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baft;
pub mod diffusion;
pub mod encoders;
mod error;
pub mod evalkit;
pub mod grid;
pub mod nn;
pub mod rng;
pub mod synthshapes;
pub mod tensor;
pub mod trainer;
pub mod uapf;
pub mod uqdd;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};

/// Numerical epsilon used in every cosine denominator.
pub const EPS_NUM: f64 = 1e-8;
