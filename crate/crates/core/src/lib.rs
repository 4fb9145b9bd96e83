//! Certified robustness of neural networks to geometric image transformations.
//!
//! The pipeline mirrors how a geometric attack acts on an image: a spatial
//! transformation with parameters theta moves the sampling grid, bilinear
//! interpolation resamples the pixels, and a pixelwise contrast/brightness
//! change rescales them. Certification runs that pipeline on *intervals*:
//! every step is replaced by a sound interval transformer, the network is
//! evaluated with interval bound propagation, and a verdict holds for every
//! parameter choice inside the certified region. Training against the same
//! interval pipeline (certified training) makes networks certifiable in the
//! first place.

pub mod certify;
pub mod data;
pub mod error;
pub mod geometry;
pub mod interp;
pub mod interval;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::GeoCertError;
pub use interval::{Interval, Scalar};

/// Default scalar type for certification and data loading.
pub type F = f64;

/// Interval over the default scalar type.
pub type Iv = Interval<f64>;
