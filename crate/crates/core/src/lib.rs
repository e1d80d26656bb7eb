//! Numerical core for multi-derivative video pulse measurement.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (only `alloc` is required). File formats, the command
//! line and anything touching the filesystem live in the `multideriv` crate.
//!
//! Module map:
//!
//! * [`signal`]: pulse waveforms, discrete derivatives, the parametric beat generator.
//! * [`render`]: dichromatic-reflection video synthesis of a pulsing skin patch.
//! * [`preprocess`]: difference frames, difference-of-difference frames, windowing.
//! * [`autodiff`]: dense tensors, reverse-mode differentiation, Adam.
//! * [`model`]: the attention and plain conv+recurrent architectures and their loss.
//! * [`train`]: the seeded minibatch training loop.
//! * [`metrics`]: heart rate, fiducials, LVET, MAE and Bland-Altman statistics.
//! * [`eval`]: clip-level evaluation that ties predictions to the metrics.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod render;
pub mod seed;
pub mod signal;
pub mod train;
