//! Compressive channel estimation and localization for hybrid mmWave MIMO links.
//!
//! The crate covers the full chain used to evaluate joint channel estimation and
//! positioning in an indoor deployment:
//!
//! * [`channel`]: uniform rectangular array responses and the multi-tap geometric channel.
//! * [`training`]: hybrid training codebooks, Hadamard pilots, received-block simulation,
//!   Cholesky whitening and the factored sensing operator.
//! * [`dictionaries`]: the five per-dimension dictionaries (AoA x/y, AoD x/y, delay).
//! * [`solver`]: multidimensional OMP over the factored dictionaries and a
//!   flattened-dictionary OMP baseline.
//! * [`localization`]: path classification and the closed-form position / clock-offset solve.
//! * [`scene`]: a synthetic two-room scene with first-order image-source tracing.
//! * [`harness`]: experiment configuration, end-to-end runs, metrics and summaries.

// `!(x > 0.0)` is used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dictionaries;
pub mod error;
pub mod harness;
pub mod localization;
pub mod scene;
pub mod solver;
pub mod training;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
