//! Simulator and rare-event toolkit for a damped logarithmic Schrodinger
//! equation driven by white-noise dispersion on a periodic box.
//!
//! The integrator splits the dynamics into two exactly solvable flows: a
//! Fourier-side dispersion group and a pointwise log-nonlinear flow with
//! damping and an optional convolution potential. On top of the integrator
//! sit a controlled (skeleton) solver sharing the same stepping core, a
//! penalty-based minimum action method, and Monte Carlo studies for exit
//! probabilities and asymptotic scalings.

pub mod dispersion;
pub mod error;
pub mod exec;
pub mod field;
pub mod mam;
pub mod noise;
pub mod nonlinear;
pub mod rare_event;
pub mod sde;
pub mod skeleton;
pub mod snapshot;
pub mod util;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
