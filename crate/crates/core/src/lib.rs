//! Numerical laboratory for controlled time-stepping schemes for incompressible
//! flow systems in Leray projection form, including generalizations whose
//! second-order part is a degenerate (Hörmander-type) diffusion.
//!
//! The crate is organized around the pieces of the scheme:
//!
//! * [`grid`] — domains (periodic torus / truncated box), sampled fields,
//!   Sobolev and weighted norms, derivative stencils, snapshot I/O.
//! * [`kernels`] — Poisson kernel, heat multiplier / Gaussian convolution,
//!   Leray source and projection, and the estimation constants `C_K`, `C_s`.
//! * [`hormander`] — polynomial vector-field algebra, Lie brackets, rank
//!   certification of the spanning condition, convection application, `C_B`.
//! * [`semigroup`] — diffusion semigroup application (spectral or explicit
//!   sub-stepped), Euler-Maruyama sampling, kernel density estimation and
//!   density-envelope fitting.
//! * [`picard`] — the per-time-step local solver: first iterate, functional
//!   increments, contraction records, the step-size bound, momentum residual.
//! * [`control`] — control-function strategies and the growth ledger.
//! * [`scheme`] — the global driver, step schedules, original-time export,
//!   decay budget checks.
//! * [`diagnostics`] — decay-order fits, contraction tables, growth
//!   regressions.
//!
//! Data-parallel inner loops go through [`parallel`]; with the default
//! `parallel` feature they run on rayon, without it the same code paths run
//! sequentially. All reductions use a fixed blocking so results are
//! bit-identical at every thread budget.

pub mod control;
pub mod diagnostics;
pub mod error;
pub(crate) mod fft;
pub mod grid;
pub mod hormander;
pub mod kernels;
pub mod parallel;
pub mod picard;
pub mod scheme;
pub mod semigroup;

pub use error::{Error, Result};
