//! Numerical laboratory for geodesic flows on negatively curved surfaces.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] — surface models in a fixed chart: metric, Christoffel
//!   symbols, Gaussian curvature and its gradient, exponential map.
//! * [`sasaki`] — the unit tangent bundle with the Sasaki metric: split
//!   (horizontal/vertical) vectors, sectional curvature, distance bounds.
//! * [`flow`] — the geodesic flow and its derivative cocycle via Jacobi
//!   fields, plus an exact matrix fast path for constant-curvature and
//!   modular-quotient models.
//! * [`splitting`] — stable/unstable splitting estimation, contraction
//!   constants, certificate arithmetic, and batch inequality checks.
//! * [`spectrum`] — Lyapunov spectra by QR-reorthonormalized cocycle
//!   products and forward-regularity diagnostics.
//! * [`entropy`] — Bowen-ball local entropy estimation, the return-time
//!   radius function, and partition entropy censuses.
//!
//! Batch drivers run through [`batch`], which is data-parallel when the
//! `parallel` feature (default) is enabled and sequential otherwise.
//! Randomness is derived from counter-based streams ([`rng`]) so results
//! are byte-identical across runs and thread counts.

pub mod batch;
pub mod entropy;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod ode;
pub mod oracles;
pub mod report;
pub mod rng;
pub mod sasaki;
pub mod spectrum;
pub mod splitting;

pub use error::{Error, Result};
