//! Numerical laboratory for the slightly compressible Brinkman-Forchheimer
//! system
//!
//! ```text
//! du/dt - Δu + ∇p + f(u) = g,   u = 0 on ∂Ω
//! dp/dt + div(D u)        = 0,   <p> = 0
//! ```
//!
//! on the unit square or cube. The crate discretizes the system on a
//! collocated grid and measures the structures its long-time theory rests on:
//! energy identities, dissipative and Lipschitz estimates, partial smoothing,
//! the contracting/smoothing splittings of the truncated system, and the
//! spectrum of the pressure operator `𝔄 p = -div(D (-Δ)^{-1} ∇p)`.

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod physics;
pub mod reference;
pub mod rng;

pub use error::{Error, Result};
pub use grid::{Grid, ScalarField, VectorField};
pub use physics::{MediumMatrix, NonlinearityParams};
