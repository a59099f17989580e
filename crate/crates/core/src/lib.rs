//! Particle and regression solvers for discounted infinite-horizon
//! McKean-Vlasov forward-backward SDEs from mean field games.
//!
//! The crate computes the equilibrium system
//! `dX = ∂_yH dt + dB`, `dY = −[∂_xH − rY] dt + Z dB`, `X_0 = ξ`,
//! the representative-player system started at a point `x` under the
//! frozen equilibrium law, the value functions `V` and `𝒱 = Y_0^{x,ξ}`,
//! and the Lions derivative `∂_μ𝒱` through its variational FBSDE
//! representations.

pub mod error;
pub mod harness;
pub mod lions;
pub mod measure;
pub mod model;
pub mod par;
pub mod paths;
pub mod regression;
pub mod solver;

pub use error::{Error, Result};
