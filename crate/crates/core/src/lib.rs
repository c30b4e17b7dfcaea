//! Numerics for degenerate Kolmogorov–Fokker–Planck operators
//!
//! `Y u = x^T B D u - ∂_t u` with diffusion in the first `m₀` coordinates.
//!
//! * [`hypogroup`]: translations, dilations, homogeneous norm, balls and cubes.
//! * [`fundsol`]: covariance `C(t)`, the Gaussian kernel `Γ₁` and its bounds.
//! * [`potential`]: the potentials `Γ₁(f)`, `Γ₁(D f)` and the `L^p → L^q` probe.
//! * [`gfunc`]: the convex logarithmic cutoff `G`.
//! * [`kfpsolve`]: finite differences for the equation with rough coefficients.
//! * [`regdiag`]: level-set, Poincaré, Sobolev, `L^∞` and oscillation probes.
//! * [`crocco`]: boundary-layer fields in Crocco variables.
//! * [`cli`]: the command-line front end used by the `kfp` binary.

pub mod cli;
pub mod crocco;
pub mod fundsol;
pub mod gfunc;
pub mod grid;
pub mod hypogroup;
pub mod kfpsolve;
pub mod linalg;
pub mod potential;
pub mod regdiag;
pub mod report;

pub use grid::{Axis, FnField, GridField, ScalarField};
pub use hypogroup::{AnisotropicBall, GroupPoint, OperatorStructure, Region, StructureSpec};
pub use report::{ProbeReport, Verdict};
