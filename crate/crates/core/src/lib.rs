//! Numerical laboratory for the geometrically nonlinear Cosserat micropolar
//! elasticity energy
//!
//! ```text
//! Coss(phi, R) = ∫_Ω ( |P(Rᵗ∇phi − I₃)|² + |∇R|ᵖ + ⟨phi − x, f⟩ + ⟨R, M⟩ ) dx
//! ```
//!
//! where `phi: Ω → ℝ³` is the translation, `R: Ω → SO(3)` the microrotation,
//! `P` the material map built from the moduli (μ₁, μ_c, μ₂), and `2 ≤ p < 3`.
//! Critical points couple a Poisson equation for `phi` with a p-harmonic-map
//! equation for `R`.
//!
//! The crate is organized along the pipeline:
//!
//! * [`geometry`] — exact SO(3)/so(3) kernels: the orthonormal skew basis,
//!   tangent frames `V_i(R) = a_i R`, the quaternion double cover, the
//!   material map `P`, retractions and re-orthonormalization.
//! * [`fields`] — uniform box grids, second-order difference operators,
//!   ball/shell quadrature, a Dirichlet Poisson solver and a binary snapshot
//!   format.
//! * [`energy`] — the discrete energy, its exact first variations in both
//!   variables, Euler–Lagrange residuals, and the second-variation form.
//! * [`solver`] — alternating minimization: exact phi-solves interleaved with
//!   Armijo-safeguarded Riemannian descent in R, with regularization
//!   continuation for the degenerate p-Laplacian.
//! * [`diagnostics`] — numerical verification of the structural identities
//!   satisfied by stationary/stable critical points: monotonicity tables,
//!   density maps and singular-set thresholding, the stationarity identity,
//!   the div-curl decomposition, and stability quadratic forms.

pub mod diagnostics;
pub mod energy;
pub mod fields;
pub mod geometry;
pub mod solver;

pub use energy::{ModelParams, State, TangentCoeffField};
pub use fields::{Grid, MatrixField, RotationField, ScalarField, VectorField};
pub use geometry::{ModuliSet, Rotation, UnitQuaternion};

/// Version string embedded in reports and snapshots.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
