//! Full fine-scale simulation of nonlinear hyperelastic lattice structures.
//!
//! Lattices are built by spline composition: a multi-patch reference unit
//! cell tiled through Bézier macro-elements. The solver runs a
//! load-incremented Newton–Raphson loop with Armijo backtracking; tangent
//! systems are solved either by a sparse direct factorization (`standard`
//! path) or by a reduced-basis fast-assembly strategy feeding a
//! ROM-preconditioned inexact FETI-DP iteration (`rb` path).

pub mod math;
pub mod splines;
pub mod hyperelastic;
pub mod lattice;
pub mod assembly;
pub mod rom;
pub mod fetidp;
pub mod newton;
pub mod driver;
