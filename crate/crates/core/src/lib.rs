//! Explicit local solutions of Itô diffusions.
//!
//! A diffusion `dX = b(X, t) dt + σ(X, t) dW` is representable when
//! `X_t = φ(∫U dW, t)` for a deterministic map `φ` and matrix `U(t)`. This
//! crate checks the conditions for that, builds `φ` and `U`, and samples
//! paths exactly from the resulting Gaussian law.

pub mod catalog;
pub mod commutator;
pub mod diffeo;
pub mod error;
pub mod model;
pub mod numerics;
pub mod representation;
pub mod simulate;

pub use commutator::{CheckReport, Verdict};
pub use diffeo::{Chart, Diffeomorphism, NumericDiffeo, Permutation};
pub use error::{Error, Result, Witness};
pub use model::{SdeModel, StratonovichDrift};
pub use numerics::{BoxDomain, Grid};
pub use representation::{build_representation, CanonicalParams, Representation};
pub use simulate::{PathBundle, Scheme};
