//! Multilevel piecewise-exponential survival modeling with a jointly
//! modeled ordinal placement, lattice-decomposed parameters, horseshoe
//! shrinkage and mean-field variational inference.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the model and training stack run in `f64`. The aliases below name the
//! double-precision instantiations.

// `!(x > 0)` guards deliberately reject NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod blob;
pub mod error;
pub mod evaluation;
pub mod history;
pub mod inference;
pub mod ingest;
pub mod model;
pub mod placement;
pub mod quantize;
pub mod quilt;
pub mod scalar;
pub mod survival;
pub mod synth;

pub use error::{Error, Result};

pub type Breakpoints = survival::Breakpoints<f64>;
pub type SurvivalObservation = survival::SurvivalObservation<f64>;
pub type Decomposition = quilt::LatticeDecomposition<f64>;
pub type Horseshoe = quilt::HorseshoeState<f64>;
pub type Parameters = model::PemParameters<f64>;
