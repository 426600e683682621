//! A self-contained 1-bit graph neural network engine.
//!
//! The crate binarizes GNN weights and features to {-1, +1} with
//! straight-through gradients, runs binary layers on an XNOR+popcount
//! kernel, and replaces the fixed neighborhood aggregator with two
//! learnable meta-aggregators: an exclusive Gumbel-softmax selector
//! over a pool of candidates ([`meta::gna_select`]) and a diffused
//! log-sum-exp hybrid ([`meta::ana_aggregate`] and friends).
//!
//! Core math is generic over the scalar type via [`Scalar`]; the
//! training stack runs at [`Real`] (`f32`), while tests exercise the
//! same code paths at `f64` and the collision analyzer works in exact
//! rational arithmetic.

pub mod aggregators;
pub mod analyze;
pub mod binarize;
pub mod config;
pub mod data;
pub mod graph;
pub mod matrix;
pub mod meta;
pub mod model;
pub mod stats;
pub mod tape;
pub mod train;

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the engine is generic over.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum<Self>
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Casts an `f64` constant into the active scalar type.
#[inline]
pub fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("f64 constant representable in scalar type")
}

/// Default training precision: 32-bit floats everywhere.
pub type Real = f32;

/// Dense matrix at the default precision.
pub type RealMatrix = matrix::Matrix<Real>;

/// Graph with features at the default precision.
pub type RealGraph = graph::Graph<Real>;

/// Mini-batch of graphs at the default precision.
pub type RealBatch = graph::GraphBatch<Real>;

/// Dataset at the default precision.
pub type RealDataset = data::Dataset<Real>;

/// Model at the default precision.
pub type RealModel = model::BinGnnModel<Real>;
