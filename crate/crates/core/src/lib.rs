//! Galton–Watson fractals at desk scale.
//!
//! Random trees over a finite alphabet, their compressions, the smallest
//! fixed point criterion for the existence of monotone subtrees, similarity
//! IFS geometry, and the extraction of diffuse Ahlfors-regular subsets.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod branching;
pub mod error;
pub mod experiments;
pub mod extraction;
pub mod fixpoint;
pub mod geometry;
pub mod rng;
pub mod symbolic;

pub use branching::{GwSample, OffspringDistribution};
pub use error::{Error, Result};
pub use extraction::{ExtractedSubset, SubtreePredicate};
pub use fixpoint::{GFunction, MonotoneCollection};
pub use geometry::{Hyperplane, PointCloud, SimilarityIfs, SimilarityMap};
pub use symbolic::{FiniteTree, Section, StarTree, Weights, Word};
