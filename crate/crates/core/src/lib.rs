//! Fine-grained image-text alignment at desk scale.
//!
//! The pipeline encodes paired token sequences with small linear
//! encoders, compresses each branch's local tokens with a learnable
//! column-stochastic aggregation ([`atrm`]), scores pairs by
//! bidirectional max-then-mean cosine pooling ([`clim`]) and trains with
//! a hardest-negative dual triplet loss ([`loss`]). [`evalharness`]
//! reports Recall@{1,5,10} in both retrieval directions.

pub mod atrm;
pub mod cli;
pub mod clim;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod io;
pub mod loss;
pub mod posembed;
pub mod toyencoder;
pub mod trainer;

pub use diffcore::Matrix;
pub use error::{Error, Result};
