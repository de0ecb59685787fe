//! Corpus-grounded completion of clinical code sets.
//!
//! Given a query concept and a library of curated value sets, the pipeline
//! retrieves the nearest sets by title embedding, pools their member codes as
//! candidates, scores every candidate with a classifier and evaluates the
//! result at the code-pair and value-set level. The [`theory`] module holds a
//! Monte Carlo check of the sample-complexity argument for restricting
//! prediction to the retrieved pool.

pub mod corpus;
pub mod embed;
pub mod persistence;
pub mod index;
pub mod pool;
pub mod split;
pub mod features;
pub mod model;
pub mod eval;
pub mod theory;
