//! Sentence level recurrent topic model.
//!
//! Every sentence of a document draws one topic from the document's
//! Dirichlet-distributed topic mixture, and its words are generated by an
//! LSTM language model conditioned on that topic's embedding. Training is
//! stochastic variational EM over sentence minibatches.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod inference;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
