//! A desk-scale laboratory for connecting discrete text perturbations with
//! continuous embedding-space perturbations.
//!
//! The pipeline: train a small text classifier, generate token-substitution
//! perturbations, search for the minimum L2 norm bound whose projected
//! gradient attack shifts the model output as much as the discrete edit did,
//! then train a regression scorer that predicts that bound straight from the
//! marked-up text. Rank correlations against edit distance and an embedding
//! similarity proxy quantify how learnable the connection is.

pub mod cli;
pub mod diffcore;
pub mod epsilon_search;
pub mod error;
pub mod perturbgen;
pub mod scorer;
pub mod stats;
pub mod textmodel;
pub mod tuplestore;

pub use error::{Error, Result};
