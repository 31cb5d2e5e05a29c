//! Knowledge base population: predict the objects of `(subject, relation)`
//! pairs from web snippets, a masked language model and a knowledge graph,
//! then keep only the candidates an entailment model validates.

pub mod backends;
pub mod baselines;
pub mod calibrate;
pub mod cli;
pub mod candidates;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod regime;
pub mod retrieval;
pub mod schema;
pub mod template;
pub mod text;
pub mod traingen;
pub mod types;
pub mod validation;

pub use error::{Error, Result};
