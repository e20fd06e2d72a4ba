//! Domain adaptation for Transformer NMT over multilingual multi-domain
//! corpora: domain-specialized decoder states, per-domain output biases, and
//! the tag-based fine tuning / multi-domain / mixed fine tuning strategies.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod heads;
pub mod model;
pub mod strategy;
pub mod tensor;

pub use error::{Error, Result};
