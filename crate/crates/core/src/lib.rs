//! Weakly supervised grounding of question words to schema concepts by
//! erasing words and awakening a latent alignment head.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eta;
pub mod eval;
pub mod grounding;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod synthetic;
pub mod tape;

pub use error::{EtaError, Result};
