//! Next-activity duration and location prediction from transit smart card
//! trips with an input-output hidden Markov model.
//!
//! Each gap between two consecutive trips of a user-day is a hidden activity
//! with an end location (the next boarding station) and a duration. Per user,
//! an IOHMM with context-dependent initial, transition and emission
//! probabilities is fitted by EM and used to predict the next activity.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod interpretation;
pub mod iohmm;
pub mod model_selection;
pub mod pipeline;
pub mod prediction;
pub mod seed;
pub mod types;

pub use error::{Error, Result};
