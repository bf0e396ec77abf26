//! Contact-aware manipulation learning at desk scale: a flow-matching action
//! model with force/tactile expert fusion, an in-hand rotation copilot trained
//! with PPO, a hierarchical executor, and surrogate benchmark tasks.

pub mod backbone;
pub mod bench;
pub mod data;
pub mod error;
pub mod executor;
pub mod flow;
pub mod fusion;
pub mod imcopilot;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod record;
pub mod train;

pub use error::{Error, Result};
