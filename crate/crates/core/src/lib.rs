pub mod baselines;
pub mod bench;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod objectives;
pub mod oracle;
pub mod selector;
pub mod tokenio;

pub use error::{Error, Result};
