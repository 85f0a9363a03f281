//! Library surface of the experiment driver, exposed so integration tests
//! can call the subcommands directly.

pub mod config;
pub mod error;
pub mod inspect;
pub mod mine_cmd;
pub mod run;

pub use error::{CliError, Result};
