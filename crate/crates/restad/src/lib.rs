//! Command-line tools, file formats and experiment runners for
//! [`restad_core`].

pub mod ablate;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
