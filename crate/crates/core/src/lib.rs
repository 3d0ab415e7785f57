pub mod attention;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod model;
pub mod oracle;
pub mod pointops;
pub mod selfcheck;
pub mod supervision;
pub mod tracker;
pub mod train;

pub use error::{CoreError, Result};
