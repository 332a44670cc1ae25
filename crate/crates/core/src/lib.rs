pub mod config;
pub mod degenerate;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod fokker_planck;
pub mod grid;
pub mod linalg;
pub mod output;
pub mod radial;
pub mod scheme;
pub mod species;

pub use error::{Error, Result};
