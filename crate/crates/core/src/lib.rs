pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod matching;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
