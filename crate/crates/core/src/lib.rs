pub mod correction;
pub mod error;
pub mod harness;
pub mod pose;
pub mod selector;
pub mod synthgen;
pub mod tinynet;
pub mod tta;

pub use error::{Error, Result};
