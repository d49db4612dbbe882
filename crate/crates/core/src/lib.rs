pub mod closed_form;
pub mod curve;
pub mod error;
pub mod fdr;
pub mod functional;
pub mod lie;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
