pub mod corpus;
pub mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod select;
pub mod spec;
pub mod train;

pub use error::{Error, Result};
