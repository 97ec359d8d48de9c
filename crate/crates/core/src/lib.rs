pub mod class_graph;
pub mod cli;
pub mod encoder;
pub mod experiments;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod svg;
pub mod synthdata;

pub use error::{Error, Result};
