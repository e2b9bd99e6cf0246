pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod growth;
pub mod model;
pub mod params;
pub mod schedule;
pub mod search;
pub mod supernet;
pub mod train;

pub use autodiff::{AdamW, AdamWConfig, Graph, Tensor, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
