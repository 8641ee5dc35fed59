pub mod autodiff;
pub mod chat;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
