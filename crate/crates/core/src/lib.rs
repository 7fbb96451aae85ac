pub mod autodiff;
pub mod config;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod io;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod tokenizer;
pub mod trainer;
pub mod upstream;

pub use error::{Error, Result};
