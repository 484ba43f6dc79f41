pub mod attribution;
pub mod backtest;
pub mod error;
pub mod evaluation;
pub mod game;
pub mod io;
pub mod models;
pub mod numeric;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod weighting;

pub use error::{Error, Result};
