pub mod arma_aparch;
pub mod backtest;
pub mod cli;
pub mod copula;
pub mod data;
pub mod dists;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod optim;
pub mod record;

pub use error::{Error, Result};
