pub mod cli;
pub mod dataset;
pub mod deq;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod format;
pub mod field;
pub mod loss;
pub mod mandel;
pub mod metrics;
pub mod microgen;
pub mod nn;
pub mod operators;
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
