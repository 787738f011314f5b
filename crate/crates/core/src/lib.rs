pub mod barycenter;
pub mod bench_io;
pub mod cli;
pub mod dadil;
pub mod distill;
pub mod distributions;
pub mod eval;
pub mod error;
pub mod ot;

pub use error::{Error, ErrorCategory, Result};
