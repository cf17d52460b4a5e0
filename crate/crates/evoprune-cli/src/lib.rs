//! Library surface of the batch front end, used by the binary and by the
//! acceptance suite.

pub mod config;
pub mod run;
