//! File formats, dataset directories, the training driver and reports
//! around [`scgen_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pnm;
pub mod report;
pub mod run;
pub mod scgt;

pub use error::{Error, Result};
