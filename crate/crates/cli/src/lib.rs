//! Problem files, artifacts and pipeline stages behind the `roa` binary.

pub mod artifact;
pub mod pipeline;
pub mod problem;
