//! Driver library behind the `co2` binary: synthetic data generators, the
//! benchmark runners and the on-disk formats for coresets and reports.

pub mod bench;
pub mod generators;
pub mod output;
