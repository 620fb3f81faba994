//! Job orchestration behind the `vcgraph` and `vcgraph-guest` binaries.

pub mod job;
pub mod progfile;
pub mod report;
