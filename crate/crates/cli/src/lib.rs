//! Library behind the `formtwin` binary: run-manifest handling, the
//! pipeline commands, and report rendering. The binary is a thin argument
//! parser over these modules; integration tests drive them directly.

pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod report;
