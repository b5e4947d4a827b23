//! Run configuration and evaluation probes behind the command-line tool.

mod config;
mod probes;

pub use config::RunConfig;
pub use probes::{
    probe_position, probe_properties, CheckResult, DepthRow, Fault, PositionProbe, PositionReport, PropertyReport,
};
