//! Experiment driver behind the `attnlab` binary.

pub mod commands;
pub mod config;
mod rundir;

use std::fmt;

/// A configuration problem: bad flags, unreadable or inconsistent config.
#[derive(Debug)]
pub struct ConfigError(pub String);

/// Input data that cannot be read or generated.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "data error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}
impl std::error::Error for DataError {}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

/// Process exit status for an error: 2 for configuration, 3 for data, 4 for
/// training divergence, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<DataError>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<attnlab::Error>() {
            return match e {
                attnlab::Error::Divergence { .. } | attnlab::Error::NonFinite { .. } => EXIT_DIVERGENCE,
                attnlab::Error::Parse { .. } => EXIT_DATA,
                attnlab::Error::InvalidInput(_) | attnlab::Error::Contract(_) => EXIT_CONFIG,
                _ => 1,
            };
        }
    }
    1
}
