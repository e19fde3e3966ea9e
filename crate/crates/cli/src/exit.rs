//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.

use std::fmt;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

/// Bad flags, bad configuration or missing required paths.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check over the data failed.
#[derive(Debug)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Violation {}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<Violation>() {
            return DATA;
        }
        if let Some(e) = cause.downcast_ref::<icm3d::Error>() {
            return match e {
                icm3d::Error::NonFinite { .. } => NUMERIC,
                icm3d::Error::Config(_) | icm3d::Error::InvalidSpec(_) => USAGE,
                _ => DATA,
            };
        }
        if cause.is::<toml::de::Error>() {
            return USAGE;
        }
    }
    DATA
}
