//! Process exit codes.

use std::fmt;

pub const SUCCESS: i32 = 0;
pub const USAGE: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

/// Bad flags, config values or argument combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps an error chain to an exit code: usage 2, data 3, numeric failure 4.
pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<tabicl::Error>() {
            return match e {
                tabicl::Error::NonFinite { .. } => NUMERIC,
                tabicl::Error::Config(_) | tabicl::Error::BudgetTooSmall { .. } => USAGE,
                _ => DATA,
            };
        }
    }
    DATA
}
